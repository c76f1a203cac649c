#pragma once

#include <functional>
#include <string>
#include <vector>

#include "shifcon/corpus.hpp"
#include "shifcon/model.hpp"
#include "shifcon/repstore.hpp"
#include "shifcon/tokens.hpp"

namespace shifcon::toymodel {

/// Chooses which per-layer matrix of a trace enters a dump; the default is
/// the effective (post-hook) stream.
using LayerStatePicker = std::function<const Matrix&(const ForwardTrace&, int layer)>;

/// Hooks to install per query language (empty function = no hooks anywhere).
using HooksProvider = std::function<std::vector<Hook>(const std::string& language)>;

/// Run the model over the chosen sentences in every language and collect the
/// per-layer token representations of the non-special positions. BOS/EOS
/// rows are excluded by convention, so pooled sentence vectors cover content
/// tokens only.
inline repstore::ActivationDump collect_activation_dump(const ToyModelParams& params,
                                                        const ParallelCorpus& corpus,
                                                        const std::vector<int>& sentence_ids,
                                                        const HooksProvider& hooks_for = {},
                                                        const LayerStatePicker& pick = {}) {
    if (sentence_ids.empty()) throw InvalidInputError("dump: no sentences selected");
    repstore::ActivationDump dump;
    dump.model_id = "toymodel-" + to_hex(params.checksum());
    dump.num_layers = params.config.num_layers;
    dump.hidden_dim = params.config.hidden_dim;

    for (int lang = 0; lang < corpus.spec.num_languages; ++lang) {
        const std::string name = corpus.scheme.language_name(lang);
        dump.languages.push_back(name);
        std::vector<Hook> hooks;
        if (hooks_for) hooks = hooks_for(name);

        repstore::ActivationDump::LanguageActivations acts;
        acts.layers.assign(static_cast<std::size_t>(dump.num_layers),
                           Matrix(0, static_cast<std::size_t>(dump.hidden_dim)));
        std::uint64_t token_count = 0;
        std::vector<std::vector<double>> layer_rows(static_cast<std::size_t>(dump.num_layers));

        for (int id : sentence_ids) {
            const std::vector<int> tokens = corpus.render(id, lang);
            ForwardTrace trace = forward_with_hooks(params, tokens, hooks);
            std::size_t content = 0;
            for (int layer = 1; layer <= dump.num_layers; ++layer) {
                const Matrix& states =
                    pick ? pick(trace, layer) : trace.layer_state(layer);
                auto& rows = layer_rows[static_cast<std::size_t>(layer) - 1];
                content = 0;
                for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
                    if (corpus.scheme.is_special(tokens[pos])) continue;
                    rows.insert(rows.end(), states.row(pos).begin(), states.row(pos).end());
                    ++content;
                }
            }
            token_count += content;
            acts.sentence_offsets.push_back(token_count);
        }
        for (int layer = 0; layer < dump.num_layers; ++layer) {
            auto& m = acts.layers[static_cast<std::size_t>(layer)];
            m = Matrix(token_count, static_cast<std::size_t>(dump.hidden_dim));
            m.data = std::move(layer_rows[static_cast<std::size_t>(layer)]);
        }
        dump.per_language[name] = std::move(acts);
    }
    dump.validate();
    return dump;
}

}  // namespace shifcon::toymodel
