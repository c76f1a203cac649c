#pragma once

#include <string>

#include "shifcon/common.hpp"

namespace shifcon::toymodel {

/// Synthetic vocabulary: three specials followed by one token per
/// (language, concept) pair. encode is a bijection onto
/// [kSpecials, vocab_size), so language detection on generated text is exact.
struct TokenScheme {
    int num_languages = 0;
    int num_concepts = 0;

    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSpecials = 3;

    int vocab_size() const { return kSpecials + num_languages * num_concepts; }

    bool is_special(int token) const { return token >= 0 && token < kSpecials; }

    int encode(int language, int concept_id) const {
        if (language < 0 || language >= num_languages)
            throw InvalidInputError("token scheme: language " + std::to_string(language) +
                                    " outside 0.." + std::to_string(num_languages - 1));
        if (concept_id < 0 || concept_id >= num_concepts)
            throw InvalidInputError("token scheme: concept " + std::to_string(concept_id) +
                                    " outside 0.." + std::to_string(num_concepts - 1));
        return kSpecials + language * num_concepts + concept_id;
    }

    int language_of(int token) const {
        check_content(token);
        return (token - kSpecials) / num_concepts;
    }

    int concept_of(int token) const {
        check_content(token);
        return (token - kSpecials) % num_concepts;
    }

    std::string language_name(int language) const { return "L" + std::to_string(language); }

private:
    void check_content(int token) const {
        if (token < kSpecials || token >= vocab_size())
            throw InvalidInputError("token scheme: token " + std::to_string(token) +
                                    " is not a content token");
    }
};

}  // namespace shifcon::toymodel
