#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "shifcon/geometry.hpp"
#include "shifcon/matrix.hpp"
#include "shifcon/model.hpp"

namespace shifcon::intervention {

using numkit::Matrix;
using numkit::Vec;

/// Move every token state out of language l's subspace into the dominant
/// one: each row r becomes r - v_l + v_d.
inline Matrix shift_toward(const Matrix& h, const Vec& v_l, const Vec& v_d) {
    if (h.cols != v_l.size() || h.cols != v_d.size())
        throw InvalidInputError("shift_toward: dimension mismatch");
    Matrix out = h;
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += v_d[j] - v_l[j];
    return out;
}

/// Undo the move before generation: each row becomes row - v_d + v_l.
inline Matrix shift_backward(const Matrix& h_tilde, const Vec& v_d, const Vec& v_l) {
    if (h_tilde.cols != v_d.size() || h_tilde.cols != v_l.size())
        throw InvalidInputError("shift_backward: dimension mismatch");
    Matrix out = h_tilde;
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += v_l[j] - v_d[j];
    return out;
}

/// Where and with which vectors the shifts fire: shift-toward at l_to,
/// shift-backward at l_bk, using the per-layer vectors of the query language
/// and the dominant language. Vectors are constants with respect to training
/// gradients; the online estimator replaces them between steps.
struct ShiftPlan {
    std::string dominant_language;
    geometry::ShiftArea area;
    geometry::LanguageVectorTable vector_table;
    bool enabled = true;

    ShiftPlan() = default;
    ShiftPlan(std::string dominant, geometry::ShiftArea a, geometry::LanguageVectorTable table,
              bool on = true)
        : dominant_language(std::move(dominant)),
          area(a),
          vector_table(std::move(table)),
          enabled(on) {
        area.validate(vector_table.num_layers);
        if (vector_table.vectors.find(dominant_language) == vector_table.vectors.end())
            throw InvalidInputError("shift plan: dominant language '" + dominant_language +
                                    "' missing from the vector table");
    }

    nlohmann::json to_json() const {
        nlohmann::json checksums = nlohmann::json::object();
        for (const auto& lang : vector_table.languages)
            checksums[lang] = to_hex(vector_table.checksum(lang));
        return {{"dominant_language", dominant_language},
                {"L_to", area.l_to},
                {"L_bk", area.l_bk},
                {"beta", area.beta},
                {"enabled", enabled},
                {"vector_checksums", checksums}};
    }
};

/// Hook pair implementing the plan for one query language: shift-toward at
/// L_to, shift-backward at L_bk. Dominant queries and disabled plans get no
/// hooks. Hooks apply to every position on every forward pass.
inline std::vector<toymodel::Hook> build_hooks(const ShiftPlan& plan,
                                               const std::string& query_language,
                                               std::vector<std::string>* warnings = nullptr) {
    if (plan.vector_table.vectors.find(query_language) == plan.vector_table.vectors.end())
        throw LookupError("shift plan: unknown query language '" + query_language + "'");
    if (!plan.enabled) {
        if (warnings) warnings->push_back("shift plan disabled; no hooks installed");
        return {};
    }
    if (query_language == plan.dominant_language) return {};

    const Vec v_l_to = plan.vector_table.at(query_language, plan.area.l_to);
    const Vec v_d_to = plan.vector_table.at(plan.dominant_language, plan.area.l_to);
    const Vec v_l_bk = plan.vector_table.at(query_language, plan.area.l_bk);
    const Vec v_d_bk = plan.vector_table.at(plan.dominant_language, plan.area.l_bk);

    std::vector<toymodel::Hook> hooks;
    hooks.push_back({plan.area.l_to,
                     [v_l_to, v_d_to](Matrix& h) { h = shift_toward(h, v_l_to, v_d_to); },
                     "shift_toward:" + query_language});
    hooks.push_back({plan.area.l_bk,
                     [v_d_bk, v_l_bk](Matrix& h) { h = shift_backward(h, v_d_bk, v_l_bk); },
                     "shift_backward:" + query_language});
    return hooks;
}

/// The constant per-layer offsets the plan applies for a query language,
/// which is all the training backward pass needs to know about hooks.
struct ShiftOffsets {
    int l_to = 0, l_bk = 0;
    Vec delta_to;  // v_d - v_l at l_to
    Vec delta_bk;  // v_l - v_d at l_bk
    bool active = false;
};

inline ShiftOffsets shift_offsets(const ShiftPlan& plan, const std::string& query_language) {
    ShiftOffsets off;
    if (!plan.enabled || query_language == plan.dominant_language) return off;
    const Vec& v_l_to = plan.vector_table.at(query_language, plan.area.l_to);
    const Vec& v_d_to = plan.vector_table.at(plan.dominant_language, plan.area.l_to);
    const Vec& v_l_bk = plan.vector_table.at(query_language, plan.area.l_bk);
    const Vec& v_d_bk = plan.vector_table.at(plan.dominant_language, plan.area.l_bk);
    off.l_to = plan.area.l_to;
    off.l_bk = plan.area.l_bk;
    off.delta_to.resize(v_l_to.size());
    off.delta_bk.resize(v_l_to.size());
    for (std::size_t i = 0; i < v_l_to.size(); ++i) {
        off.delta_to[i] = v_d_to[i] - v_l_to[i];
        off.delta_bk[i] = v_l_bk[i] - v_d_bk[i];
    }
    off.active = true;
    return off;
}

}  // namespace shifcon::intervention
