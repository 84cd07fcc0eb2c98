#include "conlab/patching.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

using nlohmann::json;

namespace conlab::patching {

double recovery_fraction(double m_orig, double m_para, double m_patched) {
    return (m_patched - m_para) / (m_orig - m_para);
}

PatchResult patch_margin(const toymodel::ToyModel& model, const sae::SaeWeights& sae_w,
                         const PatchSpec& spec, const PatchInput& input_orig,
                         const PatchInput& input_para) {
    if (sae_w.hidden_dim != model.config.hidden_dim) {
        throw ValidationError("patch: SAE hidden_dim does not match the model");
    }
    if (spec.layer > model.config.n_layers) throw ValidationError("patch: layer out of range");
    if (spec.feature_ids.empty()) throw ValidationError("patch: empty feature set");
    for (std::size_t f : spec.feature_ids) {
        if (f >= sae_w.feature_count) {
            throw ValidationError("patch: feature id " + std::to_string(f) + " out of range");
        }
    }

    const auto trace_orig = toymodel::forward(model, input_orig.image_feat, input_orig.question);
    const auto trace_para = toymodel::forward(model, input_para.image_feat, input_para.question);

    const Vec& h_orig = trace_orig.residuals[spec.layer];
    const Vec& h_para = trace_para.residuals[spec.layer];

    const Vec f_orig = sae::encode(h_orig, sae_w);
    const Vec f_para = sae::encode(h_para, sae_w);
    Vec masked_delta(sae_w.feature_count, 0.0);
    for (std::size_t f : spec.feature_ids) masked_delta[f] = f_orig[f] - f_para[f];
    const Vec direction = sae::decode(masked_delta, sae_w);

    Vec h_patched = h_para;
    axpy(h_patched, direction);
    const auto trace_patched = toymodel::forward_from(model, h_patched, spec.layer);

    PatchResult r;
    r.m_orig = trace_orig.margin();
    r.m_para = trace_para.margin();
    r.m_patched = trace_patched.margin();
    if (r.m_orig != r.m_para) r.recovery = recovery_fraction(r.m_orig, r.m_para, r.m_patched);
    return r;
}

ControlBaseline control_patch_baseline(const toymodel::ToyModel& model,
                                       const sae::SaeWeights& sae_w, std::size_t layer,
                                       std::size_t candidate_features, std::size_t n_controls,
                                       std::uint64_t seed, const PatchInput& input_orig,
                                       const PatchInput& input_para) {
    if (n_controls < 1) throw ValidationError("control_patch_baseline: n_controls must be >= 1");
    if (candidate_features < n_controls) {
        throw ValidationError("control_patch_baseline: only " + std::to_string(candidate_features) +
                              " eligible features for " + std::to_string(n_controls) + " controls");
    }
    if (candidate_features > sae_w.feature_count) {
        throw ValidationError("control_patch_baseline: candidate pool exceeds feature count");
    }

    const auto trace_orig = toymodel::forward(model, input_orig.image_feat, input_orig.question);
    const auto trace_para = toymodel::forward(model, input_para.image_feat, input_para.question);
    if (layer > model.config.n_layers) throw ValidationError("control patch: layer out of range");
    const Vec f_orig = sae::encode(trace_orig.residuals[layer], sae_w);
    const Vec f_para = sae::encode(trace_para.residuals[layer], sae_w);

    // Pool = lowest-|delta| features, ties broken by feature id.
    std::vector<std::size_t> order(sae_w.feature_count);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(f_orig[a] - f_para[a]) < std::abs(f_orig[b] - f_para[b]);
    });
    std::vector<std::size_t> pool(order.begin(),
                                  order.begin() + static_cast<std::ptrdiff_t>(candidate_features));

    // Seeded sample without replacement.
    auto rng = seeded_stream(seed, "control-patch");
    ControlBaseline out;
    for (std::size_t k = 0; k < n_controls; ++k) {
        const std::size_t idx = static_cast<std::size_t>(rng.below(pool.size()));
        out.feature_ids.push_back(pool[idx]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(idx));
    }

    double sum = 0.0;
    for (std::size_t f : out.feature_ids) {
        PatchSpec spec;
        spec.layer = layer;
        spec.feature_ids = {f};
        const PatchResult r = patch_margin(model, sae_w, spec, input_orig, input_para);
        sum += r.recovery.value_or(0.0);
        out.per_feature.push_back(r);
    }
    out.mean_recovery = sum / static_cast<double>(n_controls);
    return out;
}

std::string patch_result_to_json(const PatchResult& r) {
    json j;
    j["m_orig"] = r.m_orig;
    j["m_para"] = r.m_para;
    j["m_patched"] = r.m_patched;
    if (r.recovery) j["recovery"] = *r.recovery; else j["recovery"] = nullptr;
    return j.dump(2) + "\n";
}

}  // namespace conlab::patching
