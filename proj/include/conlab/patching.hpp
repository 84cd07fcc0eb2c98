#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "conlab/sae.hpp"
#include "conlab/toymodel.hpp"

namespace conlab::patching {

enum class PatchMode { SubtractDeltaDirection };

struct PatchSpec {
    std::size_t layer = 0;  // residual index: stream after `layer` blocks
    std::set<std::size_t> feature_ids;
    PatchMode mode = PatchMode::SubtractDeltaDirection;
};

struct PatchResult {
    double m_orig = 0.0;
    double m_para = 0.0;
    double m_patched = 0.0;
    std::optional<double> recovery;  // absent when m_orig == m_para
};

struct PatchInput {
    Vec image_feat;
    toymodel::QFeat question;
};

// Adds w_dec * (f_orig - f_para) restricted to feature_ids onto the
// paraphrase residual at spec.layer, then resumes the forward pass.
// Algebraically the same as subtracting the para-minus-orig direction.
PatchResult patch_margin(const toymodel::ToyModel& model, const sae::SaeWeights& sae_w,
                         const PatchSpec& spec, const PatchInput& input_orig,
                         const PatchInput& input_para);

double recovery_fraction(double m_orig, double m_para, double m_patched);

struct ControlBaseline {
    double mean_recovery = 0.0;
    std::vector<std::size_t> feature_ids;
    std::vector<PatchResult> per_feature;
};

// Samples n_controls features (seeded, without replacement) from the
// candidate_features features with smallest |delta| at `layer`, then patches
// each one alone.
ControlBaseline control_patch_baseline(const toymodel::ToyModel& model,
                                       const sae::SaeWeights& sae_w, std::size_t layer,
                                       std::size_t candidate_features, std::size_t n_controls,
                                       std::uint64_t seed, const PatchInput& input_orig,
                                       const PatchInput& input_para);

std::string patch_result_to_json(const PatchResult& r);

}  // namespace conlab::patching
