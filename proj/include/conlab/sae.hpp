#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "conlab/common.hpp"
#include "conlab/records.hpp"

namespace conlab::sae {

// Linear encoder with ReLU plus linear decoder.
//   f = ReLU(w_enc h + b_enc),  h_hat = w_dec f
struct SaeWeights {
    Mat w_enc;  // features x hidden
    Vec b_enc;  // features
    Mat w_dec;  // hidden x features
    std::size_t feature_count = 0;
    std::size_t hidden_dim = 0;

    void validate() const;
};

struct ReconStats {
    double r2_mean = 0.0;
    double r2_sd = 0.0;
    double fvu = 0.0;  // 1 - r2_mean
    double l0_mean = 0.0;
    double l0_sd = 0.0;
    std::size_t n = 0;              // rows included
    std::size_t excluded_rows = 0;  // zero-variance rows skipped
};

struct FeatureDelta {
    std::string pair_id;
    Vec deltas;  // f_orig - f_para, length feature_count
    std::vector<std::pair<std::size_t, double>> top_k;  // by |delta| descending
};

struct GridRow {
    std::string category;
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t n = 0;
};

struct GridSummary {
    std::vector<GridRow> rows;  // category order: lexicographic
    std::size_t empty_categories = 0;
};

struct ResponseRate {
    std::size_t responding = 0;
    std::size_t total = 0;
    double mean_abs_delta = 0.0;
};

Vec encode(const Vec& h, const SaeWeights& sae);
Vec decode(const Vec& f, const SaeWeights& sae);

// Per-row R^2 = 1 - MSE(h, h_hat)/Var(h), Var over hidden dims of that row;
// aggregates use the unbiased sample sd. L0 counts features > l0_epsilon.
ReconStats reconstruction_stats(const records::ActivationMatrix& acts, const SaeWeights& sae,
                                double l0_epsilon = 0.0);

FeatureDelta feature_delta(const Vec& h_orig, const Vec& h_para, const SaeWeights& sae,
                           std::size_t top_k = 10, const std::string& pair_id = "");

GridSummary prompt_grid_summary(const std::map<std::string, std::vector<double>>& activations);

ResponseRate feature_response_rate(const std::vector<FeatureDelta>& deltas,
                                   std::size_t feature_id, double threshold);

// Analytic SAE over the signed orthonormal dictionary {u_i, -u_i}: encoder is
// the dictionary transpose, bias 0, so decode(encode(h)) == h exactly for all
// h. With the identity basis, feature i is +e_i and feature hidden+i is -e_i.
SaeWeights make_signed_basis_sae(std::size_t hidden_dim);
SaeWeights make_signed_basis_sae(const Mat& orthonormal_basis);

// Manifest JSON naming one ACTV file per matrix.
SaeWeights load_sae(const std::string& manifest_path);
void save_sae(const std::string& manifest_path, const SaeWeights& sae);

std::string recon_stats_to_json(const ReconStats& s);
std::string grid_summary_to_json(const GridSummary& g);
std::string grid_summary_to_markdown(const GridSummary& g);

}  // namespace conlab::sae
