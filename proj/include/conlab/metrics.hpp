#pragma once

#include <optional>
#include <string>
#include <vector>

#include "conlab/records.hpp"

namespace conlab::metrics {

struct MarginPair {
    std::string pair_id;
    double m_orig = 0.0;
    double m_para = 0.0;
    bool flipped = false;
    double margin_diff = 0.0;  // |m_orig - m_para|
};

struct ConsistencyReport {
    std::size_t n_pairs = 0;
    std::size_t n_questions = 0;
    std::size_t n_flipped_pairs = 0;
    std::size_t n_flipped_questions = 0;
    double flip_rate_pair = 0.0;
    double flip_rate_question = 0.0;
    double mean_margin_diff = 0.0;
    std::optional<double> accuracy_orig;  // absent when no record carries ground truth
    std::size_t n_with_ground_truth = 0;
    std::size_t n_correct = 0;
    std::size_t gt_yes_count = 0;
    std::size_t gt_no_count = 0;
    std::size_t pred_yes_count = 0;  // original-question prediction, over records with ground truth
    std::size_t pred_no_count = 0;
    std::size_t degenerate_zero_margins = 0;  // pairs where either margin is exactly 0
};

struct FlipBankEntry {
    std::string pair_id;
    records::Label label_orig = records::Label::Ambiguous;
    records::Label label_para = records::Label::Ambiguous;
    double similarity = 0.0;
    double m_orig = 0.0;
    double m_para = 0.0;
};

struct FlipBankResult {
    std::vector<FlipBankEntry> entries;
    std::size_t skipped_missing_fields = 0;  // records without responses/similarity
};

// margin = logit_yes - logit_no
double margin(double logit_yes, double logit_no);

// sign(0) is positive ("Yes"); zero margins are tallied separately.
bool is_flip(double m_orig, double m_para);

MarginPair margin_pair(const records::EvalRecord& rec);

ConsistencyReport evaluate(const std::vector<records::EvalRecord>& recs);

FlipBankResult build_flipbank(const std::vector<records::EvalRecord>& recs,
                              double sim_threshold = 0.95);

std::string report_to_json(const ConsistencyReport& r);
std::string report_to_markdown(const ConsistencyReport& r);

}  // namespace conlab::metrics
