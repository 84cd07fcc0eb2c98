#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "conlab/common.hpp"

namespace conlab::records {

enum class GroundTruth { Yes, No, None };

// One (image, question, paraphrase) evaluation row.
struct EvalRecord {
    std::string pair_id;
    std::string question_id;
    std::string image_id;
    std::string question_text;
    std::string paraphrase_text;
    double logit_yes_orig = 0.0;
    double logit_no_orig = 0.0;
    double logit_yes_para = 0.0;
    double logit_no_para = 0.0;
    std::optional<std::string> response_orig;
    std::optional<std::string> response_para;
    GroundTruth ground_truth = GroundTruth::None;
    std::optional<double> similarity;  // precomputed semantic similarity in [0,1]
};

enum class Label { Yes, No, Ambiguous };

struct ParseResult {
    Label label = Label::Ambiguous;
    std::string matched_rule;
};

// Row-major f32 activation block as stored in the ACTV container.
struct ActivationMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int layer = 0;
    std::vector<float> values;  // rows*cols, row-major

    Vec row(std::size_t r) const {
        Vec out(cols);
        for (std::size_t c = 0; c < cols; ++c) out[c] = static_cast<double>(values[r * cols + c]);
        return out;
    }
};

struct LoadStats {
    std::size_t unknown_field_warnings = 0;
};

// JSONL reader; one EvalRecord object per line. Malformed lines, missing
// required fields and non-finite logits raise ValidationError with the
// 1-based line number. Unknown fields are ignored (counted in stats).
std::vector<EvalRecord> load_records(const std::string& path, LoadStats* stats = nullptr);

void save_records(const std::string& path, const std::vector<EvalRecord>& recs);

const std::vector<std::string>& default_hedging_terms();

// Rule-based yes/no parser. Order: a hedging term anywhere wins (Ambiguous),
// then the leading token decides, else Ambiguous.
ParseResult parse_yes_no(const std::string& text,
                         const std::vector<std::string>& hedging_terms = default_hedging_terms());

ActivationMatrix read_activation_matrix(const std::string& path);
void write_activation_matrix(const std::string& path, const ActivationMatrix& m);

ActivationMatrix to_activation_matrix(const std::vector<Vec>& rows, int layer);
ActivationMatrix mat_to_activation(const Mat& m, int layer);
Mat activation_to_mat(const ActivationMatrix& m);

std::string ground_truth_to_string(GroundTruth gt);
GroundTruth ground_truth_from_string(const std::string& s);

}  // namespace conlab::records
