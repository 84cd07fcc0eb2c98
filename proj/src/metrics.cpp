#include "conlab/metrics.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace conlab::metrics {

double margin(double logit_yes, double logit_no) {
    if (!std::isfinite(logit_yes) || !std::isfinite(logit_no)) {
        throw ValidationError("margin: logits must be finite");
    }
    return logit_yes - logit_no;
}

namespace {
// sign(0) := +1
int sign_pos(double m) { return m >= 0.0 ? 1 : -1; }
}  // namespace

bool is_flip(double m_orig, double m_para) {
    return sign_pos(m_orig) != sign_pos(m_para);
}

MarginPair margin_pair(const records::EvalRecord& rec) {
    MarginPair p;
    p.pair_id = rec.pair_id;
    p.m_orig = margin(rec.logit_yes_orig, rec.logit_no_orig);
    p.m_para = margin(rec.logit_yes_para, rec.logit_no_para);
    p.flipped = is_flip(p.m_orig, p.m_para);
    p.margin_diff = std::abs(p.m_orig - p.m_para);
    return p;
}

ConsistencyReport evaluate(const std::vector<records::EvalRecord>& recs) {
    if (recs.empty()) throw ValidationError("evaluate: no records");

    ConsistencyReport rep;
    rep.n_pairs = recs.size();

    // question_id -> has at least one flipped pair
    std::map<std::string, bool> question_flipped;

    double sum_margin_diff = 0.0;  // fixed summation order: input order
    for (const auto& rec : recs) {
        const MarginPair p = margin_pair(rec);
        sum_margin_diff += p.margin_diff;
        if (p.flipped) ++rep.n_flipped_pairs;
        if (p.m_orig == 0.0 || p.m_para == 0.0) ++rep.degenerate_zero_margins;

        auto [it, inserted] = question_flipped.emplace(rec.question_id, p.flipped);
        if (!inserted) it->second = it->second || p.flipped;

        if (rec.ground_truth != records::GroundTruth::None) {
            ++rep.n_with_ground_truth;
            const bool pred_yes = sign_pos(p.m_orig) > 0;
            if (pred_yes) ++rep.pred_yes_count; else ++rep.pred_no_count;
            if (rec.ground_truth == records::GroundTruth::Yes) {
                ++rep.gt_yes_count;
                if (pred_yes) ++rep.n_correct;
            } else {
                ++rep.gt_no_count;
                if (!pred_yes) ++rep.n_correct;
            }
        }
    }

    rep.n_questions = question_flipped.size();
    for (const auto& [qid, flipped] : question_flipped) {
        (void)qid;
        if (flipped) ++rep.n_flipped_questions;
    }

    rep.flip_rate_pair = static_cast<double>(rep.n_flipped_pairs) / static_cast<double>(rep.n_pairs);
    rep.flip_rate_question =
        static_cast<double>(rep.n_flipped_questions) / static_cast<double>(rep.n_questions);
    rep.mean_margin_diff = sum_margin_diff / static_cast<double>(rep.n_pairs);
    if (rep.n_with_ground_truth > 0) {
        rep.accuracy_orig =
            static_cast<double>(rep.n_correct) / static_cast<double>(rep.n_with_ground_truth);
    }
    return rep;
}

FlipBankResult build_flipbank(const std::vector<records::EvalRecord>& recs, double sim_threshold) {
    FlipBankResult result;
    for (const auto& rec : recs) {
        if (!rec.response_orig || !rec.response_para || !rec.similarity) {
            ++result.skipped_missing_fields;
            continue;
        }
        const auto po = records::parse_yes_no(*rec.response_orig);
        const auto pp = records::parse_yes_no(*rec.response_para);
        if (po.label == records::Label::Ambiguous || pp.label == records::Label::Ambiguous) continue;
        if (po.label == pp.label) continue;
        if (!(*rec.similarity > sim_threshold)) continue;

        FlipBankEntry e;
        e.pair_id = rec.pair_id;
        e.label_orig = po.label;
        e.label_para = pp.label;
        e.similarity = *rec.similarity;
        e.m_orig = margin(rec.logit_yes_orig, rec.logit_no_orig);
        e.m_para = margin(rec.logit_yes_para, rec.logit_no_para);
        result.entries.push_back(std::move(e));
    }
    return result;
}

std::string report_to_json(const ConsistencyReport& r) {
    json j;
    j["n_pairs"] = r.n_pairs;
    j["n_questions"] = r.n_questions;
    j["n_flipped_pairs"] = r.n_flipped_pairs;
    j["n_flipped_questions"] = r.n_flipped_questions;
    j["flip_rate_pair"] = r.flip_rate_pair;
    j["flip_rate_question"] = r.flip_rate_question;
    j["mean_margin_diff"] = r.mean_margin_diff;
    if (r.accuracy_orig) j["accuracy_orig"] = *r.accuracy_orig; else j["accuracy_orig"] = nullptr;
    j["n_with_ground_truth"] = r.n_with_ground_truth;
    j["n_correct"] = r.n_correct;
    j["gt_yes_count"] = r.gt_yes_count;
    j["gt_no_count"] = r.gt_no_count;
    j["pred_yes_count"] = r.pred_yes_count;
    j["pred_no_count"] = r.pred_no_count;
    j["degenerate_zero_margins"] = r.degenerate_zero_margins;
    return j.dump(2) + "\n";
}

namespace {
std::string pct1(double fraction) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << round_to(100.0 * fraction, 1) << "%";
    return os.str();
}

std::string num2(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << round_to(v, 2);
    return os.str();
}
}  // namespace

std::string report_to_markdown(const ConsistencyReport& r) {
    std::ostringstream os;
    os << "| Metric | Value |\n|---|---|\n";
    os << "| Binary questions | " << r.n_pairs << " |\n";
    os << "| Ground truth Yes | " << r.gt_yes_count << " |\n";
    os << "| Ground truth No | " << r.gt_no_count << " |\n";
    os << "| Flips | " << r.n_flipped_pairs << " |\n";
    os << "| Flip rate | " << pct1(r.flip_rate_pair) << " |\n";
    os << "| Question flip rate | " << pct1(r.flip_rate_question) << " |\n";
    os << "| Mean margin diff | " << num2(r.mean_margin_diff) << " |\n";
    os << "| Correct predictions | " << r.n_correct << " |\n";
    os << "| Accuracy | " << (r.accuracy_orig ? pct1(*r.accuracy_orig) : std::string("N/A")) << " |\n";
    os << "| Model predicts Yes | " << r.pred_yes_count << " |\n";
    os << "| Model predicts No | " << r.pred_no_count << " |\n";
    os << "| Degenerate zero margins | " << r.degenerate_zero_margins << " |\n";
    return os.str();
}

}  // namespace conlab::metrics
