#include "conlab/report.hpp"

#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace conlab::report {

namespace {

json load_json_artifact(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw ValidationError("report: missing artifact: " + path);
    }
    std::ifstream in(path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(path + ": bad JSON: " + e.what());
    }
    return j;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

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

std::string pct_reduction(double base, double now) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << reduction_percent(base, now) << "%";
    return os.str();
}

struct EvalColumn {
    std::string label;
    json report;
};

void emit_audit_table(std::ostream& os, const std::vector<EvalColumn>& cols) {
    os << "## Metric audit\n\n";
    os << "| Metric |";
    for (const auto& c : cols) os << " " << c.label << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
    os << "\n";

    const auto row = [&](const std::string& name, auto getter) {
        os << "| " << name << " |";
        for (const auto& c : cols) os << " " << getter(c.report) << " |";
        os << "\n";
    };

    row("Binary questions", [](const json& r) { return std::to_string(r.at("n_pairs").get<std::size_t>()); });
    row("Ground truth Yes", [](const json& r) { return std::to_string(r.at("gt_yes_count").get<std::size_t>()); });
    row("Ground truth No", [](const json& r) { return std::to_string(r.at("gt_no_count").get<std::size_t>()); });
    row("Flips", [](const json& r) { return std::to_string(r.at("n_flipped_pairs").get<std::size_t>()); });
    row("Flip rate", [](const json& r) { return pct1(r.at("flip_rate_pair").get<double>()); });
    row("Mean margin diff", [](const json& r) { return num2(r.at("mean_margin_diff").get<double>()); });
    row("Correct predictions", [](const json& r) { return std::to_string(r.at("n_correct").get<std::size_t>()); });
    row("Accuracy", [](const json& r) {
        return r.at("accuracy_orig").is_null() ? std::string("N/A")
                                               : pct1(r.at("accuracy_orig").get<double>());
    });
    row("Model predicts Yes", [](const json& r) { return std::to_string(r.at("pred_yes_count").get<std::size_t>()); });
    row("Model predicts No", [](const json& r) { return std::to_string(r.at("pred_no_count").get<std::size_t>()); });

    if (cols.size() >= 2) {
        const json& base = cols.front().report;
        const json& now = cols.back().report;
        os << "\n";
        os << "Flip reduction: "
           << pct_reduction(base.at("flip_rate_pair").get<double>(),
                            now.at("flip_rate_pair").get<double>())
           << "\n";
        os << "Margin reduction: "
           << pct_reduction(base.at("mean_margin_diff").get<double>(),
                            now.at("mean_margin_diff").get<double>())
           << "\n";
    }
    os << "\n";
}

}  // namespace

std::string assemble(const std::vector<std::string>& manifest_paths, bool with_timestamp) {
    if (manifest_paths.empty()) throw ValidationError("report: no manifests given");

    std::vector<EvalColumn> eval_cols;
    std::vector<json> ablations;
    std::vector<std::pair<std::string, json>> stat_rows;  // (invocation, result)

    for (const auto& mpath : manifest_paths) {
        const auto m = manifest::read_manifest(mpath);
        if (m.command == "eval" || m.command == "train") {
            for (const auto& a : m.artifact_paths) {
                if (ends_with(a, ".report.json")) {
                    eval_cols.push_back({eval_cols.empty() ? "Baseline" : "Trained",
                                         load_json_artifact(a)});
                }
            }
        } else if (m.command == "ablate") {
            for (const auto& a : m.artifact_paths) {
                if (ends_with(a, ".ablation.json")) ablations.push_back(load_json_artifact(a));
            }
        } else if (m.command == "stats") {
            for (const auto& a : m.artifact_paths) {
                if (ends_with(a, ".stat.json")) {
                    stat_rows.emplace_back(m.config_snapshot.dump(), load_json_artifact(a));
                }
            }
        }
        // Other commands contribute no tables.
    }

    std::ostringstream os;
    os << "# Consistency lab report\n\n";
    if (with_timestamp) {
        char buf[64];
        const std::time_t now = std::time(nullptr);
        std::tm tm_utc;
        gmtime_r(&now, &tm_utc);
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
        os << "Generated at: " << buf << "\n\n";
    }

    if (!eval_cols.empty()) emit_audit_table(os, eval_cols);

    for (const auto& rows : ablations) {
        os << "## Layer ablation\n\n";
        os << "| Layers | Margin Diff | Reduction | Params |\n|---|---|---|---|\n";
        for (const auto& r : rows) {
            os << "| " << r.at("name").get<std::string>() << " | "
               << num2(r.at("mean_margin_diff").get<double>()) << " | ";
            if (r.at("reduction_percent").is_null()) {
                os << "N/A";
            } else {
                std::ostringstream p;
                p.setf(std::ios::fixed);
                p.precision(1);
                p << r.at("reduction_percent").get<double>() << "%";
                os << p.str();
            }
            os << " | " << r.at("param_count").get<std::size_t>() << " |\n";
        }
        os << "\n";
    }

    if (!stat_rows.empty()) {
        os << "## Statistical tests\n\n";
        os << "| Invocation | Statistic | p-value | Convention |\n|---|---|---|---|\n";
        for (const auto& [inv, r] : stat_rows) {
            std::ostringstream st;
            st.precision(6);
            if (r.at("statistic").is_null()) st << "inf";
            else st << r.at("statistic").get<double>();
            std::ostringstream pv;
            pv.precision(6);
            pv << r.at("p_value").get<double>();
            os << "| `" << inv << "` | " << st.str() << " | " << pv.str() << " | "
               << r.at("convention").get<std::string>() << " |\n";
        }
        os << "\n";
    }

    return os.str();
}

}  // namespace conlab::report
