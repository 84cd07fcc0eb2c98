#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "conlab/common.hpp"
#include "conlab/lora.hpp"
#include "conlab/manifest.hpp"
#include "conlab/metrics.hpp"
#include "conlab/patching.hpp"
#include "conlab/records.hpp"
#include "conlab/report.hpp"
#include "conlab/sae.hpp"
#include "conlab/stats.hpp"
#include "conlab/toymodel.hpp"

using nlohmann::json;
using namespace conlab;

namespace {

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out << content;
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open: " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(path + ": bad JSON: " + e.what());
    }
}

// Configuration precedence: built-in defaults < JSON config file < flags.
// CLI11 already applied the flags; this fills in config-file values for
// options the user did not pass on the command line.
template <typename T>
void overlay(const json& cfg, const char* key, CLI::Option* opt, T& value) {
    if (opt != nullptr && opt->count() > 0) return;
    if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

toymodel::ToyConfig toy_config_from_json(const json& j) {
    toymodel::ToyConfig cfg;
    if (j.contains("hidden_dim")) cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    if (j.contains("n_layers")) cfg.n_layers = j.at("n_layers").get<std::size_t>();
    if (j.contains("register_channel")) cfg.register_channel = j.at("register_channel").get<std::size_t>();
    if (j.contains("register_gain")) cfg.register_gain = j.at("register_gain").get<double>();
    if (j.contains("head_register_weight")) cfg.head_register_weight = j.at("head_register_weight").get<double>();
    if (j.contains("noise_sd")) cfg.noise_sd = j.at("noise_sd").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

json toy_config_to_json(const toymodel::ToyConfig& cfg) {
    json j;
    j["hidden_dim"] = cfg.hidden_dim;
    j["n_layers"] = cfg.n_layers;
    j["register_channel"] = cfg.register_channel;
    j["register_gain"] = cfg.register_gain;
    j["head_register_weight"] = cfg.head_register_weight;
    j["noise_sd"] = cfg.noise_sd;
    j["seed"] = cfg.seed;
    return j;
}

toymodel::ToyConfig load_toy_config(const std::string& path) {
    return toy_config_from_json(load_json_file(path));
}

std::set<std::size_t> parse_index_list(const std::string& s) {
    std::set<std::size_t> out;
    std::string cur;
    const auto flush = [&] {
        if (cur.empty()) return;
        const auto dash = cur.find('-');
        if (dash != std::string::npos && dash > 0) {
            const std::size_t lo = std::stoull(cur.substr(0, dash));
            const std::size_t hi = std::stoull(cur.substr(dash + 1));
            if (hi < lo) throw ValidationError("bad index range: " + cur);
            for (std::size_t i = lo; i <= hi; ++i) out.insert(i);
        } else {
            out.insert(std::stoull(cur));
        }
        cur.clear();
    };
    for (char c : s) {
        if (c == ',') flush();
        else cur.push_back(c);
    }
    flush();
    if (out.empty()) throw ValidationError("empty index list: '" + s + "'");
    return out;
}

std::set<toymodel::TargetModule> parse_modules(const std::string& s) {
    std::set<toymodel::TargetModule> out;
    std::string cur;
    const auto flush = [&] {
        if (!cur.empty()) out.insert(toymodel::module_from_name(cur));
        cur.clear();
    };
    for (char c : s) {
        if (c == ',') flush();
        else cur.push_back(c);
    }
    flush();
    if (out.empty()) throw ValidationError("empty module list");
    return out;
}

void emit_manifest(const std::string& primary_artifact, manifest::RunManifest m) {
    if (primary_artifact.empty()) return;
    m.tool_version = kToolVersion;
    manifest::write_manifest(primary_artifact + ".manifest.json", m);
}

stats::Tail tail_flag(bool one_tailed) {
    return one_tailed ? stats::Tail::OneTailed : stats::Tail::TwoTailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Paraphrase-consistency laboratory for binary VQA models"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    try {
        // ------------------------------------------------------------------ eval
        auto* eval_cmd = app.add_subcommand("eval", "Consistency metrics over an EvalRecord file");
        std::string eval_records, eval_out, eval_md;
        eval_cmd->add_option("--records", eval_records, "EvalRecord JSONL path")->required();
        eval_cmd->add_option("--out", eval_out, "write ConsistencyReport JSON (suffix .report.json)");
        eval_cmd->add_option("--md", eval_md, "write markdown table");
        eval_cmd->callback([&] {
            const auto recs = records::load_records(eval_records);
            const auto rep = metrics::evaluate(recs);
            std::cout << metrics::report_to_markdown(rep);
            std::vector<std::string> artifacts;
            if (!eval_out.empty()) {
                write_text(eval_out, metrics::report_to_json(rep));
                artifacts.push_back(eval_out);
            }
            if (!eval_md.empty()) {
                write_text(eval_md, metrics::report_to_markdown(rep));
                artifacts.push_back(eval_md);
            }
            if (!eval_out.empty()) {
                emit_manifest(eval_out, {"eval", json{{"records", eval_records}}, {}, artifacts});
            }
        });

        // -------------------------------------------------------------- flipbank
        auto* fb_cmd = app.add_subcommand("flipbank", "Extract confirmed-flip pairs");
        std::string fb_records, fb_out;
        double fb_threshold = 0.95;
        fb_cmd->add_option("--records", fb_records, "EvalRecord JSONL path")->required();
        fb_cmd->add_option("--sim-threshold", fb_threshold, "similarity threshold (default 0.95)");
        fb_cmd->add_option("--out", fb_out, "write flipbank JSONL");
        fb_cmd->callback([&] {
            const auto recs = records::load_records(fb_records);
            const auto result = metrics::build_flipbank(recs, fb_threshold);
            std::cout << "flipbank entries: " << result.entries.size()
                      << " (skipped, missing fields: " << result.skipped_missing_fields << ")\n";
            if (!fb_out.empty()) {
                std::ofstream out(fb_out);
                if (!out) throw ValidationError("cannot open for writing: " + fb_out);
                for (const auto& e : result.entries) {
                    json j;
                    j["pair_id"] = e.pair_id;
                    j["label_orig"] = e.label_orig == records::Label::Yes ? "Yes" : "No";
                    j["label_para"] = e.label_para == records::Label::Yes ? "Yes" : "No";
                    j["similarity"] = e.similarity;
                    j["m_orig"] = e.m_orig;
                    j["m_para"] = e.m_para;
                    out << j.dump() << "\n";
                }
                emit_manifest(fb_out, {"flipbank",
                                       json{{"records", fb_records}, {"sim_threshold", fb_threshold}},
                                       {},
                                       {fb_out}});
            }
        });

        // ----------------------------------------------------------------- stats
        auto* stats_cmd = app.add_subcommand("stats", "Statistical tests (StatResult as JSON)");
        stats_cmd->require_subcommand(1);

        const auto print_stat = [](const stats::StatResult& r, const std::string& out_path,
                                   const json& invocation) {
            const std::string text = stats::stat_result_to_json(r);
            std::cout << text;
            if (!out_path.empty()) {
                write_text(out_path, text);
                emit_manifest(out_path, {"stats", invocation, {}, {out_path}});
            }
        };

        auto* zt = stats_cmd->add_subcommand("ztest", "two-proportion z-test: k1 n1 k2 n2");
        std::vector<std::uint64_t> zt_counts;
        bool zt_one = false, zt_continuity = false;
        std::string zt_out;
        zt->add_option("counts", zt_counts, "k1 n1 k2 n2")->expected(4);
        zt->add_flag("--one-tailed", zt_one, "one-tailed (group 1 greater)");
        zt->add_flag("--continuity", zt_continuity, "apply continuity correction");
        zt->add_option("--out", zt_out, "write StatResult JSON (suffix .stat.json)");
        zt->callback([&] {
            const auto r = stats::two_proportion_z(zt_counts[0], zt_counts[1], zt_counts[2],
                                                   zt_counts[3], tail_flag(zt_one), zt_continuity);
            print_stat(r, zt_out,
                       json{{"test", "ztest"}, {"counts", zt_counts},
                            {"one_tailed", zt_one}, {"continuity", zt_continuity}});
        });

        auto* ch = stats_cmd->add_subcommand("cohens-h", "effect size for two proportions");
        std::vector<double> ch_props;
        ch->add_option("proportions", ch_props, "p1 p2")->expected(2);
        ch->callback([&] {
            json j;
            j["effect_size"] = stats::cohens_h(ch_props[0], ch_props[1]);
            std::cout << j.dump(2) << "\n";
        });

        auto* fe = stats_cmd->add_subcommand("fisher", "Fisher's exact test: a b c d");
        std::vector<std::uint64_t> fe_counts;
        bool fe_one = false;
        std::string fe_out;
        fe->add_option("counts", fe_counts, "a b c d")->expected(4);
        fe->add_flag("--one-tailed", fe_one, "one-tailed in the observed direction");
        fe->add_option("--out", fe_out, "write StatResult JSON (suffix .stat.json)");
        fe->callback([&] {
            const auto r = stats::fisher_exact(fe_counts[0], fe_counts[1], fe_counts[2],
                                               fe_counts[3], tail_flag(fe_one));
            print_stat(r, fe_out,
                       json{{"test", "fisher"}, {"counts", fe_counts}, {"one_tailed", fe_one}});
        });

        auto* tt = stats_cmd->add_subcommand("ttest", "one-sample t-test");
        std::size_t tt_n = 0;
        double tt_mean = 0.0, tt_sd = 0.0, tt_mu0 = 0.0;
        std::string tt_samples_file, tt_out;
        bool tt_one = false;
        tt->add_option("--n", tt_n, "sample size (summary form)");
        tt->add_option("--mean", tt_mean, "sample mean (summary form)");
        tt->add_option("--sd", tt_sd, "sample sd (summary form)");
        tt->add_option("--samples-file", tt_samples_file, "one sample value per line");
        tt->add_option("--mu0", tt_mu0, "null-hypothesis mean")->required();
        tt->add_flag("--one-tailed", tt_one, "one-tailed (mean greater)");
        tt->add_option("--out", tt_out, "write StatResult JSON (suffix .stat.json)");
        tt->callback([&] {
            stats::StatResult r;
            if (!tt_samples_file.empty()) {
                std::ifstream in(tt_samples_file);
                if (!in) throw ValidationError("cannot open: " + tt_samples_file);
                std::vector<double> samples;
                double v;
                while (in >> v) samples.push_back(v);
                r = stats::one_sample_t(samples, tt_mu0, tail_flag(tt_one));
            } else {
                if (tt_n == 0) throw ValidationError("ttest: pass --samples-file or --n/--mean/--sd");
                r = stats::one_sample_t_summary(tt_n, tt_mean, tt_sd, tt_mu0, tail_flag(tt_one));
            }
            print_stat(r, tt_out, json{{"test", "ttest"}, {"mu0", tt_mu0}, {"one_tailed", tt_one}});
        });

        auto* pw = stats_cmd->add_subcommand("power", "post-hoc power: p1 p2 n alpha");
        std::vector<double> pw_args;
        bool pw_one = false, pw_no_cc = false;
        pw->add_option("args", pw_args, "p1 p2 n_per_group alpha")->expected(4);
        pw->add_flag("--one-tailed", pw_one, "one-tailed");
        pw->add_flag("--no-continuity", pw_no_cc, "drop the continuity correction");
        pw->callback([&] {
            const double power = stats::power_two_proportion(
                pw_args[0], pw_args[1], static_cast<std::uint64_t>(pw_args[2]), pw_args[3],
                tail_flag(pw_one), !pw_no_cc);
            json j;
            j["power"] = power;
            std::cout << j.dump(2) << "\n";
        });

        // ------------------------------------------------------------------- sae
        auto* sae_cmd = app.add_subcommand("sae", "SAE validation and feature analysis");
        sae_cmd->require_subcommand(1);

        auto* sv = sae_cmd->add_subcommand("validate", "reconstruction stats on an ACTV file");
        std::string sv_acts, sv_sae, sv_out;
        std::size_t sv_analytic = 0;
        double sv_eps = 0.0;
        sv->add_option("--acts", sv_acts, "ACTV activations")->required();
        sv->add_option("--sae", sv_sae, "SAE manifest JSON");
        sv->add_option("--analytic", sv_analytic,
                       "use the signed-basis analytic SAE of this hidden width");
        sv->add_option("--l0-eps", sv_eps, "L0 activation threshold (default 0)");
        sv->add_option("--out", sv_out, "write ReconStats JSON");
        sv->callback([&] {
            if (sv_sae.empty() == (sv_analytic == 0)) {
                throw ValidationError("sae validate: pass exactly one of --sae or --analytic");
            }
            const auto acts = records::read_activation_matrix(sv_acts);
            const auto sw = sv_sae.empty() ? sae::make_signed_basis_sae(sv_analytic)
                                           : sae::load_sae(sv_sae);
            const auto st = sae::reconstruction_stats(acts, sw, sv_eps);
            std::cout << sae::recon_stats_to_json(st);
            if (!sv_out.empty()) {
                write_text(sv_out, sae::recon_stats_to_json(st));
                emit_manifest(sv_out, {"sae",
                                       json{{"mode", "validate"}, {"acts", sv_acts},
                                            {"sae", sv_sae}, {"l0_eps", sv_eps}},
                                       {},
                                       {sv_out}});
            }
        });

        auto* sd = sae_cmd->add_subcommand("delta", "feature deltas between two ACTV files");
        std::string sd_orig, sd_para, sd_sae, sd_out;
        std::size_t sd_topk = 10, sd_analytic = 0;
        sd->add_option("--orig", sd_orig, "original activations (ACTV)")->required();
        sd->add_option("--para", sd_para, "paraphrase activations (ACTV)")->required();
        sd->add_option("--sae", sd_sae, "SAE manifest JSON");
        sd->add_option("--analytic", sd_analytic,
                       "use the signed-basis analytic SAE of this hidden width");
        sd->add_option("--top-k", sd_topk, "entries per row (default 10)");
        sd->add_option("--out", sd_out, "write deltas JSONL");
        sd->callback([&] {
            if (sd_sae.empty() == (sd_analytic == 0)) {
                throw ValidationError("sae delta: pass exactly one of --sae or --analytic");
            }
            const auto ao = records::read_activation_matrix(sd_orig);
            const auto ap = records::read_activation_matrix(sd_para);
            if (ao.rows != ap.rows || ao.cols != ap.cols) {
                throw ValidationError("delta: activation files disagree in shape");
            }
            const auto sw = sd_sae.empty() ? sae::make_signed_basis_sae(sd_analytic)
                                           : sae::load_sae(sd_sae);
            json out_rows = json::array();
            for (std::size_t r = 0; r < ao.rows; ++r) {
                const auto d = sae::feature_delta(ao.row(r), ap.row(r), sw, sd_topk,
                                                  "row-" + std::to_string(r));
                json row;
                row["pair_id"] = d.pair_id;
                json topk = json::array();
                for (const auto& [fid, delta] : d.top_k) topk.push_back({fid, delta});
                row["top_k"] = topk;
                out_rows.push_back(std::move(row));
            }
            std::cout << out_rows.dump(2) << "\n";
            if (!sd_out.empty()) {
                write_text(sd_out, out_rows.dump(2) + "\n");
                emit_manifest(sd_out, {"sae",
                                       json{{"mode", "delta"}, {"orig", sd_orig},
                                            {"para", sd_para}, {"sae", sd_sae},
                                            {"top_k", sd_topk}},
                                       {},
                                       {sd_out}});
            }
        });

        auto* sg = sae_cmd->add_subcommand("grid", "per-category activation summary");
        std::string sg_input, sg_out;
        sg->add_option("--input", sg_input, "JSON of {category: [values...]}")->required();
        sg->add_option("--out", sg_out, "write summary JSON");
        sg->callback([&] {
            const json in = load_json_file(sg_input);
            std::map<std::string, std::vector<double>> cats;
            for (auto it = in.begin(); it != in.end(); ++it) {
                cats[it.key()] = it.value().get<std::vector<double>>();
            }
            const auto g = sae::prompt_grid_summary(cats);
            std::cout << sae::grid_summary_to_markdown(g);
            if (!sg_out.empty()) {
                write_text(sg_out, sae::grid_summary_to_json(g));
                emit_manifest(sg_out, {"sae", json{{"mode", "grid"}, {"input", sg_input}}, {},
                                       {sg_out}});
            }
        });

        // ------------------------------------------------------------------- toy
        auto* toy_cmd = app.add_subcommand("toy", "Deterministic toy model and datasets");
        toy_cmd->require_subcommand(1);

        auto* tb = toy_cmd->add_subcommand("build", "write a toy model config");
        toymodel::ToyConfig tb_cfg;
        std::string tb_config_in, tb_out = "toy_model.json";
        auto* tb_hidden = tb->add_option("--hidden-dim", tb_cfg.hidden_dim);
        auto* tb_layers = tb->add_option("--n-layers", tb_cfg.n_layers);
        auto* tb_reg = tb->add_option("--register-channel", tb_cfg.register_channel);
        auto* tb_gain = tb->add_option("--register-gain", tb_cfg.register_gain);
        auto* tb_hw = tb->add_option("--head-register-weight", tb_cfg.head_register_weight);
        auto* tb_noise = tb->add_option("--noise-sd", tb_cfg.noise_sd);
        auto* tb_seed = tb->add_option("--seed", tb_cfg.seed);
        tb->add_option("--config", tb_config_in, "JSON config file (flags override)");
        tb->add_option("--out", tb_out, "output config path");
        tb->callback([&] {
            if (!tb_config_in.empty()) {
                const json cfg = load_json_file(tb_config_in);
                overlay(cfg, "hidden_dim", tb_hidden, tb_cfg.hidden_dim);
                overlay(cfg, "n_layers", tb_layers, tb_cfg.n_layers);
                overlay(cfg, "register_channel", tb_reg, tb_cfg.register_channel);
                overlay(cfg, "register_gain", tb_gain, tb_cfg.register_gain);
                overlay(cfg, "head_register_weight", tb_hw, tb_cfg.head_register_weight);
                overlay(cfg, "noise_sd", tb_noise, tb_cfg.noise_sd);
                overlay(cfg, "seed", tb_seed, tb_cfg.seed);
            }
            tb_cfg.validate();
            // Construction doubles as validation of determinism-critical dims.
            toymodel::build_toy_model(tb_cfg);
            write_text(tb_out, toy_config_to_json(tb_cfg).dump(2) + "\n");
            std::cout << "wrote " << tb_out << "\n";
            emit_manifest(tb_out, {"toy", json{{"mode", "build"}, {"config", toy_config_to_json(tb_cfg)}},
                                   {{"model", tb_cfg.seed}},
                                   {tb_out}});
        });

        auto* tg = toy_cmd->add_subcommand("gen", "generate train/eval datasets");
        std::string tg_config, tg_out_train = "toy_train.jsonl", tg_out_eval = "toy_eval.jsonl";
        std::size_t tg_ntrain = 200, tg_neval = 158;
        std::uint64_t tg_seed = 7;
        tg->add_option("--toy-config", tg_config, "toy model config JSON")->required();
        tg->add_option("--n-train", tg_ntrain, "training pairs (default 200)");
        tg->add_option("--n-eval", tg_neval, "eval pairs (default 158)");
        tg->add_option("--seed", tg_seed, "dataset seed (default 7)");
        tg->add_option("--out-train", tg_out_train, "train JSONL path");
        tg->add_option("--out-eval", tg_out_eval, "eval JSONL path");
        tg->callback([&] {
            const auto cfg = load_toy_config(tg_config);
            const auto ds = toymodel::generate_dataset(cfg, tg_ntrain, tg_neval, tg_seed);
            toymodel::save_dataset(tg_out_train, ds.train);
            toymodel::save_dataset(tg_out_eval, ds.eval);
            std::cout << "wrote " << tg_out_train << " (" << ds.train.size() << ") and "
                      << tg_out_eval << " (" << ds.eval.size() << ")\n";
            emit_manifest(tg_out_eval, {"toy",
                                        json{{"mode", "gen"}, {"toy_config", tg_config},
                                             {"n_train", tg_ntrain}, {"n_eval", tg_neval}},
                                        {{"dataset", tg_seed}, {"model", cfg.seed}},
                                        {tg_out_train, tg_out_eval}});
        });

        auto* tx = toy_cmd->add_subcommand("export-acts", "write per-layer residuals as ACTV");
        std::string tx_config, tx_dataset, tx_adapters, tx_out_orig = "acts_orig.actv",
                                                        tx_out_para = "acts_para.actv";
        std::size_t tx_layer = 0;
        tx->add_option("--toy-config", tx_config, "toy model config JSON")->required();
        tx->add_option("--dataset", tx_dataset, "dataset JSONL")->required();
        tx->add_option("--layer", tx_layer, "residual index (0 = embedding output)")->required();
        tx->add_option("--adapters", tx_adapters, "adapter manifest (optional)");
        tx->add_option("--out-orig", tx_out_orig, "ACTV for original questions");
        tx->add_option("--out-para", tx_out_para, "ACTV for paraphrases");
        tx->callback([&] {
            const auto cfg = load_toy_config(tx_config);
            const auto model = toymodel::build_toy_model(cfg);
            const auto examples = toymodel::load_dataset(tx_dataset);
            std::optional<lora::LoraAdapterSet> adapters;
            if (!tx_adapters.empty()) adapters = lora::load_adapters(tx_adapters);
            if (tx_layer > cfg.n_layers) throw ValidationError("export-acts: layer out of range");

            std::vector<Vec> rows_orig(examples.size()), rows_para(examples.size());
            parallel_for(examples.size(), [&](std::size_t i) {
                const auto& ex = examples[i];
                const auto to_ = toymodel::forward(model, ex.image_feat, ex.question_orig,
                                                   adapters ? &*adapters : nullptr);
                const auto tp_ = toymodel::forward(model, ex.image_feat, ex.question_para,
                                                   adapters ? &*adapters : nullptr);
                rows_orig[i] = to_.residuals[tx_layer];
                rows_para[i] = tp_.residuals[tx_layer];
            });
            records::write_activation_matrix(
                tx_out_orig, records::to_activation_matrix(rows_orig, static_cast<int>(tx_layer)));
            records::write_activation_matrix(
                tx_out_para, records::to_activation_matrix(rows_para, static_cast<int>(tx_layer)));
            std::cout << "wrote " << tx_out_orig << " and " << tx_out_para << " ("
                      << examples.size() << " rows)\n";
            emit_manifest(tx_out_orig, {"toy",
                                        json{{"mode", "export-acts"}, {"toy_config", tx_config},
                                             {"dataset", tx_dataset}, {"layer", tx_layer},
                                             {"adapters", tx_adapters}},
                                        {{"model", cfg.seed}},
                                        {tx_out_orig, tx_out_para}});
        });

        auto* te = toy_cmd->add_subcommand("eval", "forward passes to EvalRecord JSONL");
        std::string te_config, te_dataset, te_adapters, te_out = "toy_records.jsonl",
                                                        te_report;
        te->add_option("--toy-config", te_config, "toy model config JSON")->required();
        te->add_option("--dataset", te_dataset, "dataset JSONL")->required();
        te->add_option("--adapters", te_adapters, "adapter manifest (optional)");
        te->add_option("--out", te_out, "EvalRecord JSONL path");
        te->add_option("--report", te_report, "also write ConsistencyReport JSON (suffix .report.json)");
        te->callback([&] {
            const auto cfg = load_toy_config(te_config);
            const auto model = toymodel::build_toy_model(cfg);
            const auto examples = toymodel::load_dataset(te_dataset);
            std::optional<lora::LoraAdapterSet> adapters;
            if (!te_adapters.empty()) adapters = lora::load_adapters(te_adapters);
            const auto recs = toymodel::examples_to_eval_records(model, examples,
                                                                 adapters ? &*adapters : nullptr);
            records::save_records(te_out, recs);
            std::vector<std::string> artifacts{te_out};
            const auto rep = metrics::evaluate(recs);
            std::cout << metrics::report_to_markdown(rep);
            if (!te_report.empty()) {
                write_text(te_report, metrics::report_to_json(rep));
                artifacts.push_back(te_report);
            }
            emit_manifest(te_out, {"eval",
                                   json{{"mode", "toy-eval"}, {"toy_config", te_config},
                                        {"dataset", te_dataset}, {"adapters", te_adapters}},
                                   {{"model", cfg.seed}},
                                   artifacts});
        });

        // ----------------------------------------------------------------- train
        auto* train_cmd = app.add_subcommand("train", "LoRA training");
        auto* tl = train_cmd->add_subcommand("lora", "train adapters with the combined loss");
        std::string tl_config, tl_train, tl_eval, tl_out = "adapters.json",
                                                  tl_log = "train.trainlog.jsonl", tl_report;
        lora::LoraConfig tl_lcfg;
        lora::TrainConfig tl_tcfg;
        std::string tl_layers = "all", tl_modules = "mixer,gate,up,down";
        tl->add_option("--toy-config", tl_config, "toy model config JSON")->required();
        tl->add_option("--train", tl_train, "training dataset JSONL")->required();
        tl->add_option("--eval", tl_eval, "eval dataset JSONL")->required();
        tl->add_option("--lambda", tl_tcfg.lambda, "accuracy loss weight (default 1.0)");
        tl->add_option("--layers", tl_layers, "target layers, e.g. 0-2 or 1,3 or 'all'");
        tl->add_option("--modules", tl_modules, "target modules (default mixer,gate,up,down)");
        tl->add_option("--rank", tl_lcfg.rank, "LoRA rank (default 16)");
        tl->add_option("--alpha", tl_lcfg.alpha, "LoRA alpha (default 32)");
        tl->add_option("--dropout", tl_lcfg.dropout, "adapter input dropout (default 0.05)");
        tl->add_option("--lr", tl_tcfg.learning_rate, "learning rate (default 2e-4)");
        tl->add_option("--warmup", tl_tcfg.warmup_steps, "linear warmup steps (default 100)");
        tl->add_option("--batch", tl_tcfg.effective_batch, "effective batch size (default 8)");
        tl->add_option("--epochs", tl_tcfg.epochs, "epochs (default 3)");
        tl->add_option("--weight-decay", tl_tcfg.weight_decay, "AdamW weight decay (default 0.01)");
        tl->add_option("--seed", tl_tcfg.seed, "training seed");
        std::uint64_t tl_adapter_seed = 99;
        tl->add_option("--adapter-seed", tl_adapter_seed, "adapter init seed (default 99)");
        tl->add_option("--out", tl_out, "adapter manifest path");
        tl->add_option("--log", tl_log, "train log JSONL path");
        tl->add_option("--report", tl_report, "final eval report JSON (suffix .report.json)");
        tl->callback([&] {
            const auto cfg = load_toy_config(tl_config);
            const auto model = toymodel::build_toy_model(cfg);
            const auto train_set = toymodel::load_dataset(tl_train);
            const auto eval_set = toymodel::load_dataset(tl_eval);

            if (tl_layers == "all") {
                for (std::size_t i = 0; i < cfg.n_layers; ++i) tl_lcfg.target_layers.insert(i);
            } else {
                tl_lcfg.target_layers = parse_index_list(tl_layers);
            }
            tl_lcfg.target_modules = parse_modules(tl_modules);
            tl_lcfg.seed = tl_adapter_seed;

            auto adapters = lora::init_adapters(model, tl_lcfg);
            auto [trained, log] = lora::train(model, std::move(adapters), train_set, eval_set,
                                              tl_tcfg);

            lora::save_adapters(tl_out, trained);
            lora::save_train_log(tl_log, log);
            std::cout << metrics::report_to_markdown(log.final_eval);
            std::cout << "collapse flag: " << (log.collapse_flag ? "true" : "false")
                      << " (majority fraction " << log.collapse_majority_fraction << ")\n";

            std::vector<std::string> artifacts{tl_out, tl_log};
            if (!tl_report.empty()) {
                write_text(tl_report, metrics::report_to_json(log.final_eval));
                artifacts.push_back(tl_report);
            }
            json snapshot;
            snapshot["toy_config"] = tl_config;
            snapshot["train"] = tl_train;
            snapshot["eval"] = tl_eval;
            snapshot["lambda"] = tl_tcfg.lambda;
            snapshot["rank"] = tl_lcfg.rank;
            snapshot["alpha"] = tl_lcfg.alpha;
            snapshot["dropout"] = tl_lcfg.dropout;
            snapshot["layers"] = tl_layers;
            snapshot["modules"] = tl_modules;
            snapshot["lr"] = tl_tcfg.learning_rate;
            snapshot["warmup"] = tl_tcfg.warmup_steps;
            snapshot["batch"] = tl_tcfg.effective_batch;
            snapshot["epochs"] = tl_tcfg.epochs;
            snapshot["weight_decay"] = tl_tcfg.weight_decay;
            emit_manifest(tl_out, {"train", snapshot,
                                   {{"train", tl_tcfg.seed}, {"model", cfg.seed}},
                                   artifacts});
        });

        // ----------------------------------------------------------------- patch
        auto* patch_cmd = app.add_subcommand("patch", "activation patching on a toy pair");
        std::string pa_config, pa_dataset, pa_sae, pa_features, pa_out;
        std::size_t pa_index = 0, pa_layer = 0, pa_controls = 0, pa_pool = 0;
        std::uint64_t pa_seed = 11;
        patch_cmd->add_option("--toy-config", pa_config, "toy model config JSON")->required();
        patch_cmd->add_option("--dataset", pa_dataset, "dataset JSONL")->required();
        patch_cmd->add_option("--pair-index", pa_index, "example index (default 0)");
        patch_cmd->add_option("--layer", pa_layer, "residual index to patch")->required();
        patch_cmd->add_option("--features", pa_features, "feature ids, e.g. 7,39")->required();
        patch_cmd->add_option("--sae", pa_sae, "SAE manifest (default: analytic signed basis)");
        patch_cmd->add_option("--controls", pa_controls, "also run N random low-delta controls");
        patch_cmd->add_option("--control-pool", pa_pool,
                              "low-|delta| pool size (default feature_count/10)");
        patch_cmd->add_option("--seed", pa_seed, "control sampling seed");
        patch_cmd->add_option("--out", pa_out, "write result JSON");
        patch_cmd->callback([&] {
            const auto cfg = load_toy_config(pa_config);
            const auto model = toymodel::build_toy_model(cfg);
            const auto examples = toymodel::load_dataset(pa_dataset);
            if (pa_index >= examples.size()) throw ValidationError("pair index out of range");
            const auto& ex = examples[pa_index];

            const sae::SaeWeights sw = pa_sae.empty()
                                           ? sae::make_signed_basis_sae(cfg.hidden_dim)
                                           : sae::load_sae(pa_sae);

            patching::PatchSpec spec;
            spec.layer = pa_layer;
            spec.feature_ids = parse_index_list(pa_features);
            const patching::PatchInput in_orig{ex.image_feat, ex.question_orig};
            const patching::PatchInput in_para{ex.image_feat, ex.question_para};
            const auto result = patching::patch_margin(model, sw, spec, in_orig, in_para);

            json out = json::parse(patching::patch_result_to_json(result));
            if (pa_controls > 0) {
                const std::size_t pool = pa_pool ? pa_pool : std::max<std::size_t>(
                                                                 sw.feature_count / 10, pa_controls);
                const auto ctrl = patching::control_patch_baseline(
                    model, sw, pa_layer, pool, pa_controls, pa_seed, in_orig, in_para);
                out["control_mean_recovery"] = ctrl.mean_recovery;
                out["control_features"] = ctrl.feature_ids;
            }
            std::cout << out.dump(2) << "\n";
            if (!pa_out.empty()) {
                write_text(pa_out, out.dump(2) + "\n");
                emit_manifest(pa_out, {"patch",
                                       json{{"toy_config", pa_config}, {"dataset", pa_dataset},
                                            {"pair_index", pa_index}, {"layer", pa_layer},
                                            {"features", pa_features}, {"controls", pa_controls}},
                                       {{"controls", pa_seed}, {"model", cfg.seed}},
                                       {pa_out}});
            }
        });

        // ---------------------------------------------------------------- ablate
        auto* ab_cmd = app.add_subcommand("ablate", "layer-range ablation");
        std::string ab_config, ab_train, ab_eval, ab_out = "ablation.json";
        std::vector<std::string> ab_ranges;
        lora::LoraConfig ab_lcfg;
        lora::TrainConfig ab_tcfg;
        ab_cmd->add_option("--toy-config", ab_config, "toy model config JSON")->required();
        ab_cmd->add_option("--train", ab_train, "training dataset JSONL")->required();
        ab_cmd->add_option("--eval", ab_eval, "eval dataset JSONL")->required();
        ab_cmd->add_option("--range", ab_ranges,
                           "named range, e.g. early=0-2 (repeatable; default toy ranges)");
        ab_cmd->add_option("--rank", ab_lcfg.rank, "LoRA rank");
        ab_cmd->add_option("--alpha", ab_lcfg.alpha, "LoRA alpha");
        ab_cmd->add_option("--dropout", ab_lcfg.dropout, "adapter dropout");
        ab_cmd->add_option("--lambda", ab_tcfg.lambda, "accuracy loss weight");
        ab_cmd->add_option("--lr", ab_tcfg.learning_rate, "learning rate");
        ab_cmd->add_option("--warmup", ab_tcfg.warmup_steps, "warmup steps");
        ab_cmd->add_option("--batch", ab_tcfg.effective_batch, "effective batch");
        ab_cmd->add_option("--epochs", ab_tcfg.epochs, "epochs");
        ab_cmd->add_option("--seed", ab_tcfg.seed, "training seed");
        std::uint64_t ab_adapter_seed = 99;
        ab_cmd->add_option("--adapter-seed", ab_adapter_seed, "adapter init seed (default 99)");
        ab_cmd->add_option("--out", ab_out, "output JSON (suffix .ablation.json)");
        ab_cmd->callback([&] {
            const auto cfg = load_toy_config(ab_config);
            const auto model = toymodel::build_toy_model(cfg);
            const auto train_set = toymodel::load_dataset(ab_train);
            const auto eval_set = toymodel::load_dataset(ab_eval);

            std::vector<lora::AblationRange> ranges;
            if (ab_ranges.empty()) {
                const std::size_t L = cfg.n_layers;
                const auto span = [](std::size_t lo, std::size_t hi) {
                    std::set<std::size_t> s;
                    for (std::size_t i = lo; i <= hi; ++i) s.insert(i);
                    return s;
                };
                ranges.push_back({"early", span(0, L / 3 - 1)});
                ranges.push_back({"middle", span(L / 3, 2 * L / 3 - 1)});
                ranges.push_back({"late", span(2 * L / 3, L - 1)});
                ranges.push_back({"all", span(0, L - 1)});
                auto rng = seeded_stream(ab_tcfg.seed, "ablate:random-range");
                std::set<std::size_t> random_layers;
                while (random_layers.size() < std::max<std::size_t>(2, L / 4)) {
                    random_layers.insert(static_cast<std::size_t>(rng.below(L)));
                }
                ranges.push_back({"random", random_layers});
            } else {
                for (const auto& spec : ab_ranges) {
                    const auto eq = spec.find('=');
                    if (eq == std::string::npos) {
                        throw ValidationError("bad --range (want name=indices): " + spec);
                    }
                    ranges.push_back({spec.substr(0, eq), parse_index_list(spec.substr(eq + 1))});
                }
            }

            ab_lcfg.target_layers = {0};  // placeholder; ablate_layers overrides per range
            ab_lcfg.seed = ab_adapter_seed;
            const auto rows = lora::ablate_layers(model, train_set, eval_set, ranges, ab_lcfg,
                                                  ab_tcfg);
            std::cout << lora::ablation_to_markdown(rows);
            write_text(ab_out, lora::ablation_to_json(rows));
            emit_manifest(ab_out, {"ablate",
                                   json{{"toy_config", ab_config}, {"train", ab_train},
                                        {"eval", ab_eval}, {"rank", ab_lcfg.rank},
                                        {"epochs", ab_tcfg.epochs}, {"lr", ab_tcfg.learning_rate}},
                                   {{"train", ab_tcfg.seed}, {"model", cfg.seed}},
                                   {ab_out}});
        });

        // ---------------------------------------------------------------- report
        auto* rp_cmd = app.add_subcommand("report", "assemble audit tables from run manifests");
        std::vector<std::string> rp_manifests;
        std::string rp_out;
        bool rp_no_ts = false;
        rp_cmd->add_option("--manifests", rp_manifests, "manifest paths in column order")
            ->required();
        rp_cmd->add_option("--out", rp_out, "write markdown");
        rp_cmd->add_flag("--no-timestamp", rp_no_ts, "omit the generated-at line");
        rp_cmd->callback([&] {
            const std::string doc = report::assemble(rp_manifests, !rp_no_ts);
            std::cout << doc;
            if (!rp_out.empty()) write_text(rp_out, doc);
        });

        app.parse(argc, argv);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}
