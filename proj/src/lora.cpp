#include "conlab/lora.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

using nlohmann::json;

namespace conlab::lora {

void LoraConfig::validate() const {
    if (rank < 1) throw ValidationError("lora config: rank must be >= 1");
    if (!(alpha > 0.0)) throw ValidationError("lora config: alpha must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("lora config: dropout in [0,1)");
    if (target_layers.empty()) throw ValidationError("lora config: target_layers empty");
    if (target_modules.empty()) throw ValidationError("lora config: target_modules empty");
}

std::size_t LoraAdapterSet::trainable_param_count() const {
    std::size_t n = 0;
    for (const auto& [key, pair] : entries) {
        (void)key;
        n += pair.a.data.size() + pair.b.data.size();
    }
    return n;
}

const AdapterPair* LoraAdapterSet::find(std::size_t layer, toymodel::TargetModule m) const {
    const auto it = entries.find({layer, m});
    return it == entries.end() ? nullptr : &it->second;
}

AdapterGrads AdapterGrads::zeros_like(const LoraAdapterSet& adapters) {
    AdapterGrads g;
    for (const auto& [key, pair] : adapters.entries) {
        AdapterPair z;
        z.a = Mat(pair.a.rows, pair.a.cols);
        z.b = Mat(pair.b.rows, pair.b.cols);
        g.entries.emplace(key, std::move(z));
    }
    return g;
}

void AdapterGrads::accumulate(const AdapterGrads& other, double scale) {
    for (auto& [key, pair] : entries) {
        const auto it = other.entries.find(key);
        if (it == other.entries.end()) throw ValidationError("adapter grads: key mismatch");
        for (std::size_t i = 0; i < pair.a.data.size(); ++i) pair.a.data[i] += scale * it->second.a.data[i];
        for (std::size_t i = 0; i < pair.b.data.size(); ++i) pair.b.data[i] += scale * it->second.b.data[i];
    }
}

void AdapterGrads::scale_all(double s) {
    for (auto& [key, pair] : entries) {
        (void)key;
        for (double& v : pair.a.data) v *= s;
        for (double& v : pair.b.data) v *= s;
    }
}

LoraAdapterSet init_adapters(const toymodel::ToyModel& model, const LoraConfig& config) {
    config.validate();
    for (std::size_t layer : config.target_layers) {
        if (layer >= model.config.n_layers) {
            throw ValidationError("lora: target layer " + std::to_string(layer) +
                                  " out of range for depth " + std::to_string(model.config.n_layers));
        }
    }

    const std::size_t h = model.config.hidden_dim;
    LoraAdapterSet set;
    set.config = config;
    for (std::size_t layer : config.target_layers) {
        for (toymodel::TargetModule m : config.target_modules) {
            AdapterPair pair;
            pair.a = Mat(config.rank, h);
            pair.b = Mat(h, config.rank);  // zero init: adapters start as a no-op
            auto rng = seeded_stream(config.seed,
                                     "lora:A:" + std::to_string(layer) + ":" +
                                         toymodel::module_name(m));
            const double sd = 1.0 / std::sqrt(static_cast<double>(h));
            for (double& v : pair.a.data) v = sd * rng.normal();
            set.entries.emplace(AdapterKey{layer, m}, std::move(pair));
        }
    }
    return set;
}

CollapseResult detect_mode_collapse(const std::vector<records::Label>& predictions,
                                    double threshold) {
    if (predictions.empty()) throw ValidationError("detect_mode_collapse: no predictions");
    if (!(threshold > 0.5 && threshold <= 1.0)) {
        throw ValidationError("detect_mode_collapse: threshold must lie in (0.5, 1]");
    }
    std::size_t yes = 0, no = 0;
    for (const auto l : predictions) {
        if (l == records::Label::Yes) ++yes;
        else if (l == records::Label::No) ++no;
        else throw ValidationError("detect_mode_collapse: predictions must be Yes or No");
    }
    CollapseResult r;
    r.majority_fraction =
        static_cast<double>(std::max(yes, no)) / static_cast<double>(predictions.size());
    r.flag = r.majority_fraction >= threshold;
    return r;
}

namespace {

// AdamW moment constants (unstated upstream; standard defaults pinned).
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;
constexpr std::size_t kMicroBatch = 4;

struct AdamState {
    AdapterGrads m;
    AdapterGrads v;
    std::size_t t = 0;
};

double warmup_lr(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps == 0) return cfg.learning_rate;
    const double f = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.learning_rate * std::min(1.0, f);
}

void adamw_step(LoraAdapterSet& adapters, const AdapterGrads& grads, AdamState& st,
                double lr, double weight_decay) {
    ++st.t;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.t));

    for (auto& [key, pair] : adapters.entries) {
        const AdapterPair& g = grads.entries.at(key);
        AdapterPair& m = st.m.entries.at(key);
        AdapterPair& v = st.v.entries.at(key);

        const auto update = [&](std::vector<double>& p, const std::vector<double>& gd,
                                std::vector<double>& mv, std::vector<double>& vv) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                mv[i] = kBeta1 * mv[i] + (1.0 - kBeta1) * gd[i];
                vv[i] = kBeta2 * vv[i] + (1.0 - kBeta2) * gd[i] * gd[i];
                const double mhat = mv[i] / bc1;
                const double vhat = vv[i] / bc2;
                p[i] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay * p[i]);
            }
        };
        update(pair.a.data, g.a.data, m.a.data, v.a.data);
        update(pair.b.data, g.b.data, m.b.data, v.b.data);
    }
}

double batch_accuracy(const toymodel::ToyModel& model, const LoraAdapterSet& adapters,
                      const std::vector<toymodel::ToyExample>& batch) {
    std::size_t correct = 0;
    for (const auto& ex : batch) {
        const auto t = toymodel::forward(model, ex.image_feat, ex.question_orig, &adapters);
        const bool pred_yes = t.margin() >= 0.0;
        const bool truth_yes = ex.finding_label == records::GroundTruth::Yes;
        if (pred_yes == truth_yes) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

}  // namespace

std::pair<LoraAdapterSet, TrainLog> train(const toymodel::ToyModel& model,
                                          LoraAdapterSet adapters,
                                          const std::vector<toymodel::ToyExample>& train_set,
                                          const std::vector<toymodel::ToyExample>& eval_set,
                                          const TrainConfig& tconfig) {
    if (train_set.empty() || eval_set.empty()) throw ValidationError("train: empty split");
    if (tconfig.lambda < 0.0) throw ValidationError("train: lambda must be >= 0");
    if (tconfig.effective_batch == 0) throw ValidationError("train: effective_batch must be > 0");
    {
        std::unordered_set<std::string> train_ids;
        for (const auto& ex : train_set) train_ids.insert(ex.example_id);
        for (const auto& ex : eval_set) {
            if (train_ids.count(ex.example_id)) {
                throw ValidationError("train: splits overlap at '" + ex.example_id + "'");
            }
        }
    }

    TrainLog log;
    log.initial_train_l_cons =
        toymodel::loss_and_grads(model, adapters, train_set, tconfig.lambda, tconfig.temperature,
                                 nullptr)
            .l_cons;

    AdamState st;
    st.m = AdapterGrads::zeros_like(adapters);
    st.v = AdapterGrads::zeros_like(adapters);

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < tconfig.epochs; ++epoch) {
        auto rng = seeded_stream(tconfig.seed, "shuffle:epoch" + std::to_string(epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.below(i));
            std::swap(order[i - 1], order[j]);
        }

        for (std::size_t start = 0; start < order.size(); start += tconfig.effective_batch) {
            const std::size_t end = std::min(order.size(), start + tconfig.effective_batch);
            std::vector<toymodel::ToyExample> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) batch.push_back(train_set[order[i]]);

            ++step;
            const double lr = warmup_lr(tconfig, step);

            // Micro-batches summed in fixed order before one optimizer step.
            AdapterGrads grads = AdapterGrads::zeros_like(adapters);
            double l_cons = 0.0, l_acc = 0.0;
            const double inv_batch = 1.0 / static_cast<double>(batch.size());
            toymodel::DropoutPlan plan{adapters.config.dropout, tconfig.seed, step};
            const toymodel::DropoutPlan* plan_ptr =
                adapters.config.dropout > 0.0 ? &plan : nullptr;
            for (std::size_t mb = 0; mb < batch.size(); mb += kMicroBatch) {
                const std::size_t mb_end = std::min(batch.size(), mb + kMicroBatch);
                const std::vector<toymodel::ToyExample> micro(batch.begin() + mb,
                                                              batch.begin() + mb_end);
                AdapterGrads micro_grads = AdapterGrads::zeros_like(adapters);
                toymodel::LossBreakdown lb;
                try {
                    lb = toymodel::loss_and_grads(model, adapters, micro, tconfig.lambda,
                                                  tconfig.temperature, &micro_grads, plan_ptr);
                } catch (const ValidationError& e) {
                    throw ValidationError("training diverged at step " + std::to_string(step) +
                                          ": " + e.what());
                }
                const double w = static_cast<double>(micro.size()) * inv_batch;
                grads.accumulate(micro_grads, w);
                l_cons += lb.l_cons * w;
                l_acc += lb.l_acc * w;
            }

            adamw_step(adapters, grads, st, lr, tconfig.weight_decay);

            TrainStepLog row;
            row.step = step;
            row.l_cons = l_cons;
            row.l_acc = l_acc;
            row.l_total = l_cons + tconfig.lambda * l_acc;
            row.train_accuracy = batch_accuracy(model, adapters, batch);
            row.lr = lr;
            log.steps.push_back(row);
        }
    }

    log.final_train_l_cons =
        toymodel::loss_and_grads(model, adapters, train_set, tconfig.lambda, tconfig.temperature,
                                 nullptr)
            .l_cons;

    const auto eval_records = toymodel::examples_to_eval_records(model, eval_set, &adapters);
    log.final_eval = metrics::evaluate(eval_records);

    std::vector<records::Label> predictions;
    predictions.reserve(eval_records.size());
    for (const auto& r : eval_records) {
        predictions.push_back(metrics::margin(r.logit_yes_orig, r.logit_no_orig) >= 0.0
                                  ? records::Label::Yes
                                  : records::Label::No);
    }
    const CollapseResult cr = detect_mode_collapse(predictions);
    log.collapse_flag = cr.flag;
    log.collapse_majority_fraction = cr.majority_fraction;

    return {std::move(adapters), std::move(log)};
}

std::vector<AblationRow> ablate_layers(const toymodel::ToyModel& model,
                                       const std::vector<toymodel::ToyExample>& train_set,
                                       const std::vector<toymodel::ToyExample>& eval_set,
                                       const std::vector<AblationRange>& ranges,
                                       const LoraConfig& lconfig_base,
                                       const TrainConfig& tconfig) {
    {
        std::unordered_set<std::string> names;
        for (const auto& r : ranges) {
            if (!names.insert(r.name).second) {
                throw ValidationError("ablate_layers: duplicate range name '" + r.name + "'");
            }
            if (r.layers.empty()) throw ValidationError("ablate_layers: empty range '" + r.name + "'");
        }
    }

    std::vector<AblationRow> rows;
    const auto baseline_records = toymodel::examples_to_eval_records(model, eval_set, nullptr);
    const auto baseline_report = metrics::evaluate(baseline_records);

    AblationRow base;
    base.name = "baseline";
    base.mean_margin_diff = baseline_report.mean_margin_diff;
    base.param_count = 0;
    rows.push_back(base);

    for (const auto& range : ranges) {
        LoraConfig cfg = lconfig_base;
        cfg.target_layers = range.layers;
        auto adapters = init_adapters(model, cfg);
        auto [trained, log] = train(model, std::move(adapters), train_set, eval_set, tconfig);

        AblationRow row;
        row.name = range.name;
        row.mean_margin_diff = log.final_eval.mean_margin_diff;
        row.reduction_percent =
            reduction_percent(base.mean_margin_diff, row.mean_margin_diff);
        row.param_count = trained.trainable_param_count();
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void save_adapters(const std::string& manifest_path, const LoraAdapterSet& adapters) {
    const std::filesystem::path mp(manifest_path);
    const auto dir = mp.parent_path();
    const auto stem = mp.stem().string();

    json entries = json::array();
    for (const auto& [key, pair] : adapters.entries) {
        const std::string tag =
            stem + ".L" + std::to_string(key.first) + "." + toymodel::module_name(key.second);
        const std::string a_name = tag + ".a.actv";
        const std::string b_name = tag + ".b.actv";
        records::write_activation_matrix((dir / a_name).string(),
                                         records::mat_to_activation(pair.a, 0));
        records::write_activation_matrix((dir / b_name).string(),
                                         records::mat_to_activation(pair.b, 0));
        entries.push_back({{"layer", key.first},
                           {"module", toymodel::module_name(key.second)},
                           {"a", a_name},
                           {"b", b_name}});
    }

    json m;
    m["rank"] = adapters.config.rank;
    m["alpha"] = adapters.config.alpha;
    m["dropout"] = adapters.config.dropout;
    m["seed"] = adapters.config.seed;
    m["trainable_param_count"] = adapters.trainable_param_count();
    m["entries"] = entries;
    std::ofstream out(manifest_path);
    if (!out) throw ValidationError("cannot open for writing: " + manifest_path);
    out << m.dump(2) << "\n";
}

LoraAdapterSet load_adapters(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ValidationError("cannot open adapter manifest: " + manifest_path);
    json m;
    try {
        m = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(manifest_path + ": bad JSON: " + e.what());
    }
    const auto dir = std::filesystem::path(manifest_path).parent_path();

    LoraAdapterSet set;
    set.config.rank = m.at("rank").get<std::size_t>();
    set.config.alpha = m.at("alpha").get<double>();
    set.config.dropout = m.at("dropout").get<double>();
    set.config.seed = m.at("seed").get<std::uint64_t>();
    for (const auto& e : m.at("entries")) {
        const std::size_t layer = e.at("layer").get<std::size_t>();
        const auto module = toymodel::module_from_name(e.at("module").get<std::string>());
        AdapterPair pair;
        pair.a = records::activation_to_mat(
            records::read_activation_matrix((dir / e.at("a").get<std::string>()).string()));
        pair.b = records::activation_to_mat(
            records::read_activation_matrix((dir / e.at("b").get<std::string>()).string()));
        set.config.target_layers.insert(layer);
        set.config.target_modules.insert(module);
        set.entries.emplace(AdapterKey{layer, module}, std::move(pair));
    }
    return set;
}

void save_train_log(const std::string& path, const TrainLog& log) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    for (const auto& s : log.steps) {
        json j;
        j["step"] = s.step;
        j["l_cons"] = s.l_cons;
        j["l_acc"] = s.l_acc;
        j["l_total"] = s.l_total;
        j["train_accuracy"] = s.train_accuracy;
        j["lr"] = s.lr;
        out << j.dump() << "\n";
    }
    json fin;
    fin["final"] = {{"initial_train_l_cons", log.initial_train_l_cons},
                    {"final_train_l_cons", log.final_train_l_cons},
                    {"collapse_flag", log.collapse_flag},
                    {"collapse_majority_fraction", log.collapse_majority_fraction},
                    {"eval", json::parse(metrics::report_to_json(log.final_eval))}};
    out << fin.dump() << "\n";
}

std::string ablation_to_json(const std::vector<AblationRow>& rows) {
    json arr = json::array();
    for (const auto& r : rows) {
        json j;
        j["name"] = r.name;
        j["mean_margin_diff"] = r.mean_margin_diff;
        if (r.reduction_percent) j["reduction_percent"] = *r.reduction_percent;
        else j["reduction_percent"] = nullptr;
        j["param_count"] = r.param_count;
        arr.push_back(std::move(j));
    }
    return arr.dump(2) + "\n";
}

std::string ablation_to_markdown(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "| Layers | Margin Diff | Reduction | Params |\n|---|---|---|---|\n";
    os.setf(std::ios::fixed);
    for (const auto& r : rows) {
        os.precision(2);
        os << "| " << r.name << " | " << round_to(r.mean_margin_diff, 2) << " | ";
        if (r.reduction_percent) {
            os.precision(1);
            os << *r.reduction_percent << "%";
        } else {
            os << "N/A";
        }
        os << " | " << r.param_count << " |\n";
    }
    return os.str();
}

}  // namespace conlab::lora
