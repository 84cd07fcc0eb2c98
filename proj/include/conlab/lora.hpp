#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "conlab/common.hpp"
#include "conlab/metrics.hpp"
#include "conlab/toymodel.hpp"

namespace conlab::lora {

using AdapterKey = std::pair<std::size_t, toymodel::TargetModule>;

// One low-rank pair; the effective weight delta is (alpha/rank) * b * a.
struct AdapterPair {
    Mat a;  // rank x in_dim
    Mat b;  // out_dim x rank
};

struct LoraConfig {
    std::size_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.05;
    std::set<std::size_t> target_layers;
    std::set<toymodel::TargetModule> target_modules = {
        toymodel::TargetModule::Mixer, toymodel::TargetModule::Gate,
        toymodel::TargetModule::Up, toymodel::TargetModule::Down};
    std::uint64_t seed = 0;

    void validate() const;
};

struct LoraAdapterSet {
    LoraConfig config;
    std::map<AdapterKey, AdapterPair> entries;

    double scale() const { return config.alpha / static_cast<double>(config.rank); }
    std::size_t trainable_param_count() const;
    const AdapterPair* find(std::size_t layer, toymodel::TargetModule m) const;
};

// Gradient accumulator with the same keyed shapes as the adapter set.
struct AdapterGrads {
    std::map<AdapterKey, AdapterPair> entries;

    static AdapterGrads zeros_like(const LoraAdapterSet& adapters);
    void accumulate(const AdapterGrads& other, double scale = 1.0);
    void scale_all(double s);
};

struct TrainConfig {
    double learning_rate = 2e-4;
    std::size_t warmup_steps = 100;
    std::size_t effective_batch = 8;
    std::size_t epochs = 3;
    double weight_decay = 0.01;
    double lambda = 1.0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

struct TrainStepLog {
    std::size_t step = 0;  // 1-based
    double l_cons = 0.0;
    double l_acc = 0.0;
    double l_total = 0.0;
    double train_accuracy = 0.0;  // batch accuracy, original phrasing
    double lr = 0.0;
};

struct TrainLog {
    std::vector<TrainStepLog> steps;
    double initial_train_l_cons = 0.0;  // full training set, before the first step
    double final_train_l_cons = 0.0;    // full training set, after the last step
    metrics::ConsistencyReport final_eval;
    bool collapse_flag = false;
    double collapse_majority_fraction = 0.0;
};

struct CollapseResult {
    bool flag = false;
    double majority_fraction = 0.0;
};

// A ~ small Gaussian (seeded), B = 0, so fresh adapters are an exact no-op.
LoraAdapterSet init_adapters(const toymodel::ToyModel& model, const LoraConfig& config);

// AdamW (beta1=0.9, beta2=0.999, eps=1e-8, decoupled weight decay) over
// adapter parameters only; linear warmup then constant lr; micro-batches
// accumulated in fixed order. Deterministic given seeds.
std::pair<LoraAdapterSet, TrainLog> train(const toymodel::ToyModel& model,
                                          LoraAdapterSet adapters,
                                          const std::vector<toymodel::ToyExample>& train_set,
                                          const std::vector<toymodel::ToyExample>& eval_set,
                                          const TrainConfig& tconfig);

// flag <=> the majority class fraction reaches `threshold` (inclusive).
CollapseResult detect_mode_collapse(const std::vector<records::Label>& predictions,
                                    double threshold = 0.95);

struct AblationRange {
    std::string name;
    std::set<std::size_t> layers;
};

struct AblationRow {
    std::string name;
    double mean_margin_diff = 0.0;
    std::optional<double> reduction_percent;  // vs baseline; absent for the baseline row
    std::size_t param_count = 0;
};

// Trains fresh adapters per range from the same seeds; first row is the
// no-adapter baseline.
std::vector<AblationRow> ablate_layers(const toymodel::ToyModel& model,
                                       const std::vector<toymodel::ToyExample>& train_set,
                                       const std::vector<toymodel::ToyExample>& eval_set,
                                       const std::vector<AblationRange>& ranges,
                                       const LoraConfig& lconfig_base,
                                       const TrainConfig& tconfig);

void save_adapters(const std::string& manifest_path, const LoraAdapterSet& adapters);
LoraAdapterSet load_adapters(const std::string& manifest_path);

void save_train_log(const std::string& path, const TrainLog& log);  // JSONL
std::string ablation_to_json(const std::vector<AblationRow>& rows);
std::string ablation_to_markdown(const std::vector<AblationRow>& rows);

}  // namespace conlab::lora
