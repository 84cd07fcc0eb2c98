#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "conlab/common.hpp"
#include "conlab/records.hpp"

namespace conlab::lora {
struct LoraAdapterSet;
struct AdapterGrads;
}  // namespace conlab::lora

namespace conlab::toymodel {

// Modules an adapter can attach to. The dense "mixer" stands in for the
// attention output pathway; gate/up/down are the MLP projections.
enum class TargetModule { Mixer, Gate, Up, Down };

const char* module_name(TargetModule m);
TargetModule module_from_name(const std::string& name);

enum class Register { Presence, Exclusion };

// Question features: which finding is asked about, whether the phrasing is
// presence- or exclusion-framed, and a style vector for surface variation.
struct QFeat {
    std::size_t finding_id = 0;
    Register register_form = Register::Presence;
    Vec style_noise;  // length kStyleDim (empty means all-zero)
};

struct ToyConfig {
    std::size_t hidden_dim = 32;
    std::size_t n_layers = 8;
    std::size_t register_channel = 7;
    double register_gain = 2.0;
    double head_register_weight = 1.5;
    double noise_sd = 0.4;
    std::uint64_t seed = 42;

    void validate() const;
};

// Frozen dataset/model scale constants (tuned once against the baseline
// flip-rate window, then left alone).
inline constexpr std::size_t kImageDim = 16;
inline constexpr std::size_t kStyleDim = 8;
inline constexpr std::size_t kFindingCount = 8;
inline constexpr double kSignalMu = 0.26;     // image evidence magnitude at coordinate 0
inline constexpr double kStyleSd = 0.2;       // style vector scale
inline constexpr double kEvidenceGain = 6.5;  // embed_img plant for the signal coordinate
inline constexpr double kHeadEvidenceWeight = 1.0;

// Channel the image evidence is planted into (distinct from the register
// channel for any hidden_dim >= 8).
std::size_t evidence_channel(const ToyConfig& cfg);

struct ToyBlock {
    Mat mixer;  // H x H
    Mat gate;   // H x H
    Mat up;     // H x H
    Mat down;   // H x H
};

struct ToyModel {
    Mat embed_img;  // H x kImageDim
    Mat embed_q;    // H x (kFindingCount + 1 + kStyleDim)
    std::vector<ToyBlock> blocks;
    Vec head_yes;  // H
    Vec head_no;   // H
    ToyConfig config;
};

struct ToyExample {
    std::string example_id;
    Vec image_feat;  // kImageDim
    records::GroundTruth finding_label = records::GroundTruth::Yes;
    QFeat question_orig;
    QFeat question_para;
};

struct ForwardTrace {
    double z_yes = 0.0;
    double z_no = 0.0;
    std::vector<Vec> residuals;  // n_layers + 1 entries; [0] is the embedding output

    double margin() const { return z_yes - z_no; }
};

// Deterministic given the config: all parameters come from named splitmix64
// streams, then the register plant is installed (the question embedding
// writes register_gain * (+-1) into register_channel and head_yes gets
// +head_register_weight on that channel) alongside the image-evidence plant.
ToyModel build_toy_model(const ToyConfig& cfg);

struct Dataset {
    std::vector<ToyExample> train;
    std::vector<ToyExample> eval;
};

// Balanced labels; image_feat carries the label signal at coordinate 0 plus
// Gaussian noise (cfg.noise_sd); paraphrases flip the register with
// probability 1/2 and always resample style. Train/eval use disjoint id
// prefixes and PRNG streams.
Dataset generate_dataset(const ToyConfig& cfg, std::size_t n_train, std::size_t n_eval,
                         std::uint64_t seed);

Vec encode_question(const QFeat& q);

// Per-step dropout on adapter input activations (inverted scaling). Masks
// are derived from (seed, step, example tag, layer, module), so a fixed plan
// is bit-reproducible.
struct DropoutPlan {
    double rate = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

ForwardTrace forward(const ToyModel& model, const Vec& image_feat, const QFeat& q,
                     const lora::LoraAdapterSet* adapters = nullptr);

// Resume a forward pass with the residual stream after `layer` blocks
// replaced by h; applies blocks layer..n_layers-1 and the head.
ForwardTrace forward_from(const ToyModel& model, const Vec& h, std::size_t layer,
                          const lora::LoraAdapterSet* adapters = nullptr);

struct LossBreakdown {
    double l_cons = 0.0;   // symmetric KL, mean over batch
    double l_acc = 0.0;    // cross-entropy on both phrasings, mean over batch
    double l_total = 0.0;  // l_cons + lambda * l_acc
    std::size_t n_pairs = 0;
};

struct PairLosses {
    double l_cons = 0.0;
    double l_acc = 0.0;
};

// Losses for one pair given the (temperature-scaled) decision margins.
// The two-way softmax depends only on z_yes - z_no, so both losses are
// invariant under shifting both logits by a constant.
PairLosses pair_losses(double s_orig, double s_para, bool truth_yes);

// Combined loss over a batch with exact reverse-mode gradients restricted to
// adapter parameters (base weights and the vision path stay frozen). Pass
// grads=nullptr for loss-only evaluation. Dropout applies only when a plan
// with rate > 0 is given; gradients account for the identical mask.
LossBreakdown loss_and_grads(const ToyModel& model, const lora::LoraAdapterSet& adapters,
                             const std::vector<ToyExample>& batch, double lambda,
                             double temperature, lora::AdapterGrads* grads,
                             const DropoutPlan* dropout = nullptr);

void save_dataset(const std::string& path, const std::vector<ToyExample>& examples);
std::vector<ToyExample> load_dataset(const std::string& path);

// Bridge into the metrics pipeline: one EvalRecord per eval example, with
// synthesized response texts and similarity so flipbank construction works
// on toy output unchanged.
std::vector<records::EvalRecord> examples_to_eval_records(
    const ToyModel& model, const std::vector<ToyExample>& examples,
    const lora::LoraAdapterSet* adapters = nullptr);

}  // namespace conlab::toymodel
