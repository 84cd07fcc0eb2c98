#include "conlab/toymodel.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "conlab/lora.hpp"
#include "conlab/metrics.hpp"

using nlohmann::json;

namespace conlab::toymodel {

const char* module_name(TargetModule m) {
    switch (m) {
        case TargetModule::Mixer: return "mixer";
        case TargetModule::Gate: return "gate";
        case TargetModule::Up: return "up";
        case TargetModule::Down: return "down";
    }
    return "?";
}

TargetModule module_from_name(const std::string& name) {
    if (name == "mixer") return TargetModule::Mixer;
    if (name == "gate") return TargetModule::Gate;
    if (name == "up") return TargetModule::Up;
    if (name == "down") return TargetModule::Down;
    throw ValidationError("unknown target module: '" + name + "'");
}

void ToyConfig::validate() const {
    if (hidden_dim < 8) throw ValidationError("toy config: hidden_dim must be >= 8");
    if (n_layers < 2) throw ValidationError("toy config: n_layers must be >= 2");
    if (register_channel >= hidden_dim) {
        throw ValidationError("toy config: register_channel out of range");
    }
    if (!std::isfinite(register_gain) || !std::isfinite(head_register_weight)) {
        throw ValidationError("toy config: gains must be finite");
    }
    if (!(noise_sd >= 0.0)) throw ValidationError("toy config: noise_sd must be >= 0");
}

std::size_t evidence_channel(const ToyConfig& cfg) {
    return (cfg.register_channel + cfg.hidden_dim / 2) % cfg.hidden_dim;
}

namespace {

// Base parameter scales, tuned once so the default config's baseline flip
// rate lands in the golden window, then frozen.
constexpr double kEmbedSd = 0.05;
constexpr double kHeadSd = 0.08;
constexpr double kMixerScale = 0.15;  // per-entry sd = scale / sqrt(H)
constexpr double kGateScale = 0.30;
constexpr double kUpScale = 0.30;
constexpr double kDownScale = 0.25;

Mat random_matrix(std::size_t rows, std::size_t cols, double sd, SplitMix64& rng) {
    Mat m(rows, cols);
    for (double& v : m.data) v = sd * rng.normal();
    return m;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244008443621048));
}

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244008443621048));
    const double pdf = 0.3989422804014326779399460599344 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Vec encode_question(const QFeat& q) {
    if (q.finding_id >= kFindingCount) throw ValidationError("finding_id out of range");
    if (!q.style_noise.empty() && q.style_noise.size() != kStyleDim) {
        throw ValidationError("style_noise must have length " + std::to_string(kStyleDim));
    }
    Vec v(kFindingCount + 1 + kStyleDim, 0.0);
    v[q.finding_id] = 1.0;
    v[kFindingCount] = (q.register_form == Register::Presence) ? 1.0 : -1.0;
    for (std::size_t i = 0; i < q.style_noise.size(); ++i) v[kFindingCount + 1 + i] = q.style_noise[i];
    return v;
}

ToyModel build_toy_model(const ToyConfig& cfg) {
    cfg.validate();

    ToyModel m;
    m.config = cfg;
    const std::size_t h = cfg.hidden_dim;
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));

    {
        auto rng = seeded_stream(cfg.seed, "embed_img");
        m.embed_img = random_matrix(h, kImageDim, kEmbedSd, rng);
    }
    {
        auto rng = seeded_stream(cfg.seed, "embed_q");
        m.embed_q = random_matrix(h, kFindingCount + 1 + kStyleDim, kEmbedSd, rng);
    }
    m.blocks.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string tag = "block" + std::to_string(i);
        auto r1 = seeded_stream(cfg.seed, tag + ":mixer");
        auto r2 = seeded_stream(cfg.seed, tag + ":gate");
        auto r3 = seeded_stream(cfg.seed, tag + ":up");
        auto r4 = seeded_stream(cfg.seed, tag + ":down");
        m.blocks[i].mixer = random_matrix(h, h, kMixerScale * inv_sqrt_h, r1);
        m.blocks[i].gate = random_matrix(h, h, kGateScale * inv_sqrt_h, r2);
        m.blocks[i].up = random_matrix(h, h, kUpScale * inv_sqrt_h, r3);
        m.blocks[i].down = random_matrix(h, h, kDownScale * inv_sqrt_h, r4);
    }
    {
        auto rng = seeded_stream(cfg.seed, "heads");
        m.head_yes.resize(h);
        m.head_no.resize(h);
        for (double& v : m.head_yes) v = kHeadSd * rng.normal();
        for (double& v : m.head_no) v = kHeadSd * rng.normal();
    }

    // Install the plants. The register scalar writes only to the register
    // channel; the image signal coordinate gets a dedicated evidence channel
    // read out by the heads.
    const std::size_t ev = evidence_channel(cfg);
    for (std::size_t r = 0; r < h; ++r) m.embed_q(r, kFindingCount) = 0.0;
    m.embed_q(cfg.register_channel, kFindingCount) = cfg.register_gain;
    m.embed_img(ev, 0) += kEvidenceGain;
    m.head_yes[cfg.register_channel] += cfg.head_register_weight;
    m.head_yes[ev] += kHeadEvidenceWeight;
    m.head_no[ev] -= kHeadEvidenceWeight;
    return m;
}

Dataset generate_dataset(const ToyConfig& cfg, std::size_t n_train, std::size_t n_eval,
                         std::uint64_t seed) {
    cfg.validate();
    if (n_train == 0 || n_eval == 0) throw ValidationError("generate_dataset: counts must be > 0");

    const auto make_split = [&](const std::string& tag, std::size_t n) {
        auto rng = seeded_stream(seed, "dataset:" + tag);
        std::vector<ToyExample> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            ToyExample ex;
            char idbuf[32];
            std::snprintf(idbuf, sizeof(idbuf), "%s-%05zu", tag.c_str(), i);
            ex.example_id = idbuf;
            ex.finding_label = (i % 2 == 0) ? records::GroundTruth::Yes : records::GroundTruth::No;

            ex.image_feat.resize(kImageDim);
            const double sign = (ex.finding_label == records::GroundTruth::Yes) ? 1.0 : -1.0;
            ex.image_feat[0] = sign * kSignalMu + cfg.noise_sd * rng.normal();
            for (std::size_t j = 1; j < kImageDim; ++j) ex.image_feat[j] = cfg.noise_sd * rng.normal();

            const std::size_t finding = rng.below(kFindingCount);
            ex.question_orig.finding_id = finding;
            ex.question_orig.register_form =
                (rng.uniform() < 0.5) ? Register::Presence : Register::Exclusion;
            ex.question_orig.style_noise.resize(kStyleDim);
            for (double& v : ex.question_orig.style_noise) v = kStyleSd * rng.normal();

            ex.question_para.finding_id = finding;
            const bool flip_register = rng.uniform() < 0.5;
            ex.question_para.register_form =
                flip_register ? (ex.question_orig.register_form == Register::Presence
                                     ? Register::Exclusion
                                     : Register::Presence)
                              : ex.question_orig.register_form;
            ex.question_para.style_noise.resize(kStyleDim);
            for (double& v : ex.question_para.style_noise) v = kStyleSd * rng.normal();

            out.push_back(std::move(ex));
        }
        return out;
    };

    Dataset ds;
    ds.train = make_split("train", n_train);
    ds.eval = make_split("eval", n_eval);
    return ds;
}

// ---------------------------------------------------------------------------
// Forward / backward machinery
// ---------------------------------------------------------------------------

namespace {

struct ModuleCache {
    Vec x_tilde;                 // adapter-path input after dropout
    Vec ax;                      // A * x_tilde
    std::vector<std::uint8_t> keep;  // dropout keep mask (empty = no dropout)
};

struct BlockTape {
    Vec x0;
    Vec x1;
    Vec g, u, act;
    ModuleCache mc_mixer, mc_gate, mc_up, mc_down;
};

struct DropoutContext {
    const DropoutPlan* plan = nullptr;
    std::uint64_t example_tag = 0;
};

std::vector<std::uint8_t> make_mask(const DropoutContext& ctx, std::size_t layer,
                                    TargetModule module, std::size_t n) {
    std::vector<std::uint8_t> keep(n, 1);
    const std::uint64_t mix = ctx.plan->seed ^ (0x9e3779b97f4a7c15ULL * (ctx.plan->step + 1)) ^
                              (0xc2b2ae3d27d4eb4fULL * (ctx.example_tag + 1)) ^
                              (0x165667b19e3779f9ULL * (layer + 1)) ^
                              hash_name(module_name(module));
    SplitMix64 rng(mix);
    for (std::size_t i = 0; i < n; ++i) keep[i] = rng.uniform() >= ctx.plan->rate ? 1 : 0;
    return keep;
}

// y += W_eff x, caching adapter intermediates when a tape is provided.
Vec apply_module(const Mat& w, const lora::AdapterPair* ad, double scale, const Vec& x,
                 std::size_t layer, TargetModule module, const DropoutContext* drop,
                 ModuleCache* cache) {
    Vec y = matvec(w, x);
    if (!ad) return y;

    const Vec* adapter_in = &x;
    Vec dropped;
    std::vector<std::uint8_t> keep;
    if (drop && drop->plan && drop->plan->rate > 0.0) {
        keep = make_mask(*drop, layer, module, x.size());
        dropped.resize(x.size());
        const double inv_keep = 1.0 / (1.0 - drop->plan->rate);
        for (std::size_t i = 0; i < x.size(); ++i) dropped[i] = keep[i] ? x[i] * inv_keep : 0.0;
        adapter_in = &dropped;
    }

    Vec ax = matvec(ad->a, *adapter_in);
    Vec bax = matvec(ad->b, ax);
    axpy(y, bax, scale);

    if (cache) {
        cache->x_tilde = *adapter_in;
        cache->ax = std::move(ax);
        cache->keep = std::move(keep);
    }
    return y;
}

// Backward through one module: r_out is dL/d(module output). Adds the input
// gradient into r_x and, when grads are given, accumulates dA/dB.
void module_backward(const Mat& w, const lora::AdapterPair* ad, double scale,
                     const ModuleCache& cache, const Vec& r_out, double drop_rate, Vec& r_x,
                     lora::AdapterPair* grad) {
    const Vec base = matvec_t(w, r_out);
    axpy(r_x, base);
    if (!ad) return;

    const Vec bt_r = matvec_t(ad->b, r_out);  // rank
    if (grad) {
        add_outer(grad->b, r_out, cache.ax, scale);
        add_outer(grad->a, bt_r, cache.x_tilde, scale);
    }
    Vec at = matvec_t(ad->a, bt_r);  // in_dim
    if (!cache.keep.empty()) {
        const double inv_keep = 1.0 / (1.0 - drop_rate);
        for (std::size_t i = 0; i < at.size(); ++i) at[i] = cache.keep[i] ? at[i] * inv_keep : 0.0;
    }
    axpy(r_x, at, scale);
}

struct AdapterView {
    const lora::LoraAdapterSet* set = nullptr;

    const lora::AdapterPair* get(std::size_t layer, TargetModule m) const {
        return set ? set->find(layer, m) : nullptr;
    }
    double scale() const { return set ? set->scale() : 0.0; }
    double drop_rate(const DropoutContext* drop) const {
        return (drop && drop->plan) ? drop->plan->rate : 0.0;
    }
};

Vec run_block(const ToyModel& model, std::size_t i, const Vec& h_in, const AdapterView& av,
              const DropoutContext* drop, BlockTape* tape) {
    const ToyBlock& blk = model.blocks[i];
    const double s = av.scale();

    Vec mix = apply_module(blk.mixer, av.get(i, TargetModule::Mixer), s, h_in, i,
                           TargetModule::Mixer, drop, tape ? &tape->mc_mixer : nullptr);
    Vec x1 = h_in;
    axpy(x1, mix);

    Vec g = apply_module(blk.gate, av.get(i, TargetModule::Gate), s, x1, i, TargetModule::Gate,
                         drop, tape ? &tape->mc_gate : nullptr);
    Vec u = apply_module(blk.up, av.get(i, TargetModule::Up), s, x1, i, TargetModule::Up, drop,
                         tape ? &tape->mc_up : nullptr);
    Vec act(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) act[k] = gelu(g[k]) * u[k];

    Vec dn = apply_module(blk.down, av.get(i, TargetModule::Down), s, act, i, TargetModule::Down,
                          drop, tape ? &tape->mc_down : nullptr);
    Vec h_out = x1;
    axpy(h_out, dn);

    if (tape) {
        tape->x0 = h_in;
        tape->x1 = std::move(x1);
        tape->g = std::move(g);
        tape->u = std::move(u);
        tape->act = std::move(act);
    }
    return h_out;
}

// Returns dL/dx0 given dL/dh_out.
Vec block_backward(const ToyModel& model, std::size_t i, const BlockTape& tape,
                   const AdapterView& av, const DropoutContext* drop, const Vec& r_out,
                   lora::AdapterGrads* grads) {
    const ToyBlock& blk = model.blocks[i];
    const double s = av.scale();
    const double rate = av.drop_rate(drop);
    const auto grad_of = [&](TargetModule m) -> lora::AdapterPair* {
        if (!grads) return nullptr;
        const auto it = grads->entries.find({i, m});
        return it == grads->entries.end() ? nullptr : &it->second;
    };

    // Down projection
    Vec r_act(tape.act.size(), 0.0);
    module_backward(blk.down, av.get(i, TargetModule::Down), s, tape.mc_down, r_out, rate, r_act,
                    grad_of(TargetModule::Down));

    // act = gelu(g) .* u
    Vec r_g(tape.g.size()), r_u(tape.u.size());
    for (std::size_t k = 0; k < r_act.size(); ++k) {
        r_g[k] = r_act[k] * tape.u[k] * gelu_grad(tape.g[k]);
        r_u[k] = r_act[k] * gelu(tape.g[k]);
    }

    Vec r_x1 = r_out;  // identity path of the MLP residual
    module_backward(blk.gate, av.get(i, TargetModule::Gate), s, tape.mc_gate, r_g, rate, r_x1,
                    grad_of(TargetModule::Gate));
    module_backward(blk.up, av.get(i, TargetModule::Up), s, tape.mc_up, r_u, rate, r_x1,
                    grad_of(TargetModule::Up));

    Vec r_x0 = r_x1;  // identity path of the mixer residual
    module_backward(blk.mixer, av.get(i, TargetModule::Mixer), s, tape.mc_mixer, r_x1, rate, r_x0,
                    grad_of(TargetModule::Mixer));
    return r_x0;
}

Vec embed_input(const ToyModel& model, const Vec& image_feat, const QFeat& q) {
    if (image_feat.size() != kImageDim) {
        throw ValidationError("image_feat must have length " + std::to_string(kImageDim));
    }
    Vec h = matvec(model.embed_img, image_feat);
    const Vec qv = encode_question(q);
    const Vec hq = matvec(model.embed_q, qv);
    axpy(h, hq);
    return h;
}

void check_adapters(const ToyModel& model, const lora::LoraAdapterSet* adapters) {
    if (!adapters) return;
    for (const auto& [key, pair] : adapters->entries) {
        (void)pair;
        if (key.first >= model.config.n_layers) {
            throw ValidationError("adapter layer " + std::to_string(key.first) +
                                  " out of range for depth " +
                                  std::to_string(model.config.n_layers));
        }
    }
}

}  // namespace

ForwardTrace forward(const ToyModel& model, const Vec& image_feat, const QFeat& q,
                     const lora::LoraAdapterSet* adapters) {
    check_adapters(model, adapters);
    const AdapterView av{adapters};

    ForwardTrace t;
    t.residuals.reserve(model.config.n_layers + 1);
    Vec h = embed_input(model, image_feat, q);
    t.residuals.push_back(h);
    for (std::size_t i = 0; i < model.config.n_layers; ++i) {
        h = run_block(model, i, h, av, nullptr, nullptr);
        t.residuals.push_back(h);
    }
    t.z_yes = 0.0;
    t.z_no = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) {
        t.z_yes += model.head_yes[k] * h[k];
        t.z_no += model.head_no[k] * h[k];
    }
    return t;
}

ForwardTrace forward_from(const ToyModel& model, const Vec& h_start, std::size_t layer,
                          const lora::LoraAdapterSet* adapters) {
    check_adapters(model, adapters);
    if (layer > model.config.n_layers) throw ValidationError("forward_from: layer out of range");
    if (h_start.size() != model.config.hidden_dim) {
        throw ValidationError("forward_from: residual width mismatch");
    }
    const AdapterView av{adapters};

    ForwardTrace t;
    Vec h = h_start;
    t.residuals.push_back(h);
    for (std::size_t i = layer; i < model.config.n_layers; ++i) {
        h = run_block(model, i, h, av, nullptr, nullptr);
        t.residuals.push_back(h);
    }
    t.z_yes = 0.0;
    t.z_no = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) {
        t.z_yes += model.head_yes[k] * h[k];
        t.z_no += model.head_no[k] * h[k];
    }
    return t;
}

namespace {

struct TapedForward {
    std::vector<BlockTape> tapes;
    double z_yes = 0.0;
    double z_no = 0.0;
};

TapedForward forward_taped(const ToyModel& model, const Vec& image_feat, const QFeat& q,
                           const AdapterView& av, const DropoutContext* drop) {
    TapedForward tf;
    tf.tapes.resize(model.config.n_layers);
    Vec h = embed_input(model, image_feat, q);
    for (std::size_t i = 0; i < model.config.n_layers; ++i) {
        h = run_block(model, i, h, av, drop, &tf.tapes[i]);
    }
    for (std::size_t k = 0; k < h.size(); ++k) {
        tf.z_yes += model.head_yes[k] * h[k];
        tf.z_no += model.head_no[k] * h[k];
    }
    return tf;
}

// Backprop dL/ds (s = margin/T) through head and blocks.
void backward_from_margin(const ToyModel& model, const TapedForward& tf, const AdapterView& av,
                          const DropoutContext* drop, double dl_ds, double temperature,
                          lora::AdapterGrads* grads) {
    const std::size_t h = model.config.hidden_dim;
    Vec r(h);
    const double c = dl_ds / temperature;
    for (std::size_t k = 0; k < h; ++k) r[k] = c * (model.head_yes[k] - model.head_no[k]);
    for (std::size_t i = model.config.n_layers; i-- > 0;) {
        r = block_backward(model, i, tf.tapes[i], av, drop, r, grads);
    }
}

}  // namespace

PairLosses pair_losses(double s_orig, double s_para, bool truth_yes) {
    const double po = sigmoid(s_orig);
    const double pp = sigmoid(s_para);
    PairLosses l;
    // Symmetric KL over a 2-way softmax collapses to 1/2 (p_o - p_p)(s_o - s_p).
    l.l_cons = 0.5 * (po - pp) * (s_orig - s_para);
    l.l_acc = (truth_yes ? softplus(-s_orig) : softplus(s_orig)) +
              (truth_yes ? softplus(-s_para) : softplus(s_para));
    return l;
}

LossBreakdown loss_and_grads(const ToyModel& model, const lora::LoraAdapterSet& adapters,
                             const std::vector<ToyExample>& batch, double lambda,
                             double temperature, lora::AdapterGrads* grads,
                             const DropoutPlan* dropout) {
    if (batch.empty()) throw ValidationError("loss_and_grads: empty batch");
    if (lambda < 0.0) throw ValidationError("loss_and_grads: lambda must be >= 0");
    if (!(temperature > 0.0)) throw ValidationError("loss_and_grads: temperature must be > 0");
    check_adapters(model, &adapters);

    const AdapterView av{&adapters};
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    LossBreakdown out;
    out.n_pairs = batch.size();

    for (const ToyExample& ex : batch) {
        if (ex.finding_label == records::GroundTruth::None) {
            throw ValidationError("loss_and_grads: example '" + ex.example_id +
                                  "' lacks a binary label");
        }

        // Tag masks by example identity so micro-batching cannot reuse them.
        const std::uint64_t tag = hash_name(ex.example_id);
        DropoutContext drop_orig{dropout, 2 * tag};
        DropoutContext drop_para{dropout, 2 * tag + 1};
        const DropoutContext* dro = dropout && dropout->rate > 0.0 ? &drop_orig : nullptr;
        const DropoutContext* drp = dropout && dropout->rate > 0.0 ? &drop_para : nullptr;

        const bool need_tape = grads != nullptr;
        TapedForward fo, fp;
        if (need_tape || dro) {
            fo = forward_taped(model, ex.image_feat, ex.question_orig, av, dro);
            fp = forward_taped(model, ex.image_feat, ex.question_para, av, drp);
        } else {
            const ForwardTrace to_ = forward(model, ex.image_feat, ex.question_orig, &adapters);
            const ForwardTrace tp_ = forward(model, ex.image_feat, ex.question_para, &adapters);
            fo.z_yes = to_.z_yes; fo.z_no = to_.z_no;
            fp.z_yes = tp_.z_yes; fp.z_no = tp_.z_no;
        }

        const double so = (fo.z_yes - fo.z_no) / temperature;
        const double sp = (fp.z_yes - fp.z_no) / temperature;
        const double po = sigmoid(so);
        const double pp = sigmoid(sp);

        const bool yes = (ex.finding_label == records::GroundTruth::Yes);
        const PairLosses pl = pair_losses(so, sp, yes);
        const double l_cons = pl.l_cons;
        const double l_acc = pl.l_acc;

        out.l_cons += l_cons * inv_n;
        out.l_acc += l_acc * inv_n;

        if (!std::isfinite(l_cons) || !std::isfinite(l_acc)) {
            throw ValidationError("loss_and_grads: non-finite loss on example '" + ex.example_id +
                                  "'");
        }

        if (grads) {
            const double dpo = po * (1.0 - po);
            const double dpp = pp * (1.0 - pp);
            double dl_dso = 0.5 * (dpo * (so - sp) + (po - pp));
            double dl_dsp = 0.5 * (-dpp * (so - sp) - (po - pp));
            dl_dso += lambda * (po - (yes ? 1.0 : 0.0));
            dl_dsp += lambda * (pp - (yes ? 1.0 : 0.0));
            backward_from_margin(model, fo, av, dro, dl_dso * inv_n, temperature, grads);
            backward_from_margin(model, fp, av, drp, dl_dsp * inv_n, temperature, grads);
        }
    }

    out.l_total = out.l_cons + lambda * out.l_acc;
    return out;
}

// ---------------------------------------------------------------------------
// Dataset and bridge serialization
// ---------------------------------------------------------------------------

namespace {

json qfeat_to_json(const QFeat& q) {
    json j;
    j["finding_id"] = q.finding_id;
    j["register"] = (q.register_form == Register::Presence) ? "presence" : "exclusion";
    j["style_noise"] = q.style_noise;
    return j;
}

QFeat qfeat_from_json(const json& j) {
    QFeat q;
    q.finding_id = j.at("finding_id").get<std::size_t>();
    const std::string reg = j.at("register").get<std::string>();
    if (reg == "presence") q.register_form = Register::Presence;
    else if (reg == "exclusion") q.register_form = Register::Exclusion;
    else throw ValidationError("unknown register value: '" + reg + "'");
    q.style_noise = j.at("style_noise").get<Vec>();
    return q;
}

std::string question_text(const QFeat& q) {
    const std::string finding = "finding-" + std::to_string(q.finding_id);
    return q.register_form == Register::Presence ? "Is there evidence of " + finding + "?"
                                                 : "Can you rule out " + finding + "?";
}

}  // namespace

void save_dataset(const std::string& path, const std::vector<ToyExample>& examples) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    for (const auto& ex : examples) {
        json j;
        j["example_id"] = ex.example_id;
        j["image_feat"] = ex.image_feat;
        j["finding_label"] = records::ground_truth_to_string(ex.finding_label);
        j["question_orig"] = qfeat_to_json(ex.question_orig);
        j["question_para"] = qfeat_to_json(ex.question_para);
        out << j.dump() << "\n";
    }
}

std::vector<ToyExample> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open dataset: " + path);
    std::vector<ToyExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
        ToyExample ex;
        ex.example_id = j.at("example_id").get<std::string>();
        ex.image_feat = j.at("image_feat").get<Vec>();
        ex.finding_label = records::ground_truth_from_string(j.at("finding_label").get<std::string>());
        ex.question_orig = qfeat_from_json(j.at("question_orig"));
        ex.question_para = qfeat_from_json(j.at("question_para"));
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<records::EvalRecord> examples_to_eval_records(
    const ToyModel& model, const std::vector<ToyExample>& examples,
    const lora::LoraAdapterSet* adapters) {
    std::vector<records::EvalRecord> recs(examples.size());
    parallel_for(examples.size(), [&](std::size_t i) {
        const ToyExample& ex = examples[i];
        const ForwardTrace to_ = forward(model, ex.image_feat, ex.question_orig, adapters);
        const ForwardTrace tp_ = forward(model, ex.image_feat, ex.question_para, adapters);

        records::EvalRecord r;
        r.pair_id = ex.example_id;
        r.question_id = "q-" + ex.example_id;
        r.image_id = "img-" + ex.example_id;
        r.question_text = question_text(ex.question_orig);
        r.paraphrase_text = question_text(ex.question_para);
        r.logit_yes_orig = to_.z_yes;
        r.logit_no_orig = to_.z_no;
        r.logit_yes_para = tp_.z_yes;
        r.logit_no_para = tp_.z_no;
        r.response_orig = (to_.margin() >= 0.0) ? "Yes." : "No.";
        r.response_para = (tp_.margin() >= 0.0) ? "Yes." : "No.";
        r.ground_truth = ex.finding_label;
        SplitMix64 sim(hash_name(ex.example_id));
        r.similarity = 0.96 + 0.039 * sim.uniform();
        recs[i] = std::move(r);
    });
    return recs;
}

}  // namespace conlab::toymodel
