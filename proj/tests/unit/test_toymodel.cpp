#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <unordered_set>

#include "conlab/lora.hpp"
#include "conlab/toymodel.hpp"

using namespace conlab;
using namespace conlab::toymodel;

namespace {

ToyConfig small_config() {
    ToyConfig cfg;
    cfg.hidden_dim = 8;
    cfg.n_layers = 2;
    cfg.register_channel = 3;
    cfg.seed = 1234;
    return cfg;
}

// Straight-line recomputation of the forward pass with plain loops, reading
// the model parameters directly. Independent of run_block's wiring.
double hand_forward_margin(const ToyModel& m, const Vec& img, const QFeat& q) {
    const std::size_t H = m.config.hidden_dim;
    const Vec qv = encode_question(q);
    Vec h(H, 0.0);
    for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t c = 0; c < img.size(); ++c) h[r] += m.embed_img(r, c) * img[c];
        for (std::size_t c = 0; c < qv.size(); ++c) h[r] += m.embed_q(r, c) * qv[c];
    }
    const auto gelu = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
    for (const auto& blk : m.blocks) {
        Vec x1(H, 0.0);
        for (std::size_t r = 0; r < H; ++r) {
            double acc = h[r];
            for (std::size_t c = 0; c < H; ++c) acc += blk.mixer(r, c) * h[c];
            x1[r] = acc;
        }
        Vec g(H, 0.0), u(H, 0.0);
        for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t c = 0; c < H; ++c) {
                g[r] += blk.gate(r, c) * x1[c];
                u[r] += blk.up(r, c) * x1[c];
            }
        }
        Vec out(H, 0.0);
        for (std::size_t r = 0; r < H; ++r) {
            double acc = x1[r];
            for (std::size_t c = 0; c < H; ++c) acc += blk.down(r, c) * (gelu(g[c]) * u[c]);
            out[r] = acc;
        }
        h = out;
    }
    double zy = 0.0, zn = 0.0;
    for (std::size_t k = 0; k < H; ++k) {
        zy += m.head_yes[k] * h[k];
        zn += m.head_no[k] * h[k];
    }
    return zy - zn;
}

ToyExample register_only_pair(const ToyConfig& cfg, std::uint64_t seed) {
    SplitMix64 rng(seed);
    ToyExample ex;
    ex.example_id = "pair-" + std::to_string(seed);
    ex.finding_label = records::GroundTruth::Yes;
    ex.image_feat.resize(kImageDim);
    ex.image_feat[0] = kSignalMu + cfg.noise_sd * rng.normal();
    for (std::size_t i = 1; i < kImageDim; ++i) ex.image_feat[i] = cfg.noise_sd * rng.normal();
    ex.question_orig.finding_id = 2;
    ex.question_orig.register_form = Register::Presence;
    ex.question_orig.style_noise.assign(kStyleDim, 0.0);
    for (double& v : ex.question_orig.style_noise) v = kStyleSd * rng.normal();
    ex.question_para = ex.question_orig;
    ex.question_para.register_form = Register::Exclusion;
    return ex;
}

}  // namespace

TEST_CASE("build_toy_model is deterministic") {
    const ToyConfig cfg;  // defaults
    const auto a = build_toy_model(cfg);
    const auto b = build_toy_model(cfg);
    CHECK(a.embed_img.data == b.embed_img.data);
    CHECK(a.embed_q.data == b.embed_q.data);
    CHECK(a.head_yes == b.head_yes);
    for (std::size_t i = 0; i < a.blocks.size(); ++i) {
        CHECK(a.blocks[i].mixer.data == b.blocks[i].mixer.data);
        CHECK(a.blocks[i].down.data == b.blocks[i].down.data);
    }
}

TEST_CASE("config validation") {
    ToyConfig cfg;
    cfg.register_channel = cfg.hidden_dim;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = ToyConfig{};
    cfg.n_layers = 1;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("register plant writes only the register channel at the embedding") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto ex = register_only_pair(cfg, 5);
    const auto to_ = forward(model, ex.image_feat, ex.question_orig);
    const auto tp_ = forward(model, ex.image_feat, ex.question_para);

    const Vec& h0o = to_.residuals[0];
    const Vec& h0p = tp_.residuals[0];
    for (std::size_t c = 0; c < cfg.hidden_dim; ++c) {
        if (c == cfg.register_channel) {
            CHECK(h0o[c] - h0p[c] == doctest::Approx(2.0 * cfg.register_gain));
        } else {
            CHECK(h0o[c] == doctest::Approx(h0p[c]));
        }
    }
    CHECK(to_.margin() != tp_.margin());
}

TEST_CASE("register_gain = 0 disables the plant") {
    auto cfg = small_config();
    cfg.register_gain = 0.0;
    const auto model = build_toy_model(cfg);
    const auto ex = register_only_pair(cfg, 6);
    const auto to_ = forward(model, ex.image_feat, ex.question_orig);
    const auto tp_ = forward(model, ex.image_feat, ex.question_para);
    CHECK(to_.z_yes == tp_.z_yes);
    CHECK(to_.z_no == tp_.z_no);
    for (std::size_t l = 0; l < to_.residuals.size(); ++l) {
        CHECK(to_.residuals[l] == tp_.residuals[l]);
    }
}

TEST_CASE("forward matches a straight-line recomputation") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    SplitMix64 rng(777);
    for (int t = 0; t < 10; ++t) {
        const auto ex = register_only_pair(cfg, 100 + t);
        const auto trace = forward(model, ex.image_feat, ex.question_orig);
        CHECK(trace.residuals.size() == cfg.n_layers + 1);
        const double oracle = hand_forward_margin(model, ex.image_feat, ex.question_orig);
        CHECK(trace.margin() == doctest::Approx(oracle).epsilon(1e-12));
    }
    (void)rng;
}

TEST_CASE("forward_from agrees with a full forward") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto ex = register_only_pair(cfg, 42);
    const auto full = forward(model, ex.image_feat, ex.question_orig);
    for (std::size_t layer = 0; layer <= cfg.n_layers; ++layer) {
        const auto resumed = forward_from(model, full.residuals[layer], layer);
        CHECK(resumed.z_yes == doctest::Approx(full.z_yes).epsilon(1e-13));
        CHECK(resumed.z_no == doctest::Approx(full.z_no).epsilon(1e-13));
    }
}

TEST_CASE("generate_dataset: balance, disjointness, noiseless separability") {
    const ToyConfig cfg;
    const auto ds = generate_dataset(cfg, 50, 158, 99);
    REQUIRE(ds.train.size() == 50);
    REQUIRE(ds.eval.size() == 158);

    std::size_t yes = 0;
    for (const auto& ex : ds.eval) yes += ex.finding_label == records::GroundTruth::Yes ? 1 : 0;
    CHECK(yes == 79);

    std::unordered_set<std::string> ids;
    for (const auto& ex : ds.train) ids.insert(ex.example_id);
    for (const auto& ex : ds.eval) CHECK(ids.count(ex.example_id) == 0);

    for (const auto& ex : ds.eval) {
        CHECK(ex.question_orig.finding_id == ex.question_para.finding_id);
    }

    ToyConfig noiseless = cfg;
    noiseless.noise_sd = 0.0;
    const auto clean = generate_dataset(noiseless, 40, 40, 1);
    for (const auto& ex : clean.train) {
        const bool pred = ex.image_feat[0] > 0.0;
        CHECK(pred == (ex.finding_label == records::GroundTruth::Yes));
    }
}

TEST_CASE("dataset save/load round-trip") {
    const ToyConfig cfg;
    const auto ds = generate_dataset(cfg, 5, 5, 3);
    const auto path = (std::filesystem::temp_directory_path() / "conlab_ds.jsonl").string();
    save_dataset(path, ds.train);
    const auto back = load_dataset(path);
    REQUIRE(back.size() == ds.train.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].example_id == ds.train[i].example_id);
        CHECK(back[i].image_feat == ds.train[i].image_feat);
        CHECK(back[i].question_orig.register_form == ds.train[i].question_orig.register_form);
        CHECK(back[i].question_para.style_noise == ds.train[i].question_para.style_noise);
    }
    std::filesystem::remove(path);
}

TEST_CASE("pair_losses closed forms") {
    // identical distributions: zero consistency loss
    CHECK(pair_losses(1.7, 1.7, true).l_cons == 0.0);

    // p_orig = (0.9, 0.1), p_para = (0.1, 0.9): symmetric KL = 0.8 ln 9
    const double s = std::log(9.0);
    const auto l = pair_losses(s, -s, true);
    CHECK(l.l_cons == doctest::Approx(0.8 * std::log(9.0)).epsilon(1e-12));
    CHECK(l.l_cons == doctest::Approx(1.7578).epsilon(1e-4));

    // direct evaluation of both KL sums as an oracle
    const auto kl = [](double p, double q) {
        return p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q));
    };
    SplitMix64 rng(31);
    for (int t = 0; t < 100; ++t) {
        const double so = 4.0 * rng.normal(), sp = 4.0 * rng.normal();
        const double po = 1.0 / (1.0 + std::exp(-so)), pp = 1.0 / (1.0 + std::exp(-sp));
        const auto pl = pair_losses(so, sp, false);
        CHECK(pl.l_cons == doctest::Approx(0.5 * (kl(po, pp) + kl(pp, po))).epsilon(1e-9));
        CHECK(pl.l_cons >= 0.0);
        // symmetry under swapping the pair
        CHECK(pair_losses(sp, so, false).l_cons == doctest::Approx(pl.l_cons).epsilon(1e-12));
        // cross-entropy oracle
        CHECK(pl.l_acc == doctest::Approx(-std::log(1 - po) - std::log(1 - pp)).epsilon(1e-9));
    }
}

TEST_CASE("loss_and_grads structure") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    lora::LoraConfig lcfg;
    lcfg.rank = 2;
    lcfg.alpha = 4.0;
    lcfg.dropout = 0.0;
    lcfg.target_layers = {0, 1};
    lcfg.seed = 5;
    const auto adapters = lora::init_adapters(model, lcfg);

    const auto ds = generate_dataset(cfg, 6, 4, 2);

    // lambda = 0: total is the consistency term alone
    const auto l0 = loss_and_grads(model, adapters, ds.train, 0.0, 1.0, nullptr);
    CHECK(l0.l_total == l0.l_cons);

    CHECK_THROWS_AS(loss_and_grads(model, adapters, ds.train, -0.5, 1.0, nullptr),
                    ValidationError);
    CHECK_THROWS_AS(loss_and_grads(model, adapters, {}, 1.0, 1.0, nullptr), ValidationError);

    // determinism: repeated evaluation is bit-identical
    const auto l1 = loss_and_grads(model, adapters, ds.train, 1.0, 1.0, nullptr);
    const auto l2 = loss_and_grads(model, adapters, ds.train, 1.0, 1.0, nullptr);
    CHECK(l1.l_total == l2.l_total);

    // a pair with identical questions contributes zero consistency loss
    auto ex = ds.train[0];
    ex.question_para = ex.question_orig;
    const auto same = loss_and_grads(model, adapters, {ex}, 1.0, 1.0, nullptr);
    CHECK(same.l_cons == 0.0);
}

TEST_CASE("analytic adapter gradients match central finite differences") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    lora::LoraConfig lcfg;
    lcfg.rank = 2;
    lcfg.alpha = 4.0;
    lcfg.dropout = 0.0;
    lcfg.target_layers = {0, 1};
    lcfg.seed = 8;
    auto adapters = lora::init_adapters(model, lcfg);

    // move B off zero so both factors carry signal
    SplitMix64 rng(21);
    for (auto& [key, pair] : adapters.entries) {
        (void)key;
        for (double& v : pair.b.data) v = 0.05 * rng.normal();
    }

    const auto ds = generate_dataset(cfg, 3, 2, 44);
    const double lambda = 0.7, temp = 1.3;

    lora::AdapterGrads grads = lora::AdapterGrads::zeros_like(adapters);
    loss_and_grads(model, adapters, ds.train, lambda, temp, &grads);

    const double h = 1e-6;
    double worst = 0.0;
    for (auto& [key, pair] : adapters.entries) {
        const auto check_block = [&](Mat& param, const Mat& grad) {
            for (std::size_t i = 0; i < param.data.size(); ++i) {
                const double keep = param.data[i];
                param.data[i] = keep + h;
                const double up = loss_and_grads(model, adapters, ds.train, lambda, temp,
                                                 nullptr)
                                      .l_total;
                param.data[i] = keep - h;
                const double dn = loss_and_grads(model, adapters, ds.train, lambda, temp,
                                                 nullptr)
                                      .l_total;
                param.data[i] = keep;
                const double fd = (up - dn) / (2.0 * h);
                const double denom = std::max({std::abs(fd), std::abs(grad.data[i]), 1e-4});
                worst = std::max(worst, std::abs(fd - grad.data[i]) / denom);
            }
        };
        check_block(pair.a, grads.entries.at(key).a);
        check_block(pair.b, grads.entries.at(key).b);
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("gradients respect the dropout mask") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    lora::LoraConfig lcfg;
    lcfg.rank = 2;
    lcfg.alpha = 4.0;
    lcfg.dropout = 0.3;
    lcfg.target_layers = {0, 1};
    lcfg.seed = 9;
    auto adapters = lora::init_adapters(model, lcfg);
    SplitMix64 rng(22);
    for (auto& [key, pair] : adapters.entries) {
        (void)key;
        for (double& v : pair.b.data) v = 0.05 * rng.normal();
    }
    const auto ds = generate_dataset(cfg, 2, 2, 45);
    const DropoutPlan plan{0.3, 99, 4};

    lora::AdapterGrads grads = lora::AdapterGrads::zeros_like(adapters);
    const auto l = loss_and_grads(model, adapters, ds.train, 1.0, 1.0, &grads, &plan);
    // same plan, same loss, bit for bit
    const auto l2 = loss_and_grads(model, adapters, ds.train, 1.0, 1.0, nullptr, &plan);
    CHECK(l.l_total == l2.l_total);

    // finite differences against the identical mask
    const double h = 1e-6;
    double worst = 0.0;
    auto& first = adapters.entries.begin()->second;
    const auto& gfirst = grads.entries.begin()->second;
    for (std::size_t i = 0; i < 8; ++i) {
        const double keep = first.a.data[i];
        first.a.data[i] = keep + h;
        const double up = loss_and_grads(model, adapters, ds.train, 1.0, 1.0, nullptr, &plan).l_total;
        first.a.data[i] = keep - h;
        const double dn = loss_and_grads(model, adapters, ds.train, 1.0, 1.0, nullptr, &plan).l_total;
        first.a.data[i] = keep;
        const double fd = (up - dn) / (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(gfirst.a.data[i]), 1e-4});
        worst = std::max(worst, std::abs(fd - gfirst.a.data[i]) / denom);
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("examples_to_eval_records bridges into metrics") {
    const ToyConfig cfg;
    const auto model = build_toy_model(cfg);
    const auto ds = generate_dataset(cfg, 4, 6, 77);
    const auto recs = examples_to_eval_records(model, ds.eval);
    REQUIRE(recs.size() == 6);
    for (const auto& r : recs) {
        CHECK(r.ground_truth != records::GroundTruth::None);
        CHECK(r.similarity.has_value());
        CHECK(*r.similarity > 0.95);
        CHECK(r.response_orig.has_value());
        const double m = r.logit_yes_orig - r.logit_no_orig;
        CHECK((m >= 0) == (*r.response_orig == "Yes."));
    }
}
