#include <doctest.h>

#include <cmath>

#include "conlab/patching.hpp"

using namespace conlab;
using namespace conlab::patching;
using namespace conlab::toymodel;

namespace {

ToyConfig patch_config() {
    ToyConfig cfg;
    cfg.hidden_dim = 16;
    cfg.n_layers = 4;
    cfg.register_channel = 5;
    cfg.seed = 2024;
    return cfg;
}

// Register-only pair: identical image and style, flipped register.
std::pair<PatchInput, PatchInput> register_pair(const ToyConfig& cfg, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Vec img(kImageDim);
    img[0] = kSignalMu + cfg.noise_sd * rng.normal();
    for (std::size_t i = 1; i < kImageDim; ++i) img[i] = cfg.noise_sd * rng.normal();
    QFeat q;
    q.finding_id = 1;
    q.register_form = Register::Presence;
    q.style_noise.resize(kStyleDim);
    for (double& v : q.style_noise) v = kStyleSd * rng.normal();
    QFeat qp = q;
    qp.register_form = Register::Exclusion;
    return {PatchInput{img, q}, PatchInput{img, qp}};
}

}  // namespace

TEST_CASE("recovery arithmetic of the exemplar case") {
    CHECK(recovery_fraction(8.75, -0.625, 2.0) == doctest::Approx(0.28));
    // two-decimal report value is exact
    CHECK(round_to(recovery_fraction(8.75, -0.625, 2.0), 2) == 0.28);
}

TEST_CASE("full-feature patch restores the original margin exactly") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);
    const auto [orig, para] = register_pair(cfg, 3);

    PatchSpec spec;
    for (std::size_t f = 0; f < sae_w.feature_count; ++f) spec.feature_ids.insert(f);

    for (std::size_t layer : {std::size_t{0}, std::size_t{2}, cfg.n_layers}) {
        spec.layer = layer;
        const auto r = patch_margin(model, sae_w, spec, orig, para);
        REQUIRE(r.recovery.has_value());
        CHECK(std::abs(*r.recovery - 1.0) < 1e-6);
        CHECK(r.m_patched == doctest::Approx(r.m_orig).epsilon(1e-9));
    }
}

TEST_CASE("register-feature patch at the plant layer recovers the margin") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto [orig, para] = register_pair(cfg, seed);
        PatchSpec spec;
        spec.layer = 0;  // plant layer: the whole delta is the register direction
        spec.feature_ids = {cfg.register_channel, cfg.hidden_dim + cfg.register_channel};
        const auto r = patch_margin(model, sae_w, spec, orig, para);
        REQUIRE(r.recovery.has_value());
        CHECK(*r.recovery >= 0.8);
        // full-swap oracle: replacing h_para by h_orig recovers everything,
        // and at layer 0 the register atoms carry the entire delta
        CHECK(*r.recovery == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("register-only pairs rank a register atom first in the feature delta") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);
    for (std::uint64_t seed = 20; seed < 26; ++seed) {
        const auto [orig, para] = register_pair(cfg, seed);
        const auto to_ = forward(model, orig.image_feat, orig.question);
        const auto tp_ = forward(model, para.image_feat, para.question);
        const auto d = sae::feature_delta(to_.residuals[0], tp_.residuals[0], sae_w, 3);
        REQUIRE(!d.top_k.empty());
        const std::size_t top = d.top_k[0].first;
        const bool is_register_atom =
            top == cfg.register_channel || top == cfg.hidden_dim + cfg.register_channel;
        CHECK(is_register_atom);
    }
}

TEST_CASE("null patch leaves the downstream pass bit-identical") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);
    const auto [orig, para] = register_pair(cfg, 7);

    // at layer 0 only the register channel differs; any other feature has
    // exactly zero delta
    PatchSpec spec;
    spec.layer = 0;
    spec.feature_ids = {0, 1, 2, cfg.hidden_dim + 1};
    const auto r = patch_margin(model, sae_w, spec, orig, para);
    const auto plain = forward(model, para.image_feat, para.question);
    CHECK(r.m_patched == plain.margin());
    REQUIRE(r.recovery.has_value());
    CHECK(*r.recovery == 0.0);
}

TEST_CASE("patch direction is additive over disjoint feature sets") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);
    const auto [orig, para] = register_pair(cfg, 9);

    const auto trace_o = forward(model, orig.image_feat, orig.question);
    const auto trace_p = forward(model, para.image_feat, para.question);
    const std::size_t layer = 2;
    const Vec fo = sae::encode(trace_o.residuals[layer], sae_w);
    const Vec fp = sae::encode(trace_p.residuals[layer], sae_w);

    const auto direction = [&](const std::set<std::size_t>& ids) {
        Vec masked(sae_w.feature_count, 0.0);
        for (std::size_t f : ids) masked[f] = fo[f] - fp[f];
        return sae::decode(masked, sae_w);
    };
    const std::set<std::size_t> f1 = {0, 3, 17};
    const std::set<std::size_t> f2 = {5, 21, 30};
    std::set<std::size_t> both = f1;
    both.insert(f2.begin(), f2.end());

    const Vec d1 = direction(f1), d2 = direction(f2), d12 = direction(both);
    for (std::size_t i = 0; i < d12.size(); ++i) {
        CHECK(d12[i] == doctest::Approx(d1[i] + d2[i]).epsilon(1e-12));
    }
}

TEST_CASE("patch validation errors") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);
    const auto [orig, para] = register_pair(cfg, 11);

    PatchSpec spec;
    spec.layer = cfg.n_layers + 1;
    spec.feature_ids = {0};
    CHECK_THROWS_AS(patch_margin(model, sae_w, spec, orig, para), ValidationError);

    spec.layer = 0;
    spec.feature_ids = {};
    CHECK_THROWS_AS(patch_margin(model, sae_w, spec, orig, para), ValidationError);

    spec.feature_ids = {sae_w.feature_count + 3};
    CHECK_THROWS_AS(patch_margin(model, sae_w, spec, orig, para), ValidationError);
}

TEST_CASE("identical inputs report recovery as absent") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);
    const auto [orig, para] = register_pair(cfg, 13);

    PatchSpec spec;
    spec.layer = 1;
    spec.feature_ids = {0};
    const auto r = patch_margin(model, sae_w, spec, orig, orig);
    CHECK_FALSE(r.recovery.has_value());
    CHECK(r.m_orig == r.m_para);
}

TEST_CASE("control baseline: zero-delta controls and seeded determinism") {
    const auto cfg = patch_config();
    const auto model = build_toy_model(cfg);
    const auto sae_w = sae::make_signed_basis_sae(cfg.hidden_dim);
    const auto [orig, para] = register_pair(cfg, 15);

    // at layer 0, every feature except the two register atoms has zero delta
    const auto ctrl = control_patch_baseline(model, sae_w, 0, sae_w.feature_count - 2, 10, 42,
                                             orig, para);
    CHECK(ctrl.mean_recovery == 0.0);
    CHECK(ctrl.feature_ids.size() == 10);
    for (std::size_t f : ctrl.feature_ids) {
        CHECK(f != cfg.register_channel);
        CHECK(f != cfg.hidden_dim + cfg.register_channel);
    }

    const auto again = control_patch_baseline(model, sae_w, 0, sae_w.feature_count - 2, 10, 42,
                                              orig, para);
    CHECK(ctrl.feature_ids == again.feature_ids);
    CHECK(ctrl.mean_recovery == again.mean_recovery);

    CHECK_THROWS_AS(control_patch_baseline(model, sae_w, 0, 5, 10, 42, orig, para),
                    ValidationError);
}
