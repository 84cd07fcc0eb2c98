#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "conlab/lora.hpp"
#include "conlab/toymodel.hpp"

using namespace conlab;
using namespace conlab::lora;
using namespace conlab::toymodel;

namespace {

ToyConfig small_config() {
    ToyConfig cfg;
    cfg.hidden_dim = 8;
    cfg.n_layers = 2;
    cfg.register_channel = 3;
    cfg.seed = 555;
    return cfg;
}

LoraConfig small_lora(std::size_t layers) {
    LoraConfig cfg;
    cfg.rank = 2;
    cfg.alpha = 4.0;
    cfg.dropout = 0.0;
    for (std::size_t i = 0; i < layers; ++i) cfg.target_layers.insert(i);
    cfg.seed = 77;
    return cfg;
}

TrainConfig quick_train(std::uint64_t seed) {
    TrainConfig t;
    t.learning_rate = 0.02;
    t.warmup_steps = 5;
    t.effective_batch = 8;
    t.epochs = 2;
    t.weight_decay = 0.01;
    t.lambda = 1.0;
    t.seed = seed;
    return t;
}

Mat effective_delta(const AdapterPair& p, double scale) {
    Mat d(p.b.rows, p.a.cols);
    for (std::size_t r = 0; r < d.rows; ++r)
        for (std::size_t c = 0; c < d.cols; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < p.a.rows; ++k) acc += p.b(r, k) * p.a(k, c);
            d(r, c) = scale * acc;
        }
    return d;
}

}  // namespace

TEST_CASE("init_adapters: B = 0 makes the adapter a no-op") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto adapters = init_adapters(model, small_lora(2));

    const auto ds = generate_dataset(cfg, 2, 100, 4);
    double max_diff = 0.0;
    for (const auto& ex : ds.eval) {
        const auto base = forward(model, ex.image_feat, ex.question_orig);
        const auto with = forward(model, ex.image_feat, ex.question_orig, &adapters);
        max_diff = std::max(max_diff, std::abs(base.z_yes - with.z_yes));
        max_diff = std::max(max_diff, std::abs(base.z_no - with.z_no));
    }
    CHECK(max_diff == 0.0);
}

TEST_CASE("adapter accounting") {
    LoraConfig cfg;
    cfg.rank = 16;
    cfg.alpha = 32.0;
    cfg.target_layers = {0};
    LoraAdapterSet set;
    set.config = cfg;
    CHECK(set.scale() == doctest::Approx(2.0));

    // H=32, r=4, one layer, Mixer only: 4*32 + 32*4 = 256 trainable values
    ToyConfig tcfg;
    tcfg.seed = 1;
    const auto model = build_toy_model(tcfg);
    LoraConfig one;
    one.rank = 4;
    one.alpha = 8.0;
    one.target_layers = {0};
    one.target_modules = {TargetModule::Mixer};
    one.seed = 3;
    const auto adapters = init_adapters(model, one);
    CHECK(adapters.trainable_param_count() == 256);
}

TEST_CASE("config validation") {
    const auto model = build_toy_model(small_config());
    LoraConfig bad = small_lora(2);
    bad.target_modules.clear();
    CHECK_THROWS_AS(init_adapters(model, bad), ValidationError);
    bad = small_lora(2);
    bad.target_layers = {99};
    CHECK_THROWS_AS(init_adapters(model, bad), ValidationError);
    bad = small_lora(2);
    bad.rank = 0;
    CHECK_THROWS_AS(init_adapters(model, bad), ValidationError);
}

TEST_CASE("effective delta is linear in B") {
    const auto model = build_toy_model(small_config());
    auto adapters = init_adapters(model, small_lora(2));
    SplitMix64 rng(6);
    for (auto& [key, pair] : adapters.entries) {
        (void)key;
        for (double& v : pair.b.data) v = rng.normal();
    }
    const double c = 3.25;
    for (auto& [key, pair] : adapters.entries) {
        const Mat before = effective_delta(pair, adapters.scale());
        AdapterPair scaled = pair;
        for (double& v : scaled.b.data) v *= c;
        const Mat after = effective_delta(scaled, adapters.scale());
        for (std::size_t i = 0; i < before.data.size(); ++i) {
            CHECK(after.data[i] == doctest::Approx(c * before.data[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("detect_mode_collapse") {
    using records::Label;
    const auto all_yes = detect_mode_collapse(std::vector<Label>(50, Label::Yes));
    CHECK(all_yes.flag);
    CHECK(all_yes.majority_fraction == 1.0);

    // the balanced 76/82 split stays unflagged
    std::vector<Label> balanced(76, Label::Yes);
    balanced.insert(balanced.end(), 82, Label::No);
    const auto ok = detect_mode_collapse(balanced);
    CHECK_FALSE(ok.flag);
    CHECK(ok.majority_fraction == doctest::Approx(82.0 / 158.0));

    // boundary is inclusive: 95 of 100 at threshold 0.95
    std::vector<Label> edge(95, Label::No);
    edge.insert(edge.end(), 5, Label::Yes);
    CHECK(detect_mode_collapse(edge, 0.95).flag);

    CHECK_THROWS_AS(detect_mode_collapse({}, 0.95), ValidationError);
    CHECK_THROWS_AS(detect_mode_collapse(balanced, 0.4), ValidationError);
    CHECK_THROWS_AS(detect_mode_collapse({Label::Ambiguous}, 0.95), ValidationError);
}

TEST_CASE("train: zero epochs returns adapters unchanged and baseline eval") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto ds = generate_dataset(cfg, 16, 16, 10);
    auto tcfg = quick_train(1);
    tcfg.epochs = 0;

    auto adapters = init_adapters(model, small_lora(2));
    const auto before = adapters;
    const auto [after, log] = train(model, std::move(adapters), ds.train, ds.eval, tcfg);
    for (const auto& [key, pair] : after.entries) {
        CHECK(pair.a.data == before.entries.at(key).a.data);
        CHECK(pair.b.data == before.entries.at(key).b.data);
    }
    const auto base_report = metrics::evaluate(examples_to_eval_records(model, ds.eval));
    CHECK(log.final_eval.mean_margin_diff == base_report.mean_margin_diff);
    CHECK(log.steps.empty());
}

TEST_CASE("train: lambda = 0 keeps L_total == L_cons in every row; warmup contract holds") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto ds = generate_dataset(cfg, 24, 16, 11);
    auto tcfg = quick_train(2);
    tcfg.lambda = 0.0;
    tcfg.epochs = 3;

    auto adapters = init_adapters(model, small_lora(2));
    const auto [after, log] = train(model, std::move(adapters), ds.train, ds.eval, tcfg);
    REQUIRE(!log.steps.empty());
    for (const auto& row : log.steps) {
        CHECK(row.l_total == row.l_cons);
        const double expected_lr =
            tcfg.learning_rate *
            std::min(1.0, static_cast<double>(row.step) / static_cast<double>(tcfg.warmup_steps));
        CHECK(row.lr == doctest::Approx(expected_lr).epsilon(1e-12));
        CHECK(row.step == (&row - log.steps.data()) + 1u);
    }
    // pure consistency training reduces the consistency loss
    CHECK(log.final_train_l_cons < log.initial_train_l_cons);
}

TEST_CASE("train is deterministic and rejects overlapping splits") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto ds = generate_dataset(cfg, 16, 12, 12);
    const auto tcfg = quick_train(3);

    const auto run = [&] {
        auto adapters = init_adapters(model, small_lora(2));
        return train(model, std::move(adapters), ds.train, ds.eval, tcfg);
    };
    const auto [a1, l1] = run();
    const auto [a2, l2] = run();
    for (const auto& [key, pair] : a1.entries) {
        CHECK(pair.a.data == a2.entries.at(key).a.data);
        CHECK(pair.b.data == a2.entries.at(key).b.data);
    }
    CHECK(l1.final_eval.mean_margin_diff == l2.final_eval.mean_margin_diff);

    // combined-loss training lowers the train-set consistency loss
    CHECK(l1.final_train_l_cons < l1.initial_train_l_cons);

    auto adapters = init_adapters(model, small_lora(2));
    CHECK_THROWS_AS(train(model, std::move(adapters), ds.train, ds.train, tcfg),
                    ValidationError);
}

TEST_CASE("divergent training aborts with the step number") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto ds = generate_dataset(cfg, 16, 8, 21);
    auto tcfg = quick_train(5);
    tcfg.learning_rate = 1e9;  // guaranteed blow-up
    tcfg.warmup_steps = 0;
    tcfg.epochs = 10;

    auto adapters = init_adapters(model, small_lora(2));
    try {
        train(model, std::move(adapters), ds.train, ds.eval, tcfg);
        FAIL("expected divergence");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("diverged at step") != std::string::npos);
    }
}

TEST_CASE("adapter save/load round-trips through the ACTV container") {
    const auto model = build_toy_model(small_config());
    auto adapters = init_adapters(model, small_lora(2));
    SplitMix64 rng(14);
    for (auto& [key, pair] : adapters.entries) {
        (void)key;
        for (double& v : pair.b.data) v = rng.normal();
    }

    const auto dir = std::filesystem::temp_directory_path() / "conlab_adapters";
    std::filesystem::create_directories(dir);
    const auto manifest = (dir / "adapters.json").string();
    save_adapters(manifest, adapters);
    const auto back = load_adapters(manifest);

    REQUIRE(back.entries.size() == adapters.entries.size());
    for (const auto& [key, pair] : adapters.entries) {
        const auto& rp = back.entries.at(key);
        // values pass through f32, so compare at that precision
        for (std::size_t i = 0; i < pair.a.data.size(); ++i) {
            CHECK(static_cast<float>(pair.a.data[i]) == static_cast<float>(rp.a.data[i]));
        }
    }
    CHECK(back.config.rank == adapters.config.rank);
    std::filesystem::remove_all(dir);
}

TEST_CASE("ablate_layers: rows, errors, determinism") {
    const auto cfg = small_config();
    const auto model = build_toy_model(cfg);
    const auto ds = generate_dataset(cfg, 16, 12, 13);
    auto tcfg = quick_train(4);
    tcfg.epochs = 1;
    auto lcfg = small_lora(1);

    // empty range list: baseline-only table
    const auto base_only = ablate_layers(model, ds.train, ds.eval, {}, lcfg, tcfg);
    REQUIRE(base_only.size() == 1);
    CHECK(base_only[0].name == "baseline");
    CHECK_FALSE(base_only[0].reduction_percent.has_value());
    CHECK(base_only[0].param_count == 0);

    std::vector<AblationRange> dup = {{"x", {0}}, {"x", {1}}};
    CHECK_THROWS_AS(ablate_layers(model, ds.train, ds.eval, dup, lcfg, tcfg), ValidationError);

    const std::vector<AblationRange> ranges = {{"early", {0}}, {"late", {1}}};
    const auto rows1 = ablate_layers(model, ds.train, ds.eval, ranges, lcfg, tcfg);
    const auto rows2 = ablate_layers(model, ds.train, ds.eval, ranges, lcfg, tcfg);
    REQUIRE(rows1.size() == 3);
    for (std::size_t i = 0; i < rows1.size(); ++i) {
        CHECK(rows1[i].name == rows2[i].name);
        CHECK(rows1[i].mean_margin_diff == rows2[i].mean_margin_diff);
    }
    CHECK(rows1[1].param_count == 4 * (2 * 2 * 8));  // 4 modules, rank 2, H=8
}
