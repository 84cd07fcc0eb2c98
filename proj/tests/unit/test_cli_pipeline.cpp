#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "conlab/manifest.hpp"
#include "conlab/report.hpp"

using namespace conlab;
namespace fs = std::filesystem;

namespace {

const std::string kFixtureDir = CONLAB_FIXTURE_DIR;

std::string cli_path() {
    const char* env = std::getenv("CONLAB_CLI");
    return env ? env : "";
}

int run_cli(const std::string& args) {
    const int rc = std::system((cli_path() + " " + args).c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("conlab_cli_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("cli is wired into the test environment") {
    REQUIRE(!cli_path().empty());
    REQUIRE(fs::exists(cli_path()));
}

TEST_CASE("no arguments prints usage and exits 1") {
    CHECK(run_cli("> /dev/null 2>&1") == 1);
    CHECK(run_cli("definitely-not-a-command > /dev/null 2>&1") == 1);
}

TEST_CASE("eval on the packaged baseline fixture") {
    TempDir tmp;
    const auto out = tmp / "baseline.report.json";
    const int rc = run_cli("eval --records " + kFixtureDir + "/baseline_eval.jsonl --out " + out +
                           " > " + (tmp / "stdout.txt"));
    REQUIRE(rc == 0);

    const auto stdout_text = slurp(tmp / "stdout.txt");
    CHECK(stdout_text.find("14.6%") != std::string::npos);

    const auto rep = nlohmann::json::parse(slurp(out));
    CHECK(rep.at("n_flipped_pairs").get<std::size_t>() == 23);
    CHECK(rep.at("n_correct").get<std::size_t>() == 133);

    // every run with artifacts records a manifest
    const auto m = manifest::read_manifest(out + ".manifest.json");
    CHECK(m.command == "eval");
    CHECK(m.tool_version == std::string(kToolVersion));
}

TEST_CASE("eval reruns are byte-identical (replay determinism)") {
    TempDir tmp;
    const auto out1 = tmp / "a.report.json";
    const auto out2 = tmp / "b.report.json";
    REQUIRE(run_cli("eval --records " + kFixtureDir + "/baseline_eval.jsonl --out " + out1 +
                    " > /dev/null") == 0);
    REQUIRE(run_cli("eval --records " + kFixtureDir + "/baseline_eval.jsonl --out " + out2 +
                    " > /dev/null") == 0);
    CHECK(slurp(out1) == slurp(out2));
}

TEST_CASE("stats subcommands print StatResult JSON") {
    TempDir tmp;
    REQUIRE(run_cli("stats ztest 23 158 7 158 --one-tailed --continuity > " +
                    (tmp / "z.json")) == 0);
    const auto z = nlohmann::json::parse(slurp(tmp / "z.json"));
    CHECK(z.at("statistic").get<double>() == doctest::Approx(2.87).epsilon(0.01));
    CHECK(z.at("convention").get<std::string>().find("continuity") != std::string::npos);

    REQUIRE(run_cli("stats fisher 3 27 0 300 --one-tailed > " + (tmp / "f.json")) == 0);
    const auto f = nlohmann::json::parse(slurp(tmp / "f.json"));
    CHECK(f.at("p_value").get<double>() == doctest::Approx(6.8e-4).epsilon(0.02));

    // invalid counts are a validation error: exit 1
    CHECK(run_cli("stats ztest 5 0 1 10 > /dev/null 2>&1") == 1);
}

TEST_CASE("toy pipeline: gen, eval, export, flipbank, patch, report") {
    TempDir tmp;
    const auto cfg = tmp / "toy.json";
    const auto train = tmp / "train.jsonl";
    const auto evalset = tmp / "eval.jsonl";

    REQUIRE(run_cli("toy build --out " + cfg + " > /dev/null") == 0);
    REQUIRE(run_cli("toy gen --toy-config " + cfg + " --n-train 20 --n-eval 30 --seed 5"
                    " --out-train " + train + " --out-eval " + evalset + " > /dev/null") == 0);

    const auto recs = tmp / "records.jsonl";
    const auto rep = tmp / "toy.report.json";
    REQUIRE(run_cli("toy eval --toy-config " + cfg + " --dataset " + evalset + " --out " + recs +
                    " --report " + rep + " > /dev/null") == 0);
    const auto report = nlohmann::json::parse(slurp(rep));
    CHECK(report.at("n_pairs").get<std::size_t>() == 30);

    // flipbank consumes toy output unchanged
    REQUIRE(run_cli("flipbank --records " + recs + " --out " + (tmp / "fb.jsonl") +
                    " > /dev/null") == 0);

    // ACTV export + SAE validation round
    const auto sae_orig = tmp / "orig.actv";
    const auto sae_para = tmp / "para.actv";
    REQUIRE(run_cli("toy export-acts --toy-config " + cfg + " --dataset " + evalset +
                    " --layer 3 --out-orig " + sae_orig + " --out-para " + sae_para +
                    " > /dev/null") == 0);
    CHECK(fs::exists(sae_orig));

    // patch with the built-in analytic SAE
    REQUIRE(run_cli("patch --toy-config " + cfg + " --dataset " + evalset +
                    " --pair-index 0 --layer 0 --features 7,23 --out " + (tmp / "patch.json") +
                    " > /dev/null") == 0);
    const auto patch = nlohmann::json::parse(slurp(tmp / "patch.json"));
    CHECK(patch.contains("m_patched"));

    // report assembly over the eval manifest
    REQUIRE(run_cli("report --manifests " + recs + ".manifest.json --no-timestamp --out " +
                    (tmp / "audit.md") + " > /dev/null") == 0);
    const auto audit = slurp(tmp / "audit.md");
    CHECK(audit.find("Metric audit") != std::string::npos);
    CHECK(audit.find("Flip rate") != std::string::npos);
}

TEST_CASE("report command errors") {
    TempDir tmp;
    CHECK(run_cli("report --manifests " + (tmp / "missing.json") + " > /dev/null 2>&1") == 1);

    // manifest referencing a missing artifact names the path
    manifest::RunManifest m;
    m.command = "eval";
    m.config_snapshot = nlohmann::json::object();
    m.artifact_paths = {tmp / "ghost.report.json"};
    manifest::write_manifest(tmp / "m.json", m);
    CHECK_THROWS_WITH_AS(report::assemble({tmp / "m.json"}, false),
                         doctest::Contains("ghost.report.json"), ValidationError);
}
