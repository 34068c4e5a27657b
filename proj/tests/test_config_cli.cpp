// SPDX-License-Identifier: Apache-2.0

#include "generators.hpp"
#include "msp/config.hpp"

#include <doctest.h>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>

#include <sys/wait.h>

using namespace msp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kToy = fs::path(MSP_CONFIG_DIR) / "toy.json";

// Shrinks the toy config so each command finishes in a few seconds.
const std::vector<std::string> kFast = {
    "corpus.n_images=28",    "corpus.n_test=12",         "model.hidden_size=16",
    "model.num_heads=2",     "model.num_xlayers=1",      "model.ffn_size=32",
    "plan.stages.0.epochs=1", "plan.stages.1.epochs=1",  "plan.stages.2.epochs=1",
    "finetune.epochs=1",
};

struct CliResult {
    int status = 0;
    std::string output;
};

CliResult run_cli(const std::string& command, const fs::path& out, const std::vector<std::string>& overrides = kFast,
                  const fs::path& config = kToy, const std::string& extra = "") {
    std::string cmd = fmt::format("MSP_LOG_LEVEL=error '{}' {} --config '{}' --out '{}'", MSP_CLI_PATH, command,
                                  config.string(), out.string());
    for (const auto& o : overrides) cmd += fmt::format(" --override '{}'", o);
    cmd += " " + extra;
    const fs::path log = out.string() + ".stdout";
    cmd += fmt::format(" > '{}' 2>&1", log.string());
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.output = fs::exists(log) ? read_file(log) : "";
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("msp_cli_" + name);
    fs::remove_all(d);
    return d;
}

json manifest(const fs::path& out, const std::string& command) {
    return json::parse(read_file(out / (command + ".manifest.json")));
}

} // namespace

TEST_CASE("config: named-key errors") {
    CHECK_THROWS_WITH(parse_run_config(R"({"model": {}})"), "config: missing required key 'seed'");
    CHECK_THROWS_WITH(parse_run_config(R"({"seed": 1, "model": {"hidden": 4}})"), "config: unknown key 'model.hidden'");
    CHECK_THROWS_WITH(parse_run_config(R"({"seed": 1, "model": {"hidden_size": "wide"}})"),
                      "config: key 'model.hidden_size' has the wrong type");
    CHECK_THROWS_WITH(parse_run_config("{seed: 1"), "config: not valid JSON");
    CHECK_THROWS_WITH(parse_run_config(R"({"seed": 1, "plan": {"stages": [{"epochs": 2}]}})"),
                      doctest::Contains("granularity"));
    CHECK_THROWS_WITH(parse_run_config(R"({"seed": 1, "finetune": {"task": "captioning"}})"),
                      doctest::Contains("finetune.task must be"));
    CHECK_THROWS_WITH(parse_run_config(R"({"seed": 1, "ablation": {"rows": ["S -QA"]}})"), doctest::Contains("unknown task"));
}

TEST_CASE("config: defaults") {
    const RunConfig c = parse_run_config(R"({"seed": 42})");
    CHECK(c.seed == 42);
    CHECK(c.plan.stages == default_plan().stages);
    CHECK(c.plan.seed == 42);
    CHECK(c.corpus.synthetic.seed == 42);
    CHECK(c.finetune.task == "classification");
    CHECK(c.finetune.config.learning_rate == 5e-5);
    CHECK(c.finetune.config.batch_size == 32);
    CHECK(c.ablation.rows == reference_grid());

    const RunConfig r = parse_run_config(R"({"seed": 1, "finetune": {"task": "retrieval"}})");
    CHECK(r.finetune.config.epochs == 8);
}

TEST_CASE("config: overrides") {
    const std::vector<std::string> ov = {"model.hidden_size=64", "plan.stages.0.epochs=3", "paths.corpus=data/c.jsonl",
                                         "weights.ITM_HS=2.5", "transforms.replace_rate=0.25"};
    const RunConfig c = parse_run_config(read_file(kToy), ov);
    CHECK(c.model.hidden_size == 64);
    CHECK(c.plan.stages[0].epochs == 3);
    CHECK(c.paths.corpus.filename() == "c.jsonl");
    CHECK(c.weights[Task::ITM_HS] == 2.5);
    CHECK(c.transforms.replace_rate == 0.25);
    const std::vector<std::string> bad = {"model.hidden_size"};
    CHECK_THROWS(parse_run_config(read_file(kToy), bad));
    const std::vector<std::string> unknown = {"model.depth=3"};
    CHECK_THROWS_WITH(parse_run_config(read_file(kToy), unknown), "config: unknown key 'model.depth'");
}

TEST_CASE("config: serialized snapshot reads back to the same config") {
    const RunConfig c = parse_run_config(read_file(kToy), kFast);
    const std::string once = run_config_to_json(c);
    CHECK(run_config_to_json(parse_run_config(once)) == once);
}

TEST_CASE("cli: generate and pretrain are idempotent") {
    const fs::path a = fresh_dir("idem_a"), b = fresh_dir("idem_b");
    for (const auto& out : {a, b}) {
        REQUIRE(run_cli("generate", out).status == 0);
        REQUIRE(run_cli("pretrain", out).status == 0);
    }
    CHECK(file_digest(a / "corpus.jsonl") == file_digest(b / "corpus.jsonl"));
    CHECK(file_digest(a / "pretrained.ckpt") == file_digest(b / "pretrained.ckpt"));
    CHECK(file_digest(a / "pretrain_log.jsonl") == file_digest(b / "pretrain_log.jsonl"));

    const json m = manifest(a, "pretrain");
    CHECK(m["status"] == "ok");
    CHECK(m["seed"] == 7);
    CHECK(m["formats"]["checkpoint"] == kCheckpointVersion);
    CHECK(m["outputs"]["checkpoint"]["digest"] == file_digest(a / "pretrained.ckpt"));
    CHECK(m["config"]["model"]["hidden_size"] == 16);

    const fs::path c = fresh_dir("idem_c");
    REQUIRE(run_cli("generate", c).status == 0);
    REQUIRE(run_cli("pretrain", c, kFast, kToy, "--seed 8").status == 0);
    CHECK(file_digest(c / "pretrained.ckpt") != file_digest(a / "pretrained.ckpt"));
    CHECK(manifest(c, "pretrain")["seed"] == 8);
}

TEST_CASE("cli: finetune, evaluate and ablate write their reports") {
    const fs::path out = fresh_dir("flow");
    REQUIRE(run_cli("generate", out).status == 0);
    REQUIRE(run_cli("pretrain", out).status == 0);
    REQUIRE(run_cli("finetune", out).status == 0);
    CHECK(fs::exists(out / "finetuned_retrieval.ckpt"));

    auto ev = kFast;
    ev.push_back(fmt::format("paths.checkpoint={}", (out / "finetuned_retrieval.ckpt").string()));
    const auto r = run_cli("evaluate", out, ev);
    REQUIRE(r.status == 0);
    const std::string csv = read_file(out / "reports" / "metrics.csv");
    CHECK(csv.rfind("config,accuracy,IR@1,IR@5,IR@10,TR@1,TR@5,TR@10\n", 0) == 0);
    CHECK(csv.find("finetuned_retrieval,-,") != std::string::npos);

    auto ab = kFast;
    ab.push_back(R"(ablation.rows=["vanilla","S - ITM_HS","P->S"])");
    REQUIRE(run_cli("ablate", out, ab).status == 0);
    const std::string table = read_file(out / "reports" / "ablation.csv");
    CHECK(std::count(table.begin(), table.end(), '\n') == 4);
    CHECK(table.find("\nS -ITM_HS,") != std::string::npos);
}

TEST_CASE("cli: failures exit nonzero and still write a manifest") {
    SUBCASE("missing checkpoint") {
        const fs::path out = fresh_dir("fail_ckpt");
        REQUIRE(run_cli("generate", out).status == 0);
        const auto r = run_cli("evaluate", out);
        CHECK(r.status != 0);
        const json m = manifest(out, "evaluate");
        CHECK(m["status"] == "failed");
        CHECK(m["failed_stage"] == "load checkpoint");
        CHECK(m["error"].get<std::string>().find("does not exist") != std::string::npos);
    }
    SUBCASE("checkpoint/config mismatch") {
        const fs::path out = fresh_dir("fail_mismatch");
        REQUIRE(run_cli("generate", out).status == 0);
        REQUIRE(run_cli("pretrain", out).status == 0);
        auto other = kFast;
        other.push_back("corpus.d_roi=8");
        other.push_back(fmt::format("paths.corpus={}", (out / "other.jsonl").string()));
        REQUIRE(run_cli("generate", out, other).status == 0);
        other.push_back(fmt::format("paths.checkpoint={}", (out / "pretrained.ckpt").string()));
        const auto r = run_cli("evaluate", out, other);
        CHECK(r.status != 0);
        CHECK(manifest(out, "evaluate")["error"].get<std::string>().find("checkpoint/config mismatch") != std::string::npos);
    }
    SUBCASE("missing config key") {
        const fs::path out = fresh_dir("fail_key");
        fs::create_directories(out);
        const fs::path cfg = out / "noseed.json";
        write_file(cfg, R"({"model": {"hidden_size": 16}})");
        const auto r = run_cli("generate", out, {}, cfg);
        CHECK(r.status != 0);
        CHECK(r.output.find("missing required key 'seed'") != std::string::npos);
        const json m = manifest(out, "generate");
        CHECK(m["failed_stage"] == "config");
    }
    SUBCASE("unknown subcommand") {
        const fs::path out = fresh_dir("fail_cmd");
        CHECK(run_cli("train", out).status != 0);
    }
}

TEST_CASE("cli: verify on the toy config passes") {
    const fs::path out = fresh_dir("verify");
    const auto r = run_cli("verify", out, {});
    CHECK(r.status == 0);
    CHECK(r.output.find("FAIL") == std::string::npos);
    const json report = json::parse(read_file(out / "reports" / "verify.json"));
    CHECK(report["passed"] == true);
    CHECK(report["checks"].size() > 20);
    CHECK(manifest(out, "verify")["status"] == "ok");
}
