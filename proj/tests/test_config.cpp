#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dosfl/runner.hpp"

using namespace dosfl;

TEST_CASE("shipped mnist profile carries the documented defaults") {
    ExperimentConfig cfg = validate_and_load("mnist-10client-iid");
    CHECK(cfg.federation.distill.distill_steps == 30);
    CHECK(cfg.federation.distill.distill_epochs == 3);
    CHECK(cfg.federation.distill.eta0 == 0.02);
    CHECK(cfg.federation.distill.alpha == 0.01);
    CHECK(cfg.federation.distill.tau == 40);
    CHECK(cfg.federation.distill.epochs == 30);
    CHECK(cfg.federation.distill.batch == 512);
    CHECK(cfg.federation.distill.distill_batch == 10);
    CHECK(cfg.federation.clients == 10);

    ExperimentConfig alt = validate_and_load("mnist-10client-iid-bd40");
    CHECK(alt.federation.distill.distill_batch == 40);
}

TEST_CASE("out-of-range values name the offending key path") {
    Json j = Json::parse(R"({"seed": 1, "distill": {"p_rm": 1.5}})");
    try {
        validate_config(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("distill.p_rm") != std::string::npos);
    }
}

TEST_CASE("missing seed is a validation error") {
    Json j = Json::parse(R"({"task": {"id": "blobs"}})");
    CHECK_THROWS_AS(validate_config(j), ConfigError);
}

TEST_CASE("unknown keys are rejected with their path") {
    Json j = Json::parse(R"({"seed": 1, "task": {"id": "blobs", "seperation": 2.0}})");
    try {
        validate_config(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("task.seperation") != std::string::npos);
    }
    Json top = Json::parse(R"({"seed": 1, "distil": {}})");
    CHECK_THROWS_AS(validate_config(top), ConfigError);
}

TEST_CASE("config round-trip: serialize(validate(f)) parses to an equal config") {
    ExperimentConfig cfg = validate_and_load("blobs-smoke");
    Json echo = config_to_json(cfg);
    ExperimentConfig cfg2 = validate_config(echo);
    CHECK(config_to_json(cfg2) == echo);
}

TEST_CASE("bundles reproduce byte-identical manifests, rerun after rerun") {
    ExperimentConfig cfg = validate_and_load("blobs-smoke");
    cfg.federation.distill.epochs = 3; // keep the unit test quick
    run_subcommand(cfg, "dosfl", "/tmp/dosfl_bundle_a");
    run_subcommand(cfg, "dosfl", "/tmp/dosfl_bundle_b");
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    const std::string a = slurp("/tmp/dosfl_bundle_a/manifest.json");
    const std::string b = slurp("/tmp/dosfl_bundle_b/manifest.json");
    CHECK(!a.empty());
    CHECK(a == b);
    std::filesystem::remove_all("/tmp/dosfl_bundle_a");
    std::filesystem::remove_all("/tmp/dosfl_bundle_b");
}

TEST_CASE("distilled json export carries base64 payloads for every step") {
    DistillConfig dc;
    dc.distill_steps = 2;
    dc.distill_batch = 2;
    const auto arch = ArchitectureSpec::mlp(3, {}, 2);
    auto ds = init_distill_state<float>(dc, arch, {0, 1}, 4);
    auto j = distilled_to_json(ds);
    CHECK(j["steps"].size() == 2);
    CHECK(j["steps"][0].contains("x_b64"));
    CHECK(j["steps"][0].contains("y_b64"));
    CHECK(j["steps"][0]["eta"].get<double>() == doctest::Approx(dc.eta0));
}

TEST_CASE("cost bundle reproduces the break-even table") {
    ExperimentConfig cfg = validate_and_load("blobs-smoke");
    run_subcommand(cfg, "cost", "/tmp/dosfl_bundle_cost");
    std::ifstream f("/tmp/dosfl_bundle_cost/table3.csv");
    std::string line, all;
    while (std::getline(f, line)) all += line + "\n";
    CHECK(all.find("mnist,lenet,784,10,30,10,0.10,61706,19.83,19.83") != std::string::npos);
    CHECK(all.find(",eq5") != std::string::npos);
    CHECK(all.find(",raw") != std::string::npos);
    std::filesystem::remove_all("/tmp/dosfl_bundle_cost");
}
