#include <CLI11.hpp>
#include <json.hpp>

#include <exception>
#include <iostream>
#include <string>

#include "dosfl/runner.hpp"

// dosfl: simulator and analysis toolkit for distilled one-shot federated
// learning. Subcommands: distill, dosfl, lp-dosfl, fedavg, cost, attack,
// sweep. Errors leave machine-readable JSON on stderr and a nonzero exit.

namespace {

int dispatch(const std::string& sub, const std::string& config_path, const std::string& out,
             bool has_seed, uint64_t seed, int64_t workers, int precision) {
    dosfl::ExperimentConfig cfg = dosfl::validate_and_load(config_path);
    if (has_seed) {
        cfg.seed = seed;
        cfg.federation.seed = seed;
    }
    if (workers >= 0) cfg.federation.workers = workers;
    if (precision != 0) {
        if (precision != 32 && precision != 64)
            throw dosfl::ConfigError("--precision must be 32 or 64");
        cfg.precision = precision;
    }
    const std::string outdir = out.empty() ? cfg.out + "/" + sub : out;
    dosfl::run_subcommand(cfg, sub, outdir);
    std::cout << "bundle written to " << outdir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"distilled one-shot federated learning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out;
    uint64_t seed = 0;
    bool has_seed = false;
    int64_t workers = -1;
    int precision = 0;

    for (const std::string& name : dosfl::all_subcommands()) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "config file path or built-in profile name")
            ->required();
        sub->add_option("--out", out, "output directory (default: <config.out>/<subcommand>)");
        sub->add_option("--seed", seed, "override the config seed")
            ->each([&has_seed](const std::string&) { has_seed = true; });
        sub->add_option("--workers", workers, "parallel client limit (0: hardware)");
        sub->add_option("--precision", precision, "scalar precision: 32 or 64");
    }

    CLI11_PARSE(app, argc, argv);

    const auto fail = [](const char* type, const char* what) {
        nlohmann::ordered_json err;
        err["error"] = {{"type", type}, {"message", what}};
        std::cerr << err.dump() << "\n";
        return 1;
    };
    try {
        return dispatch(app.get_subcommands().front()->get_name(), config_path, out, has_seed,
                        seed, workers, precision);
    } catch (const dosfl::ConfigError& e) {
        return fail("config", e.what());
    } catch (const dosfl::IngestionError& e) {
        return fail("ingestion", e.what());
    } catch (const dosfl::DivergenceError& e) {
        return fail("divergence", e.what());
    } catch (const dosfl::MergeError& e) {
        return fail("merge", e.what());
    } catch (const dosfl::ContractViolation& e) {
        return fail("contract", e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
}
