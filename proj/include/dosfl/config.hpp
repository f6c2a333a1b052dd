#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dosfl/cost_model.hpp"
#include "dosfl/federation.hpp"

namespace dosfl {

using Json = nlohmann::ordered_json;

// Dataset selection: a named source plus its knobs.
struct TaskConfig {
    std::string id = "glyphs"; // mnist | glyphs | blobs | idx
    std::string dir = "data/mnist";
    std::string train_images, train_labels, test_images, test_labels;
    int64_t train_limit = 0; // 0: all
    int64_t test_limit = 0;
    int64_t n_cls = 10;
    // blobs / glyphs
    int64_t count = 10000;
    int64_t test_count = 2000;
    int64_t dim = 2;
    int64_t classes = 2;
    double separation = 6.0;
};

struct ArchConfig {
    std::string id = "lenet-lite"; // mlp | lenet-lite | lenet
    std::vector<int64_t> hidden{100};
};

struct CostConfig {
    int64_t clients = 100;
    std::string participation = "0.1";
    int64_t rounds = 1;
};

struct AttackConfig {
    int64_t trials = 3;
    std::vector<double> k_values{0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
};

struct SweepConfig {
    std::string axis = "shards"; // shards | clients
    std::vector<int64_t> values;
};

// Fully-validated experiment description; the unit every subcommand consumes.
struct ExperimentConfig {
    uint64_t seed = 0;
    int precision = 32;
    std::string out = "results";
    TaskConfig task;
    ArchConfig arch;
    FederationConfig federation;
    CostConfig cost;
    AttackConfig attack;
    SweepConfig sweep;

    ArchitectureSpec arch_spec() const {
        const int64_t ncls = (task.id == "blobs") ? task.classes : task.n_cls;
        if (arch.id == "mlp") {
            const int64_t in = (task.id == "blobs") ? task.dim : 784;
            return ArchitectureSpec::mlp(in, arch.hidden, ncls);
        }
        if (arch.id == "lenet-lite") return ArchitectureSpec::lenet_lite(1, ncls);
        if (arch.id == "lenet") return ArchitectureSpec::lenet(1, ncls);
        throw ConfigError("unknown architecture id '" + arch.id + "'");
    }
};

namespace detail {

inline void reject_unknown_keys(const Json& obj, const std::set<std::string>& known,
                                const std::string& path) {
    for (const auto& [key, value] : obj.items())
        if (!known.count(key))
            throw ConfigError("unknown config key '" + (path.empty() ? key : path + "." + key) +
                              "'");
}

template <typename T>
T get_or(const Json& obj, const std::string& key, const T& fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type");
    }
}

inline void require_range(bool ok, const std::string& key_path, const std::string& what) {
    if (!ok) throw ConfigError("config value out of range: " + key_path + " " + what);
}

} // namespace detail

// Parses and fully validates a config document. Unknown keys are rejected
// with their path; the seed is mandatory.
inline ExperimentConfig validate_config(const Json& j) {
    using detail::get_or;
    using detail::reject_unknown_keys;
    using detail::require_range;

    reject_unknown_keys(j, {"seed", "precision", "out", "workers", "task", "arch", "federation",
                            "distill", "cost", "attack", "sweep"},
                        "");
    if (!j.contains("seed")) throw ConfigError("config is missing the mandatory 'seed'");

    ExperimentConfig cfg;
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.precision = get_or<int>(j, "precision", 32);
    require_range(cfg.precision == 32 || cfg.precision == 64, "precision", "must be 32 or 64");
    cfg.out = get_or<std::string>(j, "out", "results");
    cfg.federation.workers = get_or<int64_t>(j, "workers", 0);

    if (j.contains("task")) {
        const Json& t = j.at("task");
        reject_unknown_keys(t, {"id", "dir", "train_images", "train_labels", "test_images",
                                "test_labels", "train_limit", "test_limit", "n_cls", "count",
                                "test_count", "dim", "classes", "separation"},
                            "task");
        cfg.task.id = get_or<std::string>(t, "id", cfg.task.id);
        require_range(cfg.task.id == "mnist" || cfg.task.id == "glyphs" ||
                          cfg.task.id == "blobs" || cfg.task.id == "idx",
                      "task.id", "must be mnist|glyphs|blobs|idx");
        cfg.task.dir = get_or<std::string>(t, "dir", cfg.task.dir);
        cfg.task.train_images = get_or<std::string>(t, "train_images", "");
        cfg.task.train_labels = get_or<std::string>(t, "train_labels", "");
        cfg.task.test_images = get_or<std::string>(t, "test_images", "");
        cfg.task.test_labels = get_or<std::string>(t, "test_labels", "");
        cfg.task.train_limit = get_or<int64_t>(t, "train_limit", 0);
        cfg.task.test_limit = get_or<int64_t>(t, "test_limit", 0);
        cfg.task.n_cls = get_or<int64_t>(t, "n_cls", 10);
        cfg.task.count = get_or<int64_t>(t, "count", cfg.task.count);
        cfg.task.test_count = get_or<int64_t>(t, "test_count", cfg.task.test_count);
        cfg.task.dim = get_or<int64_t>(t, "dim", 2);
        cfg.task.classes = get_or<int64_t>(t, "classes", 2);
        cfg.task.separation = get_or<double>(t, "separation", 6.0);
        require_range(cfg.task.n_cls >= 2, "task.n_cls", "must be >= 2");
        require_range(cfg.task.count >= 1, "task.count", "must be >= 1");
    }

    if (j.contains("arch")) {
        const Json& a = j.at("arch");
        reject_unknown_keys(a, {"id", "hidden"}, "arch");
        cfg.arch.id = get_or<std::string>(a, "id", cfg.arch.id);
        require_range(cfg.arch.id == "mlp" || cfg.arch.id == "lenet-lite" ||
                          cfg.arch.id == "lenet",
                      "arch.id", "must be mlp|lenet-lite|lenet");
        cfg.arch.hidden = get_or<std::vector<int64_t>>(a, "hidden", cfg.arch.hidden);
    }

    if (j.contains("federation")) {
        const Json& f = j.at("federation");
        reject_unknown_keys(f, {"clients", "partition", "shards_per_client", "init",
                                "trace_every", "fedavg"},
                            "federation");
        cfg.federation.clients = get_or<int64_t>(f, "clients", 10);
        require_range(cfg.federation.clients >= 1, "federation.clients", "must be >= 1");
        const std::string part = get_or<std::string>(f, "partition", "iid");
        require_range(part == "iid" || part == "shards", "federation.partition",
                      "must be iid|shards");
        cfg.federation.partition =
            part == "iid" ? PartitionMode::Iid : PartitionMode::Shards;
        cfg.federation.shards_per_client = get_or<int64_t>(f, "shards_per_client", 2);
        require_range(cfg.federation.shards_per_client >= 1, "federation.shards_per_client",
                      "must be >= 1");
        cfg.federation.init =
            init_method_from_string(get_or<std::string>(f, "init", "xavier-normal"));
        cfg.federation.trace_every = get_or<int64_t>(f, "trace_every", 25);
        if (f.contains("fedavg")) {
            const Json& fa = f.at("fedavg");
            reject_unknown_keys(fa, {"participation", "local_epochs", "batch", "lr", "rounds"},
                                "federation.fedavg");
            cfg.federation.fedavg.participation = get_or<double>(fa, "participation", 0.1);
            require_range(cfg.federation.fedavg.participation > 0.0 &&
                              cfg.federation.fedavg.participation <= 1.0,
                          "federation.fedavg.participation", "must lie in (0,1]");
            cfg.federation.fedavg.local_epochs = get_or<int64_t>(fa, "local_epochs", 5);
            require_range(cfg.federation.fedavg.local_epochs >= 0,
                          "federation.fedavg.local_epochs", "must be >= 0");
            cfg.federation.fedavg.batch = get_or<int64_t>(fa, "batch", 10);
            cfg.federation.fedavg.lr = get_or<double>(fa, "lr", 0.01);
            cfg.federation.fedavg.rounds = get_or<int64_t>(fa, "rounds", 1);
            require_range(cfg.federation.fedavg.rounds >= 1, "federation.fedavg.rounds",
                          "must be >= 1");
        }
    }

    if (j.contains("distill")) {
        const Json& d = j.at("distill");
        reject_unknown_keys(d, {"steps", "distill_epochs", "distill_batch", "eta0", "alpha",
                                "tau", "decay", "epochs", "batch", "soft_labels", "sigma_sr",
                                "p_rm"},
                            "distill");
        DistillConfig& dc = cfg.federation.distill;
        dc.distill_steps = get_or<int64_t>(d, "steps", dc.distill_steps);
        dc.distill_epochs = get_or<int64_t>(d, "distill_epochs", dc.distill_epochs);
        dc.distill_batch = get_or<int64_t>(d, "distill_batch", dc.distill_batch);
        dc.eta0 = get_or<double>(d, "eta0", dc.eta0);
        dc.alpha = get_or<double>(d, "alpha", dc.alpha);
        dc.tau = get_or<int64_t>(d, "tau", dc.tau);
        dc.decay = get_or<double>(d, "decay", dc.decay);
        dc.epochs = get_or<int64_t>(d, "epochs", dc.epochs);
        dc.batch = get_or<int64_t>(d, "batch", dc.batch);
        dc.soft_labels = get_or<bool>(d, "soft_labels", dc.soft_labels);
        dc.sigma_sr = get_or<double>(d, "sigma_sr", dc.sigma_sr);
        dc.p_rm = get_or<double>(d, "p_rm", dc.p_rm);
        require_range(dc.p_rm >= 0.0 && dc.p_rm <= 1.0, "distill.p_rm", "must lie in [0,1]");
        require_range(dc.sigma_sr >= 0.0, "distill.sigma_sr", "must be >= 0");
        require_range(dc.distill_steps >= 1, "distill.steps", "must be >= 1");
        require_range(dc.distill_epochs >= 1, "distill.distill_epochs", "must be >= 1");
        require_range(dc.distill_batch >= 1, "distill.distill_batch", "must be >= 1");
        require_range(dc.tau >= 1, "distill.tau", "must be >= 1");
    }

    if (j.contains("cost")) {
        const Json& c = j.at("cost");
        reject_unknown_keys(c, {"clients", "participation", "rounds"}, "cost");
        cfg.cost.clients = get_or<int64_t>(c, "clients", 100);
        cfg.cost.participation = get_or<std::string>(c, "participation", "0.1");
        Rational::from_decimal(cfg.cost.participation); // parse check
        cfg.cost.rounds = get_or<int64_t>(c, "rounds", 1);
        require_range(cfg.cost.rounds >= 1, "cost.rounds", "must be >= 1");
    }

    if (j.contains("attack")) {
        const Json& a = j.at("attack");
        reject_unknown_keys(a, {"trials", "k_values"}, "attack");
        cfg.attack.trials = get_or<int64_t>(a, "trials", 3);
        require_range(cfg.attack.trials >= 1, "attack.trials", "must be >= 1");
        cfg.attack.k_values = get_or<std::vector<double>>(a, "k_values", cfg.attack.k_values);
        require_range(!cfg.attack.k_values.empty() && cfg.attack.k_values.front() == 0.0,
                      "attack.k_values", "must start at 0");
    }

    if (j.contains("sweep")) {
        const Json& s = j.at("sweep");
        reject_unknown_keys(s, {"axis", "values"}, "sweep");
        cfg.sweep.axis = get_or<std::string>(s, "axis", "shards");
        require_range(cfg.sweep.axis == "shards" || cfg.sweep.axis == "clients", "sweep.axis",
                      "must be shards|clients");
        cfg.sweep.values = get_or<std::vector<int64_t>>(s, "values", cfg.sweep.values);
    }

    cfg.federation.seed = cfg.seed;
    return cfg;
}

// Canonical serialized form; parsing it back yields an equal config.
inline Json config_to_json(const ExperimentConfig& cfg) {
    Json j;
    j["seed"] = cfg.seed;
    j["precision"] = cfg.precision;
    j["out"] = cfg.out;
    j["workers"] = cfg.federation.workers;
    j["task"] = {{"id", cfg.task.id},
                 {"dir", cfg.task.dir},
                 {"train_images", cfg.task.train_images},
                 {"train_labels", cfg.task.train_labels},
                 {"test_images", cfg.task.test_images},
                 {"test_labels", cfg.task.test_labels},
                 {"train_limit", cfg.task.train_limit},
                 {"test_limit", cfg.task.test_limit},
                 {"n_cls", cfg.task.n_cls},
                 {"count", cfg.task.count},
                 {"test_count", cfg.task.test_count},
                 {"dim", cfg.task.dim},
                 {"classes", cfg.task.classes},
                 {"separation", cfg.task.separation}};
    j["arch"] = {{"id", cfg.arch.id}, {"hidden", cfg.arch.hidden}};
    j["federation"] = {
        {"clients", cfg.federation.clients},
        {"partition", cfg.federation.partition == PartitionMode::Iid ? "iid" : "shards"},
        {"shards_per_client", cfg.federation.shards_per_client},
        {"init", to_string(cfg.federation.init)},
        {"trace_every", cfg.federation.trace_every},
        {"fedavg",
         {{"participation", cfg.federation.fedavg.participation},
          {"local_epochs", cfg.federation.fedavg.local_epochs},
          {"batch", cfg.federation.fedavg.batch},
          {"lr", cfg.federation.fedavg.lr},
          {"rounds", cfg.federation.fedavg.rounds}}}};
    const DistillConfig& dc = cfg.federation.distill;
    j["distill"] = {{"steps", dc.distill_steps},
                    {"distill_epochs", dc.distill_epochs},
                    {"distill_batch", dc.distill_batch},
                    {"eta0", dc.eta0},
                    {"alpha", dc.alpha},
                    {"tau", dc.tau},
                    {"decay", dc.decay},
                    {"epochs", dc.epochs},
                    {"batch", dc.batch},
                    {"soft_labels", dc.soft_labels},
                    {"sigma_sr", dc.sigma_sr},
                    {"p_rm", dc.p_rm}};
    j["cost"] = {{"clients", cfg.cost.clients},
                 {"participation", cfg.cost.participation},
                 {"rounds", cfg.cost.rounds}};
    j["attack"] = {{"trials", cfg.attack.trials}, {"k_values", cfg.attack.k_values}};
    j["sweep"] = {{"axis", cfg.sweep.axis}, {"values", cfg.sweep.values}};
    return j;
}

// Built-in profiles, also shipped as files under configs/.
inline const std::vector<std::pair<std::string, std::string>>& builtin_profiles();

// Loads a config from a file path or a built-in profile name.
inline ExperimentConfig validate_and_load(const std::string& path_or_profile) {
    for (const auto& [name, text] : builtin_profiles()) {
        if (name == path_or_profile) return validate_config(Json::parse(text));
    }
    std::ifstream f(path_or_profile);
    if (!f) throw ConfigError("cannot open config '" + path_or_profile +
                              "' (not a file or built-in profile)");
    Json j;
    try {
        j = Json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path_or_profile + "' is not valid JSON: " + e.what());
    }
    return validate_config(j);
}

inline const std::vector<std::pair<std::string, std::string>>& builtin_profiles() {
    static const std::vector<std::pair<std::string, std::string>> profiles = {
        {"mnist-10client-iid", R"({
            "seed": 1,
            "task": {"id": "mnist", "n_cls": 10},
            "arch": {"id": "lenet"},
            "federation": {"clients": 10, "partition": "iid"},
            "distill": {"steps": 30, "distill_epochs": 3, "distill_batch": 10,
                        "eta0": 0.02, "alpha": 0.01, "tau": 40,
                        "epochs": 30, "batch": 512, "soft_labels": true}
        })"},
        {"mnist-10client-iid-bd40", R"({
            "seed": 1,
            "task": {"id": "mnist", "n_cls": 10},
            "arch": {"id": "lenet"},
            "federation": {"clients": 10, "partition": "iid"},
            "distill": {"steps": 30, "distill_epochs": 3, "distill_batch": 40,
                        "eta0": 0.02, "alpha": 0.01, "tau": 40,
                        "epochs": 30, "batch": 512, "soft_labels": true}
        })"},
        {"mnist-10client-noniid-sr", R"({
            "seed": 1,
            "task": {"id": "mnist", "n_cls": 10},
            "arch": {"id": "lenet"},
            "federation": {"clients": 10, "partition": "shards", "shards_per_client": 2},
            "distill": {"steps": 30, "distill_epochs": 3, "distill_batch": 10,
                        "eta0": 0.02, "alpha": 0.01, "tau": 40,
                        "epochs": 30, "batch": 512,
                        "soft_labels": false, "sigma_sr": 0.2}
        })"},
        {"glyphs-desk-dosfl", R"({
            "seed": 1,
            "task": {"id": "glyphs", "count": 10000, "test_count": 2000},
            "arch": {"id": "lenet-lite"},
            "federation": {"clients": 10, "partition": "iid", "trace_every": 50},
            "distill": {"steps": 10, "distill_epochs": 3, "distill_batch": 10,
                        "eta0": 0.02, "alpha": 0.01, "tau": 40,
                        "epochs": 30, "batch": 512, "soft_labels": true}
        })"},
        {"blobs-smoke", R"({
            "seed": 1,
            "task": {"id": "blobs", "count": 96, "test_count": 200,
                     "classes": 2, "dim": 2, "separation": 6.0},
            "arch": {"id": "mlp", "hidden": []},
            "federation": {"clients": 2, "partition": "iid", "trace_every": 2},
            "distill": {"steps": 2, "distill_epochs": 1, "distill_batch": 2,
                        "eta0": 0.05, "alpha": 0.05, "tau": 40,
                        "epochs": 20, "batch": 16, "soft_labels": true},
            "attack": {"trials": 2, "k_values": [0.0, 1.0, 4.0]},
            "sweep": {"axis": "clients", "values": [1, 2, 4]}
        })"},
    };
    return profiles;
}

} // namespace dosfl
