#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "dosfl/distill.hpp"

namespace dosfl {

enum class FedMode { Dosfl, LpDosfl, FedAvg };

inline const char* to_string(FedMode m) {
    switch (m) {
        case FedMode::Dosfl: return "dosfl";
        case FedMode::LpDosfl: return "lp-dosfl";
        case FedMode::FedAvg: return "fedavg";
    }
    return "?";
}

inline FedMode fed_mode_from_string(const std::string& s) {
    if (s == "dosfl") return FedMode::Dosfl;
    if (s == "lp-dosfl") return FedMode::LpDosfl;
    if (s == "fedavg") return FedMode::FedAvg;
    throw ConfigError("unknown federation mode '" + s + "'");
}

struct FedAvgConfig {
    double participation = 0.1; // C
    int64_t local_epochs = 5;   // E
    int64_t batch = 10;         // B
    double lr = 0.01;           // eta
    int64_t rounds = 1;         // T
};

struct FederationConfig {
    int64_t clients = 10;
    PartitionMode partition = PartitionMode::Iid;
    int64_t shards_per_client = 2;
    DistillConfig distill;
    FedAvgConfig fedavg;
    FedMode mode = FedMode::Dosfl;
    InitMethod init = InitMethod::XavierNormal;
    uint64_t seed = 0;
    int64_t workers = 0;      // 0: hardware concurrency
    int64_t trace_every = 25; // server-side accuracy evaluation cadence

    void validate() const {
        if (clients < 1) throw ConfigError("federation.clients must be >= 1");
        if (fedavg.participation <= 0.0 || fedavg.participation > 1.0)
            throw ConfigError("federation.fedavg.participation must lie in (0, 1]");
        if (mode == FedMode::FedAvg) {
            if (fedavg.rounds < 1) throw ConfigError("federation.fedavg.rounds must be >= 1");
            if (static_cast<int64_t>(std::ceil(fedavg.participation *
                                               static_cast<double>(clients))) < 1)
                throw ConfigError("federation.fedavg: participation selects zero clients");
        }
        distill.validate();
    }
};

struct TracePoint {
    int64_t step = 0;
    double accuracy = 0.0;
    uint64_t scalars_uploaded = 0;
};

struct RunReport {
    double final_accuracy = 0.0;
    std::vector<TracePoint> trace;
    uint64_t scalars_uploaded = 0;
    uint64_t scalars_downloaded = 0;
    double wall_seconds = 0.0; // informational; excluded from reproducibility hashes
};

template <typename T>
struct RunOutput {
    RunReport report;
    ParamVector<T> theta_final;
    std::vector<DistilledDataset<T>> distilled; // per client (DOSFL/LP-DOSFL)
};

// Stream ids for seed derivation; every subsystem draws from its own stream
// of the run seed, so client scheduling order can never change results.
namespace seed_stream {
inline constexpr uint64_t kInit = 1;
inline constexpr uint64_t kPartition = 2;
inline constexpr uint64_t kVisitOrder = 3;
inline constexpr uint64_t kFedAvgRounds = 4;
inline constexpr uint64_t kClientBase = 1000;
} // namespace seed_stream

inline uint64_t client_seed(uint64_t run_seed, int64_t client_id) {
    return Rng::derive(run_seed, seed_stream::kClientBase + static_cast<uint64_t>(client_id));
}

// Round-robin interleave of the clients' step sequences, in client-id order:
// output position j*N + k holds client k's step j.
template <typename T>
std::vector<DistilledStep<T>> merge(const std::vector<DistilledDataset<T>>& datasets) {
    if (datasets.empty()) throw MergeError("merge: no distilled datasets");
    const auto& ref = datasets.front();
    std::string offenders;
    for (size_t k = 1; k < datasets.size(); ++k) {
        const auto& d = datasets[k];
        if (d.arch_id != ref.arch_id || d.step_count() != ref.step_count() ||
            d.distill_batch != ref.distill_batch || d.input_shape != ref.input_shape)
            offenders += (offenders.empty() ? "" : ", ") + std::string("client ") +
                         std::to_string(d.client_id);
    }
    if (!offenders.empty())
        throw MergeError("merge: heterogeneous distilled datasets (" + offenders + ")");
    std::vector<DistilledStep<T>> seq;
    seq.reserve(datasets.size() * static_cast<size_t>(ref.step_count()));
    for (int64_t j = 0; j < ref.step_count(); ++j)
        for (const auto& d : datasets) seq.push_back(d.steps[static_cast<size_t>(j)]);
    return seq;
}

// Server-side training: distill_epochs passes over the merged sequence, one
// inner_adapt per element. The hook fires after every adaptation.
template <typename T>
ParamVector<T> server_train(
    const ArchitectureSpec& arch, const ParamVector<T>& theta0,
    const std::vector<DistilledStep<T>>& seq, int64_t distill_epochs,
    const std::function<void(int64_t, const ParamVector<T>&)>& hook = nullptr) {
    ParamVector<T> cur = theta0.detached();
    int64_t a = 0;
    for (int64_t e = 0; e < distill_epochs; ++e) {
        for (size_t j = 0; j < seq.size(); ++j) {
            try {
                cur = inner_adapt(arch, cur, seq[j], false);
            } catch (const DivergenceError& err) {
                throw DivergenceError(std::string(err.what()) + " (server adaptation " +
                                      std::to_string(a) + ")");
            }
            ++a;
            if (hook) hook(a, cur);
        }
    }
    return cur;
}

namespace detail {

// Runs fn(k) for k in [0, n) on up to `workers` threads. Exceptions are
// rethrown on the caller thread, lowest client id first.
inline void parallel_for_clients(int64_t n, int64_t workers,
                                 const std::function<void(int64_t)>& fn) {
    if (workers <= 0)
        workers = static_cast<int64_t>(std::max(1u, std::thread::hardware_concurrency()));
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (int64_t k = 0; k < n; ++k) fn(k);
        return;
    }
    std::atomic<int64_t> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int64_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const int64_t k = next.fetch_add(1);
                if (k >= n) return;
                try {
                    fn(k);
                } catch (...) {
                    errors[static_cast<size_t>(k)] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& err : errors)
        if (err) std::rethrow_exception(err);
}

template <typename T>
std::vector<LabeledDataset<T>> split_clients(const LabeledDataset<T>& train,
                                             const PartitionSpec& part) {
    std::vector<LabeledDataset<T>> out;
    out.reserve(part.client_indices.size());
    for (const auto& idx : part.client_indices) out.push_back(train.subset(idx));
    return out;
}

} // namespace detail

// Builds the run's partition from the federation config. Shard mode truncates
// to the largest usable prefix (with a warning) before partitioning.
template <typename T>
PartitionSpec build_partition(const LabeledDataset<T>& train, const FederationConfig& cfg) {
    const uint64_t pseed = Rng::derive(cfg.seed, seed_stream::kPartition);
    if (cfg.partition == PartitionMode::Iid) return partition_iid(train.size(), cfg.clients, pseed);
    const int64_t usable =
        largest_shard_multiple(train.size(), cfg.clients, cfg.shards_per_client);
    if (usable == 0)
        throw ConfigError("shard partition: dataset too small for N*s shards");
    std::vector<int32_t> labels(train.labels.begin(), train.labels.begin() + usable);
    if (usable != train.size())
        std::cerr << "[dosfl] shard partition drops " << (train.size() - usable)
                  << " trailing examples to stay divisible by N*s\n";
    return partition_shards(labels, cfg.clients, cfg.shards_per_client, pseed);
}

// One-shot federated distillation: broadcast theta0 (a seed: one scalar), all
// clients distill in parallel against the same theta0, the server merges and
// trains. Any client failure aborts the round.
template <typename T>
RunOutput<T> run_dosfl(const ArchitectureSpec& arch, const LabeledDataset<T>& train,
                       const LabeledDataset<T>& test, const FederationConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    PartitionSpec part = build_partition(train, cfg);
    ParamVector<T> theta0 =
        init_params<T>(arch, cfg.init, Rng::derive(cfg.seed, seed_stream::kInit));
    auto clients = detail::split_clients(train, part);

    RunOutput<T> out;
    out.distilled.resize(static_cast<size_t>(cfg.clients));
    detail::parallel_for_clients(cfg.clients, cfg.workers, [&](int64_t k) {
        out.distilled[static_cast<size_t>(k)] =
            distill(arch, clients[static_cast<size_t>(k)], theta0, cfg.distill,
                    client_seed(cfg.seed, k));
        out.distilled[static_cast<size_t>(k)].client_id = k;
    });

    uint64_t uploaded = 0;
    for (const auto& d : out.distilled) uploaded += static_cast<uint64_t>(d.upload_scalars());

    auto seq = merge(out.distilled);
    RunReport& rep = out.report;
    rep.scalars_uploaded = uploaded;
    rep.scalars_downloaded = 1; // theta0 travels as a seed
    const int64_t total_adaptations = cfg.distill.distill_epochs * static_cast<int64_t>(seq.size());
    out.theta_final = server_train<T>(
        arch, theta0, seq, cfg.distill.distill_epochs,
        [&](int64_t a, const ParamVector<T>& th) {
            if (cfg.trace_every > 0 && (a % cfg.trace_every == 0 || a == total_adaptations))
                rep.trace.push_back({a, evaluate(arch, th, test).accuracy, uploaded});
        });
    if (rep.trace.empty())
        rep.trace.push_back({total_adaptations, evaluate(arch, out.theta_final, test).accuracy,
                             uploaded});
    rep.final_accuracy = evaluate(arch, out.theta_final, test).accuracy;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// Low-participation serial variant: clients distill one at a time against the
// current server parameters; the server trains after each client. The
// accuracy trace has one point per client completed.
template <typename T>
RunOutput<T> run_lp_dosfl(const ArchitectureSpec& arch, const LabeledDataset<T>& train,
                          const LabeledDataset<T>& test, const FederationConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    PartitionSpec part = build_partition(train, cfg);
    ParamVector<T> theta =
        init_params<T>(arch, cfg.init, Rng::derive(cfg.seed, seed_stream::kInit));
    auto clients = detail::split_clients(train, part);

    std::vector<int64_t> visit(static_cast<size_t>(cfg.clients));
    std::iota(visit.begin(), visit.end(), 0);
    Rng order_rng(Rng::derive(cfg.seed, seed_stream::kVisitOrder));
    order_rng.shuffle(visit);

    RunOutput<T> out;
    out.distilled.resize(static_cast<size_t>(cfg.clients));
    RunReport& rep = out.report;
    rep.scalars_downloaded = 1; // the first client receives theta0 as a seed
    int64_t done = 0;
    for (int64_t k : visit) {
        // clients after the first receive the updated weights in full
        if (done > 0) rep.scalars_downloaded += static_cast<uint64_t>(param_count(arch));
        auto d = distill(arch, clients[static_cast<size_t>(k)], theta, cfg.distill,
                         client_seed(cfg.seed, k));
        d.client_id = k;
        rep.scalars_uploaded += static_cast<uint64_t>(d.upload_scalars());
        theta = server_train<T>(arch, theta, d.steps, cfg.distill.distill_epochs);
        out.distilled[static_cast<size_t>(k)] = std::move(d);
        ++done;
        rep.trace.push_back({done, evaluate(arch, theta, test).accuracy, rep.scalars_uploaded});
    }
    out.theta_final = std::move(theta);
    rep.final_accuracy = rep.trace.back().accuracy;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// Dataset-size-weighted parameter average. Sizes are reduced by their gcd and
// size * value accumulates in double with a single final division, so equal
// dataset sizes reproduce the unweighted mean exactly.
template <typename T>
ParamVector<T> weighted_average(const std::vector<ParamVector<T>>& locals,
                                std::vector<int64_t> sizes) {
    if (locals.empty() || locals.size() != sizes.size())
        throw ContractViolation("weighted_average: size/parameter count mismatch");
    int64_t g = 0;
    for (int64_t n : sizes) g = std::gcd(g, n);
    if (g > 1)
        for (auto& n : sizes) n /= g;
    double total = 0;
    for (int64_t n : sizes) total += static_cast<double>(n);
    ParamVector<T> out;
    out.arch_id = locals.front().arch_id;
    for (size_t p = 0; p < locals.front().values.size(); ++p) {
        std::vector<double> acc(static_cast<size_t>(locals.front().values[p].numel()), 0.0);
        for (size_t i = 0; i < locals.size(); ++i) {
            const auto src = locals[i].values[p].data();
            const double n = static_cast<double>(sizes[i]);
            for (size_t j = 0; j < acc.size(); ++j) acc[j] += n * static_cast<double>(src[j]);
        }
        std::vector<T> vals(acc.size());
        for (size_t j = 0; j < acc.size(); ++j) vals[j] = static_cast<T>(acc[j] / total);
        out.values.push_back(Tensor<T>::from(std::move(vals), locals.front().values[p].shape()));
    }
    return out;
}

// FedAvg baseline: per round, a uniform sample of ceil(C*N) clients runs E
// local epochs of SGD and the server takes the dataset-size-weighted average.
template <typename T>
RunOutput<T> run_fedavg(const ArchitectureSpec& arch, const LabeledDataset<T>& train,
                        const LabeledDataset<T>& test, const FederationConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    PartitionSpec part = build_partition(train, cfg);
    ParamVector<T> theta =
        init_params<T>(arch, cfg.init, Rng::derive(cfg.seed, seed_stream::kInit));
    auto clients = detail::split_clients(train, part);
    const int64_t m = static_cast<int64_t>(
        std::ceil(cfg.fedavg.participation * static_cast<double>(cfg.clients)));
    const uint64_t theta_count = static_cast<uint64_t>(param_count(arch));

    RunOutput<T> out;
    RunReport& rep = out.report;
    Rng sample_rng(Rng::derive(cfg.seed, seed_stream::kFedAvgRounds));
    for (int64_t t = 0; t < cfg.fedavg.rounds; ++t) {
        std::vector<int64_t> ids(static_cast<size_t>(cfg.clients));
        std::iota(ids.begin(), ids.end(), 0);
        sample_rng.shuffle(ids);
        ids.resize(static_cast<size_t>(m));
        std::sort(ids.begin(), ids.end());

        std::vector<ParamVector<T>> local(static_cast<size_t>(m));
        detail::parallel_for_clients(m, cfg.workers, [&](int64_t i) {
            const int64_t k = ids[static_cast<size_t>(i)];
            local[static_cast<size_t>(i)] = sgd_train(
                arch, theta, clients[static_cast<size_t>(k)], cfg.fedavg.local_epochs,
                cfg.fedavg.batch, cfg.fedavg.lr,
                Rng::derive(client_seed(cfg.seed, k), static_cast<uint64_t>(t)));
        });

        std::vector<int64_t> sizes;
        sizes.reserve(static_cast<size_t>(m));
        for (int64_t k : ids) sizes.push_back(clients[static_cast<size_t>(k)].size());
        theta = weighted_average(local, sizes);

        rep.scalars_uploaded += static_cast<uint64_t>(m) * theta_count;
        if (t > 0) rep.scalars_downloaded += static_cast<uint64_t>(m) * theta_count;
        rep.trace.push_back({t + 1, evaluate(arch, theta, test).accuracy, rep.scalars_uploaded});
    }
    out.theta_final = std::move(theta);
    rep.final_accuracy = rep.trace.back().accuracy;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

} // namespace dosfl
