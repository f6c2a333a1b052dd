#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dosfl/federation.hpp"

namespace dosfl {

// What an eavesdropper intercepted from one legitimate run: the merged
// distilled sequence and, for reference, how the legitimate server fared.
template <typename T>
struct AttackSource {
    InitMethod method = InitMethod::XavierNormal; // the run's real init method
    uint64_t legit_init_seed = 0;                 // the run's real init seed
    std::vector<DistilledStep<T>> seq;
    int64_t distill_epochs = 1;
    double legitimate_accuracy = 0.0;
};

struct AttackMatrixCell {
    double mean = 0.0, min = 0.0, max = 0.0;
};

struct AttackReport {
    std::vector<InitMethod> methods;                       // row/column order
    std::vector<std::vector<AttackMatrixCell>> matrix;     // [source][attack]
    std::vector<double> legitimate;                        // per source: matched method AND seed
    std::vector<std::pair<double, AttackMatrixCell>> curve; // (k, accuracy stats)
    int64_t trials = 0;
    std::vector<uint64_t> trial_seeds;
};

// Eavesdropper matrix: for every (source init method, guessed init method)
// pair, train a freshly initialized model on the leaked sequence and measure
// accuracy, averaged over trials. Fresh seeds everywhere: even a correctly
// guessed method lacks the server's seed. The matched-seed reference per
// source is recomputed separately.
template <typename T>
AttackReport attack_matrix(const ArchitectureSpec& arch,
                           const std::vector<AttackSource<T>>& sources,
                           const LabeledDataset<T>& test, int64_t trials, uint64_t seed) {
    if (trials < 1) throw ConfigError("attack_matrix: trials must be >= 1");
    AttackReport rep;
    rep.methods = all_init_methods();
    rep.trials = trials;
    for (int64_t t = 0; t < trials; ++t)
        rep.trial_seeds.push_back(Rng::derive(seed, static_cast<uint64_t>(t)));
    rep.matrix.resize(sources.size());
    for (size_t s = 0; s < sources.size(); ++s) {
        if (sources[s].seq.empty()) throw ContractViolation("attack_matrix: empty source");
        rep.matrix[s].resize(rep.methods.size());
        for (size_t a = 0; a < rep.methods.size(); ++a) {
            AttackMatrixCell cell{0.0, 1.0, 0.0};
            for (int64_t t = 0; t < trials; ++t) {
                const uint64_t atk_seed =
                    Rng::derive(rep.trial_seeds[static_cast<size_t>(t)],
                                static_cast<uint64_t>(s * 100 + a));
                ParamVector<T> theta = init_params<T>(arch, rep.methods[a], atk_seed);
                ParamVector<T> trained =
                    server_train(arch, theta, sources[s].seq, sources[s].distill_epochs);
                const double acc = evaluate(arch, trained, test).accuracy;
                cell.mean += acc;
                cell.min = std::min(cell.min, acc);
                cell.max = std::max(cell.max, acc);
            }
            cell.mean /= static_cast<double>(trials);
            if (cell.min == cell.max) cell.mean = cell.min; // identical trials, exactly
            rep.matrix[s][a] = cell;
        }
        // the legitimate server: matched method and matched seed
        ParamVector<T> theta =
            init_params<T>(arch, sources[s].method, sources[s].legit_init_seed);
        ParamVector<T> trained =
            server_train(arch, theta, sources[s].seq, sources[s].distill_epochs);
        rep.legitimate.push_back(evaluate(arch, trained, test).accuracy);
    }
    return rep;
}

// theta0 + k * v / ||v||_2 with v standard normal over the full flattened
// parameter vector: a uniformly random direction at Euclidean distance
// exactly k.
template <typename T>
ParamVector<T> perturb_weights(const ArchitectureSpec& arch, const ParamVector<T>& theta0,
                               double k, uint64_t seed) {
    if (k < 0) throw ConfigError("perturb_weights: k must be >= 0");
    if (k == 0.0) return theta0.detached();
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(theta0.total()));
    double norm_sq = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        norm_sq += x * x;
    }
    const double scale = k / std::sqrt(norm_sq);
    std::vector<T> flat = theta0.flatten();
    for (size_t i = 0; i < flat.size(); ++i)
        flat[i] = static_cast<T>(static_cast<double>(flat[i]) + scale * v[i]);
    return params_from_flat<T>(arch, flat);
}

// Accuracy of an eavesdropper training from perturbed weights, per distance
// k (ascending, starting at 0), averaged over trials. The k = 0 point is the
// legitimate run itself.
template <typename T>
std::vector<std::pair<double, AttackMatrixCell>> attack_distance_curve(
    const ArchitectureSpec& arch, const ParamVector<T>& theta0,
    const std::vector<DistilledStep<T>>& seq, int64_t distill_epochs,
    const std::vector<double>& k_values, const LabeledDataset<T>& test, int64_t trials,
    uint64_t seed) {
    if (k_values.empty() || k_values.front() != 0.0)
        throw ContractViolation("attack_distance_curve: k values must start at 0");
    for (size_t i = 1; i < k_values.size(); ++i)
        if (k_values[i] < k_values[i - 1])
            throw ContractViolation("attack_distance_curve: k values must ascend");
    std::vector<std::pair<double, AttackMatrixCell>> curve;
    for (size_t i = 0; i < k_values.size(); ++i) {
        AttackMatrixCell cell{0.0, 1.0, 0.0};
        for (int64_t t = 0; t < trials; ++t) {
            ParamVector<T> theta = perturb_weights(
                arch, theta0, k_values[i],
                Rng::derive(seed, static_cast<uint64_t>(i * 1000 + static_cast<size_t>(t))));
            ParamVector<T> trained = server_train(arch, theta, seq, distill_epochs);
            const double acc = evaluate(arch, trained, test).accuracy;
            cell.mean += acc;
            cell.min = std::min(cell.min, acc);
            cell.max = std::max(cell.max, acc);
        }
        cell.mean /= static_cast<double>(trials);
        if (cell.min == cell.max) cell.mean = cell.min; // identical trials, exactly
        curve.emplace_back(k_values[i], cell);
    }
    return curve;
}

} // namespace dosfl
