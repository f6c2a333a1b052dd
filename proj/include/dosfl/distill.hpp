#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dosfl/data.hpp"
#include "dosfl/models.hpp"
#include "dosfl/ops.hpp"

namespace dosfl {

// Client-side distillation hyperparameters.
struct DistillConfig {
    int64_t distill_steps = 30;   // S_d: steps per pass
    int64_t distill_epochs = 3;   // E_d: passes over the steps
    int64_t distill_batch = 10;   // B_d: examples per step
    double eta0 = 0.02;           // initial distilled learning rate
    double alpha = 0.01;          // meta learning rate
    int64_t tau = 40;             // decay period in epochs
    double decay = 0.5;           // meta-lr decay factor
    int64_t epochs = 30;          // E: local epochs over the real data
    int64_t batch = 512;          // B: real-data minibatch size
    bool soft_labels = false;
    double sigma_sr = 0.0;        // soft-reset variance, 0 disables
    double p_rm = 0.0;            // random-masking probability, 0 disables

    void validate() const {
        if (distill_steps < 1) throw ConfigError("distill.steps must be >= 1");
        if (distill_epochs < 1) throw ConfigError("distill.distill_epochs must be >= 1");
        if (distill_batch < 1) throw ConfigError("distill.distill_batch must be >= 1");
        if (epochs < 1) throw ConfigError("distill.epochs must be >= 1");
        if (batch < 1) throw ConfigError("distill.batch must be >= 1");
        if (tau < 1) throw ConfigError("distill.tau must be >= 1");
        if (p_rm < 0.0 || p_rm > 1.0) throw ConfigError("distill.p_rm must lie in [0, 1]");
        if (sigma_sr < 0.0) throw ConfigError("distill.sigma_sr must be >= 0");
    }
};

// Meta learning rate in effect during epoch e (0-based): alpha * decay^(e/tau).
inline double meta_lr(const DistillConfig& cfg, int64_t epoch) {
    return cfg.alpha * std::pow(cfg.decay, static_cast<double>(epoch / cfg.tau));
}

// One synthetic batch: inputs, label logits, and its own learning rate.
template <typename T>
struct DistilledStep {
    Tensor<T> x;    // [B_d, ...input shape]
    Tensor<T> y;    // [B_d, n_cls] logits
    Tensor<T> eta;  // scalar; unconstrained (a negative value reverses the step)
};

// Ordered sequence of distilled steps from one client.
template <typename T>
struct DistilledDataset {
    std::string arch_id;
    Shape input_shape;
    int64_t n_cls = 0;
    int64_t distill_batch = 0;
    bool soft_labels = false;
    uint64_t seed = 0;
    int64_t client_id = 0;
    std::vector<DistilledStep<T>> steps;

    int64_t step_count() const { return static_cast<int64_t>(steps.size()); }
    int64_t example_numel() const { return shape_numel(input_shape); }

    // Scalars a client uploads, counted with the cost model's per-example
    // convention: (n_data + n_cls + 1) slots per distilled example.
    int64_t upload_scalars() const {
        return step_count() * distill_batch * (example_numel() + n_cls + 1);
    }
};

// Target rows for a step's inner loss: the label vector applied directly as
// cross-entropy weights. One-hot initialization gives the classic hard-label
// loss; with soft labels enabled the vector itself is what learns.
template <typename T>
Tensor<T> step_targets(const DistilledStep<T>& step) {
    return step.y;
}

// Initial distillation state: x entries standard normal, eta = eta0, labels
// one-hot cycling through the classes present on the client.
template <typename T>
DistilledDataset<T> init_distill_state(const DistillConfig& cfg, const ArchitectureSpec& arch,
                                       const std::vector<int32_t>& classes, uint64_t seed,
                                       bool cycle_labels = true) {
    cfg.validate();
    if (classes.empty()) throw ConfigError("init_distill_state: empty class list");
    if (!cycle_labels && cfg.distill_batch < static_cast<int64_t>(classes.size()))
        throw ConfigError("init_distill_state: B_d=" + std::to_string(cfg.distill_batch) +
                          " is smaller than the " + std::to_string(classes.size()) +
                          " requested classes and cycling is disabled");
    Rng rng(seed);
    DistilledDataset<T> out;
    out.arch_id = arch.id();
    out.input_shape = arch.input_shape;
    out.n_cls = arch.n_cls;
    out.distill_batch = cfg.distill_batch;
    out.soft_labels = cfg.soft_labels;
    out.seed = seed;
    Shape xshape{cfg.distill_batch};
    xshape.insert(xshape.end(), arch.input_shape.begin(), arch.input_shape.end());
    for (int64_t j = 0; j < cfg.distill_steps; ++j) {
        DistilledStep<T> step;
        step.x = Tensor<T>::randn(xshape, rng);
        std::vector<T> labels(static_cast<size_t>(cfg.distill_batch * arch.n_cls), T(0));
        for (int64_t i = 0; i < cfg.distill_batch; ++i) {
            const int32_t cls = classes[static_cast<size_t>(i) % classes.size()];
            labels[static_cast<size_t>(i * arch.n_cls + cls)] = T(1);
        }
        step.y = Tensor<T>::from(std::move(labels), Shape{cfg.distill_batch, arch.n_cls});
        step.eta = Tensor<T>::scalar(static_cast<T>(cfg.eta0));
        out.steps.push_back(std::move(step));
    }
    return out;
}

// Single gradient-descent update of theta on one distilled step, using the
// step's own learning rate. Pure: the input parameters are not modified.
// With `differentiable` the update is recorded so meta-gradients can flow
// through it; without, the result is detached leaves (server-side replay).
template <typename T>
ParamVector<T> inner_adapt(const ArchitectureSpec& arch, const ParamVector<T>& params,
                           const DistilledStep<T>& step, bool differentiable = false) {
    ParamVector<T> out;
    out.arch_id = params.arch_id;
    if (differentiable) {
        Tensor<T> loss =
            softmax_cross_entropy(forward(arch, params.values, step.x), step_targets(step));
        auto grads = grad_wrt(loss, params.values, {.create_graph = true});
        out.values.reserve(params.values.size());
        for (size_t i = 0; i < params.values.size(); ++i)
            out.values.push_back(sub(params.values[i], mul(step.eta, grads[i])));
        return out;
    }
    ParamVector<T> leaves = params.detached();
    for (auto& v : leaves.values) v.set_requires_grad(true);
    Tensor<T> loss =
        softmax_cross_entropy(forward(arch, leaves.values, step.x), step_targets(step));
    auto grads = grad_wrt(loss, leaves.values);
    const T eta = step.eta.item();
    out.values.reserve(leaves.values.size());
    for (size_t i = 0; i < leaves.values.size(); ++i) {
        std::vector<T> next(leaves.values[i].data().begin(), leaves.values[i].data().end());
        const auto g = grads[i].data();
        for (size_t j = 0; j < next.size(); ++j) next[j] -= eta * g[j];
        out.values.push_back(Tensor<T>::from(std::move(next), leaves.values[i].shape()));
    }
    return out;
}

// E_d sequential passes over the step sequence, epoch-major: all S_d steps,
// repeated E_d times. Divergence is reported with its (epoch, step) location.
template <typename T>
ParamVector<T> unroll(const ArchitectureSpec& arch, const ParamVector<T>& theta0,
                      const DistilledDataset<T>& ds, int64_t distill_epochs,
                      bool differentiable = false) {
    if (ds.arch_id != theta0.arch_id)
        throw ContractViolation("unroll: distilled data targets architecture '" + ds.arch_id +
                                "', parameters are '" + theta0.arch_id + "'");
    ParamVector<T> cur = theta0;
    for (int64_t e = 0; e < distill_epochs; ++e) {
        for (int64_t j = 0; j < ds.step_count(); ++j) {
            try {
                cur = inner_adapt(arch, cur, ds.steps[static_cast<size_t>(j)], differentiable);
            } catch (const DivergenceError& err) {
                throw DivergenceError(std::string(err.what()) + " (unroll epoch " +
                                      std::to_string(e) + ", step " + std::to_string(j) + ")");
            }
        }
    }
    return cur;
}

// Gaussian perturbation of the starting parameters around theta0 with
// variance sigma_sq. sigma_sq == 0 returns theta0 unchanged and consumes no
// randomness, so disabling the feature leaves rng streams untouched.
template <typename T>
ParamVector<T> soft_reset(const ParamVector<T>& theta0, double sigma_sq, Rng& rng) {
    if (sigma_sq < 0) throw ConfigError("soft_reset: variance must be >= 0");
    if (sigma_sq == 0.0) return theta0.detached();
    const double stddev = std::sqrt(sigma_sq);
    ParamVector<T> out;
    out.arch_id = theta0.arch_id;
    out.values.reserve(theta0.values.size());
    for (const auto& v : theta0.values) {
        std::vector<T> d(v.data().begin(), v.data().end());
        for (auto& val : d) val += static_cast<T>(rng.normal() * stddev);
        out.values.push_back(Tensor<T>::from(std::move(d), v.shape()));
    }
    return out;
}

// Restoration token for random masking: swaps the original x tensors back in,
// bit-exactly (the originals are held, never copied or touched).
template <typename T>
struct MaskToken {
    std::vector<std::pair<int64_t, Tensor<T>>> saved;

    void restore(DistilledDataset<T>& ds) {
        for (auto& [idx, x] : saved) ds.steps[static_cast<size_t>(idx)].x = x;
        saved.clear();
    }
};

// Replaces round(p_rm * S_d) steps' inputs with fresh standard-normal tensors.
// Masked steps still execute their inner updates; their original x receives
// no meta-update that iteration and is restored afterwards.
template <typename T>
MaskToken<T> random_mask(DistilledDataset<T>& ds, double p_rm, Rng& rng) {
    if (p_rm < 0.0 || p_rm > 1.0) throw ConfigError("random_mask: p_rm must lie in [0, 1]");
    MaskToken<T> token;
    if (p_rm == 0.0) return token;
    const int64_t count = std::min<int64_t>(
        ds.step_count(),
        static_cast<int64_t>(std::floor(p_rm * static_cast<double>(ds.step_count()) + 0.5)));
    std::vector<int64_t> idx(static_cast<size_t>(ds.step_count()));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(static_cast<size_t>(count));
    std::sort(idx.begin(), idx.end());
    for (int64_t j : idx) {
        auto& step = ds.steps[static_cast<size_t>(j)];
        token.saved.emplace_back(j, step.x);
        step.x = Tensor<T>::randn(step.x.shape(), rng);
    }
    return token;
}

namespace detail {

// ADAM with bias correction; state lives alongside each learnable tensor.
template <typename T>
struct AdamState {
    std::vector<T> m, v;
    int64_t t = 0;

    void update(Tensor<T>& leaf, std::span<const T> g, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        auto& data = leaf.mutable_data();
        if (m.empty()) {
            m.assign(data.size(), T(0));
            v.assign(data.size(), T(0));
        }
        ++t;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (size_t i = 0; i < data.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            m[i] = static_cast<T>(b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi);
            v[i] = static_cast<T>(b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi);
            const double mh = static_cast<double>(m[i]) / c1;
            const double vh = static_cast<double>(v[i]) / c2;
            data[i] = static_cast<T>(static_cast<double>(data[i]) - lr * mh / (std::sqrt(vh) + eps));
        }
    }
};

} // namespace detail

// Per-meta-iteration diagnostics from a distillation run.
struct DistillTrace {
    std::vector<double> outer_loss;           // one entry per meta-iteration
    std::vector<double> epoch_meta_lr;        // one entry per epoch
};

// Bilevel distillation of a client dataset against a known initialization:
// for each real minibatch, optionally soft-reset theta0 and mask steps, unroll
// the distilled sequence, evaluate the outer loss on the minibatch, and apply
// an ADAM meta-update to x, eta (and y when soft labels are enabled). Never
// mutates client_data or theta0.
template <typename T>
DistilledDataset<T> distill(const ArchitectureSpec& arch, const LabeledDataset<T>& client_data,
                            const ParamVector<T>& theta0, const DistillConfig& cfg, uint64_t seed,
                            DistillTrace* trace = nullptr) {
    cfg.validate();
    if (client_data.size() == 0) throw ContractViolation("distill: empty client dataset");
    if (theta0.arch_id != arch.id())
        throw ContractViolation("distill: theta0 architecture '" + theta0.arch_id +
                                "' does not match '" + arch.id() + "'");

    DistilledDataset<T> state = init_distill_state<T>(cfg, arch, client_data.classes_present(),
                                                      Rng::derive(seed, 0));
    Rng rng(Rng::derive(seed, 1));

    const int64_t sd = cfg.distill_steps;
    std::vector<detail::AdamState<T>> adam_x(static_cast<size_t>(sd));
    std::vector<detail::AdamState<T>> adam_y(static_cast<size_t>(sd));
    std::vector<detail::AdamState<T>> adam_eta(static_cast<size_t>(sd));

    std::vector<int64_t> order(static_cast<size_t>(client_data.size()));
    std::iota(order.begin(), order.end(), 0);

    for (int64_t e = 0; e < cfg.epochs; ++e) {
        const double lr = meta_lr(cfg, e);
        if (trace) trace->epoch_meta_lr.push_back(lr);
        rng.shuffle(order);
        for (int64_t pos = 0; pos < client_data.size(); pos += cfg.batch) {
            const int64_t take = std::min(cfg.batch, client_data.size() - pos);
            std::vector<int64_t> idx(order.begin() + pos, order.begin() + pos + take);

            ParamVector<T> theta_start =
                cfg.sigma_sr > 0.0 ? soft_reset(theta0, cfg.sigma_sr, rng) : theta0.detached();

            MaskToken<T> token;
            std::vector<char> masked(static_cast<size_t>(sd), 0);
            if (cfg.p_rm > 0.0) {
                token = random_mask(state, cfg.p_rm, rng);
                for (const auto& [j, x] : token.saved) masked[static_cast<size_t>(j)] = 1;
            }

            // Mark learnables. Masked steps' stand-in x tensors participate
            // in the unroll but receive no meta-update.
            std::vector<Tensor<T>> wrt;
            std::vector<std::pair<char, int64_t>> wrt_kind; // ('x'|'y'|'e', step)
            for (int64_t j = 0; j < sd; ++j) {
                auto& step = state.steps[static_cast<size_t>(j)];
                if (!masked[static_cast<size_t>(j)]) {
                    step.x.set_requires_grad(true);
                    wrt.push_back(step.x);
                    wrt_kind.emplace_back('x', j);
                }
                step.eta.set_requires_grad(true);
                wrt.push_back(step.eta);
                wrt_kind.emplace_back('e', j);
                if (cfg.soft_labels) {
                    step.y.set_requires_grad(true);
                    wrt.push_back(step.y);
                    wrt_kind.emplace_back('y', j);
                }
            }

            ParamVector<T> theta_final;
            try {
                theta_final = unroll(arch, theta_start, state, cfg.distill_epochs, true);
            } catch (const DivergenceError& err) {
                throw DivergenceError(std::string(err.what()) + " (distill epoch " +
                                      std::to_string(e) + ")");
            }
            Tensor<T> outer = softmax_cross_entropy(
                forward(arch, theta_final.values, client_data.batch_inputs(idx)),
                client_data.batch_onehot(idx));
            if (trace) trace->outer_loss.push_back(static_cast<double>(outer.item()));

            std::vector<Tensor<T>> grads = grad_wrt(outer, wrt);
            for (size_t i = 0; i < wrt.size(); ++i) {
                const auto [kind, j] = wrt_kind[i];
                auto& step = state.steps[static_cast<size_t>(j)];
                if (kind == 'x') adam_x[static_cast<size_t>(j)].update(step.x, grads[i].data(), lr);
                else if (kind == 'e') adam_eta[static_cast<size_t>(j)].update(step.eta, grads[i].data(), lr);
                else adam_y[static_cast<size_t>(j)].update(step.y, grads[i].data(), lr);
            }
            token.restore(state);
        }
    }
    state.seed = seed;
    return state;
}

// --- DistilledDataset serialization ---------------------------------------------

inline constexpr uint32_t kDistilledMagic = 0x31534444u; // "DDS1"

template <typename T>
void save_distilled(const DistilledDataset<T>& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open for writing: " + path);
    detail::write_u32le(f, kDistilledMagic);
    detail::write_u32le(f, 1);
    detail::write_string(f, ds.arch_id);
    detail::write_u32le(f, static_cast<uint32_t>(ds.step_count()));
    detail::write_u32le(f, static_cast<uint32_t>(ds.distill_batch));
    detail::write_u32le(f, static_cast<uint32_t>(ds.input_shape.size()));
    for (int64_t d : ds.input_shape) detail::write_u32le(f, static_cast<uint32_t>(d));
    detail::write_u32le(f, static_cast<uint32_t>(ds.n_cls));
    detail::write_u32le(f, ds.soft_labels ? 1 : 0);
    detail::write_u32le(f, static_cast<uint32_t>(sizeof(T) * 8));
    detail::write_u64le(f, ds.seed);
    detail::write_u64le(f, static_cast<uint64_t>(ds.client_id));
    for (const auto& step : ds.steps) {
        detail::write_scalars<T>(f, step.x.data());
        detail::write_scalars<T>(f, step.y.data());
        detail::write_scalars<T>(f, step.eta.data());
    }
}

template <typename T>
DistilledDataset<T> load_distilled(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open: " + path);
    if (detail::read_u32le(f, path) != kDistilledMagic)
        throw IngestionError("bad distilled-data magic: " + path);
    if (detail::read_u32le(f, path) != 1)
        throw IngestionError("unsupported distilled-data version in " + path);
    DistilledDataset<T> ds;
    ds.arch_id = detail::read_string(f, path);
    const uint32_t steps = detail::read_u32le(f, path);
    ds.distill_batch = detail::read_u32le(f, path);
    const uint32_t ndim = detail::read_u32le(f, path);
    for (uint32_t i = 0; i < ndim; ++i) ds.input_shape.push_back(detail::read_u32le(f, path));
    ds.n_cls = detail::read_u32le(f, path);
    ds.soft_labels = detail::read_u32le(f, path) != 0;
    const uint32_t bits = detail::read_u32le(f, path);
    if (bits != sizeof(T) * 8)
        throw IngestionError("distilled data in " + path + " stores " + std::to_string(bits) +
                             "-bit scalars");
    ds.seed = detail::read_u64le(f, path);
    ds.client_id = static_cast<int64_t>(detail::read_u64le(f, path));
    Shape xshape{ds.distill_batch};
    xshape.insert(xshape.end(), ds.input_shape.begin(), ds.input_shape.end());
    for (uint32_t j = 0; j < steps; ++j) {
        DistilledStep<T> step;
        step.x = Tensor<T>::from(
            detail::read_scalars<T>(f, static_cast<size_t>(shape_numel(xshape)), path), xshape);
        step.y = Tensor<T>::from(
            detail::read_scalars<T>(f, static_cast<size_t>(ds.distill_batch * ds.n_cls), path),
            Shape{ds.distill_batch, ds.n_cls});
        step.eta = Tensor<T>::from(detail::read_scalars<T>(f, 1, path), Shape{});
        ds.steps.push_back(std::move(step));
    }
    return ds;
}

} // namespace dosfl
