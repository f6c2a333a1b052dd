#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dosfl/data.hpp"
#include "dosfl/ops.hpp"

namespace dosfl {

enum class ArchKind { Mlp, LeNetLite, LeNet };

enum class InitMethod {
    XavierNormal,
    XavierUniform,
    KaimingNormal,
    KaimingUniform,
    Orthogonal,
    DefaultUniform,
};

inline const char* to_string(InitMethod m) {
    switch (m) {
        case InitMethod::XavierNormal: return "xavier-normal";
        case InitMethod::XavierUniform: return "xavier-uniform";
        case InitMethod::KaimingNormal: return "kaiming-normal";
        case InitMethod::KaimingUniform: return "kaiming-uniform";
        case InitMethod::Orthogonal: return "orthogonal";
        case InitMethod::DefaultUniform: return "default-uniform";
    }
    return "?";
}

inline InitMethod init_method_from_string(const std::string& s) {
    for (InitMethod m : {InitMethod::XavierNormal, InitMethod::XavierUniform,
                         InitMethod::KaimingNormal, InitMethod::KaimingUniform,
                         InitMethod::Orthogonal, InitMethod::DefaultUniform})
        if (s == to_string(m)) return m;
    throw ConfigError("unknown init method '" + s + "'");
}

inline const std::vector<InitMethod>& all_init_methods() {
    static const std::vector<InitMethod> all = {
        InitMethod::XavierNormal,  InitMethod::XavierUniform, InitMethod::KaimingNormal,
        InitMethod::KaimingUniform, InitMethod::Orthogonal,   InitMethod::DefaultUniform};
    return all;
}

// Classifier architecture description. The canonical id string fully
// determines the parameter layout.
struct ArchitectureSpec {
    ArchKind kind = ArchKind::Mlp;
    Shape input_shape;                 // {D} for mlp, {C,H,W} for conv nets
    int64_t n_cls = 0;
    std::vector<int64_t> hidden;       // mlp hidden widths

    int64_t input_numel() const { return shape_numel(input_shape); }

    std::string id() const {
        std::ostringstream os;
        switch (kind) {
            case ArchKind::Mlp:
                os << "mlp-" << input_numel();
                for (int64_t h : hidden) os << "-" << h;
                os << "-" << n_cls;
                break;
            case ArchKind::LeNetLite:
                os << "lenet-lite-" << input_shape[0] << "x" << input_shape[1] << "x"
                   << input_shape[2] << "-" << n_cls;
                break;
            case ArchKind::LeNet:
                os << "lenet-" << input_shape[0] << "x" << input_shape[1] << "x"
                   << input_shape[2] << "-" << n_cls;
                break;
        }
        return os.str();
    }

    void validate() const {
        if (n_cls < 2) throw ConfigError("architecture needs at least 2 classes");
        if (kind != ArchKind::Mlp) {
            if (input_shape.size() != 3)
                throw ConfigError("conv architectures need a {C,H,W} input shape");
            if (input_shape[1] != 28 || input_shape[2] != 28)
                throw ConfigError("lenet variants are defined for 28x28 inputs");
        } else if (input_shape.empty()) {
            throw ConfigError("mlp needs a nonempty input shape");
        }
    }

    static ArchitectureSpec mlp(int64_t in, std::vector<int64_t> hid, int64_t classes) {
        ArchitectureSpec s;
        s.kind = ArchKind::Mlp;
        s.input_shape = {in};
        s.hidden = std::move(hid);
        s.n_cls = classes;
        return s;
    }

    static ArchitectureSpec lenet_lite(int64_t channels, int64_t classes) {
        ArchitectureSpec s;
        s.kind = ArchKind::LeNetLite;
        s.input_shape = {channels, 28, 28};
        s.n_cls = classes;
        return s;
    }

    static ArchitectureSpec lenet(int64_t channels, int64_t classes) {
        ArchitectureSpec s;
        s.kind = ArchKind::LeNet;
        s.input_shape = {channels, 28, 28};
        s.n_cls = classes;
        return s;
    }
};

// One named parameter tensor in the architecture's fixed layout order.
struct ParamDef {
    std::string name;
    Shape shape;
    int64_t fan_in = 0;
    int64_t fan_out = 0;
    bool is_bias = false;
};

// Layout is a pure function of the architecture. Linear weights are stored
// [in, out] so the forward pass is matmul(x, W) without transposes; conv
// weights are [F, C, KH, KW].
inline std::vector<ParamDef> param_layout(const ArchitectureSpec& arch) {
    arch.validate();
    std::vector<ParamDef> defs;
    auto linear = [&defs](const std::string& name, int64_t in, int64_t out) {
        defs.push_back({name + ".weight", Shape{in, out}, in, out, false});
        defs.push_back({name + ".bias", Shape{out}, in, out, true});
    };
    auto conv = [&defs](const std::string& name, int64_t f, int64_t c, int64_t k) {
        defs.push_back({name + ".weight", Shape{f, c, k, k}, c * k * k, f * k * k, false});
        defs.push_back({name + ".bias", Shape{f}, c * k * k, f * k * k, true});
    };
    switch (arch.kind) {
        case ArchKind::Mlp: {
            std::vector<int64_t> dims{arch.input_numel()};
            dims.insert(dims.end(), arch.hidden.begin(), arch.hidden.end());
            dims.push_back(arch.n_cls);
            for (size_t i = 0; i + 1 < dims.size(); ++i)
                linear("fc" + std::to_string(i + 1), dims[i], dims[i + 1]);
            break;
        }
        case ArchKind::LeNetLite: {
            const int64_t c = arch.input_shape[0];
            conv("conv1", 8, c, 5);   // 28 -> 24, pool -> 12
            conv("conv2", 16, 8, 5);  // 12 -> 8, pool -> 4
            linear("fc1", 16 * 4 * 4, arch.n_cls);
            break;
        }
        case ArchKind::LeNet: {
            // The 61,706-parameter variant: conv1 is padded so 28x28 inputs
            // behave like the original 32x32, and the first dense layer
            // stands in for the C5 convolution (equivalent at this size).
            const int64_t c = arch.input_shape[0];
            conv("conv1", 6, c, 5);   // pad 2: 28 -> 28, pool -> 14
            conv("conv2", 16, 6, 5);  // 14 -> 10, pool -> 5
            linear("fc1", 16 * 5 * 5, 120);
            linear("fc2", 120, 84);
            linear("fc3", 84, arch.n_cls);
            break;
        }
    }
    return defs;
}

inline int64_t param_count(const ArchitectureSpec& arch) {
    int64_t total = 0;
    for (const auto& def : param_layout(arch)) total += shape_numel(def.shape);
    return total;
}

// Flat model parameter state: ordered tensors following param_layout.
template <typename T>
struct ParamVector {
    std::string arch_id;
    std::vector<Tensor<T>> values;

    int64_t total() const {
        int64_t n = 0;
        for (const auto& v : values) n += v.numel();
        return n;
    }

    std::vector<T> flatten() const {
        std::vector<T> flat;
        flat.reserve(static_cast<size_t>(total()));
        for (const auto& v : values) flat.insert(flat.end(), v.data().begin(), v.data().end());
        return flat;
    }

    ParamVector detached() const {
        ParamVector out;
        out.arch_id = arch_id;
        out.values.reserve(values.size());
        for (const auto& v : values) out.values.push_back(v.detach());
        return out;
    }
};

template <typename T>
ParamVector<T> params_from_flat(const ArchitectureSpec& arch, const std::vector<T>& flat) {
    const auto layout = param_layout(arch);
    ParamVector<T> pv;
    pv.arch_id = arch.id();
    size_t pos = 0;
    for (const auto& def : layout) {
        const size_t n = static_cast<size_t>(shape_numel(def.shape));
        if (pos + n > flat.size()) throw ContractViolation("flat parameter buffer too short");
        pv.values.push_back(
            Tensor<T>::from(std::vector<T>(flat.begin() + static_cast<int64_t>(pos),
                                           flat.begin() + static_cast<int64_t>(pos + n)),
                            def.shape));
        pos += n;
    }
    if (pos != flat.size()) throw ContractViolation("flat parameter buffer too long");
    return pv;
}

namespace detail {

template <typename T>
std::vector<T> orthogonal_matrix(int64_t rows, int64_t cols, Rng& rng) {
    // QR of a Gaussian draw; sign-fixed by diag(R) so the distribution is
    // uniform over the orthogonal group. Tall case gives orthonormal
    // columns, wide case orthonormal rows.
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
    const bool tall = rows >= cols;
    const int64_t r = tall ? rows : cols;
    const int64_t c = tall ? cols : rows;
    Mat a(r, c);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Mat> qr(a);
    Mat q = qr.householderQ() * Mat::Identity(r, c);
    Mat rm = qr.matrixQR().topRows(c).template triangularView<Eigen::Upper>();
    for (int64_t j = 0; j < c; ++j)
        if (rm(j, j) < 0) q.col(j) = -q.col(j);
    std::vector<T> out(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j)
            out[static_cast<size_t>(i * cols + j)] =
                static_cast<T>(tall ? q(i, j) : q(j, i));
    return out;
}

} // namespace detail

// Deterministic parameter initialization. Weight statistics follow the named
// scheme; biases are zero except under default-uniform, which applies the
// fan-in-scaled uniform rule to both weights and biases.
template <typename T>
ParamVector<T> init_params(const ArchitectureSpec& arch, InitMethod method, uint64_t seed) {
    const auto layout = param_layout(arch);
    Rng rng(seed);
    ParamVector<T> pv;
    pv.arch_id = arch.id();
    pv.values.reserve(layout.size());
    for (const auto& def : layout) {
        const size_t n = static_cast<size_t>(shape_numel(def.shape));
        std::vector<T> buf(n, T(0));
        if (def.is_bias) {
            if (method == InitMethod::DefaultUniform) {
                const double bound = 1.0 / std::sqrt(static_cast<double>(def.fan_in));
                for (auto& v : buf) v = static_cast<T>(rng.uniform(-bound, bound));
            }
        } else {
            switch (method) {
                case InitMethod::XavierNormal: {
                    const double std_ = std::sqrt(2.0 / static_cast<double>(def.fan_in + def.fan_out));
                    for (auto& v : buf) v = static_cast<T>(rng.normal() * std_);
                    break;
                }
                case InitMethod::XavierUniform: {
                    const double bound = std::sqrt(6.0 / static_cast<double>(def.fan_in + def.fan_out));
                    for (auto& v : buf) v = static_cast<T>(rng.uniform(-bound, bound));
                    break;
                }
                case InitMethod::KaimingNormal: {
                    const double std_ = std::sqrt(2.0 / static_cast<double>(def.fan_in));
                    for (auto& v : buf) v = static_cast<T>(rng.normal() * std_);
                    break;
                }
                case InitMethod::KaimingUniform: {
                    const double bound = std::sqrt(6.0 / static_cast<double>(def.fan_in));
                    for (auto& v : buf) v = static_cast<T>(rng.uniform(-bound, bound));
                    break;
                }
                case InitMethod::Orthogonal: {
                    const int64_t rows = def.shape[0];
                    const int64_t cols = shape_numel(def.shape) / rows;
                    buf = detail::orthogonal_matrix<T>(rows, cols, rng);
                    break;
                }
                case InitMethod::DefaultUniform: {
                    const double bound = 1.0 / std::sqrt(static_cast<double>(def.fan_in));
                    for (auto& v : buf) v = static_cast<T>(rng.uniform(-bound, bound));
                    break;
                }
            }
        }
        pv.values.push_back(Tensor<T>::from(std::move(buf), def.shape));
    }
    return pv;
}

// Forward pass to logits [B, n_cls]. Works on any parameter tensors that
// follow the architecture's layout, graph-tracked or not.
template <typename T>
Tensor<T> forward(const ArchitectureSpec& arch, const std::vector<Tensor<T>>& p,
                  const Tensor<T>& x) {
    switch (arch.kind) {
        case ArchKind::Mlp: {
            Tensor<T> h = reshape(x, Shape{x.shape()[0], arch.input_numel()});
            const size_t layers = p.size() / 2;
            for (size_t i = 0; i < layers; ++i) {
                h = bias_add(matmul(h, p[2 * i]), p[2 * i + 1]);
                if (i + 1 < layers) h = tanh(h);
            }
            return h;
        }
        case ArchKind::LeNetLite: {
            Tensor<T> h = maxpool2(tanh(channel_bias_add(conv2d(x, p[0], 0), p[1])));
            h = maxpool2(tanh(channel_bias_add(conv2d(h, p[2], 0), p[3])));
            h = reshape(h, Shape{x.shape()[0], 16 * 4 * 4});
            return bias_add(matmul(h, p[4]), p[5]);
        }
        case ArchKind::LeNet: {
            Tensor<T> h = maxpool2(tanh(channel_bias_add(conv2d(x, p[0], 2), p[1])));
            h = maxpool2(tanh(channel_bias_add(conv2d(h, p[2], 0), p[3])));
            h = reshape(h, Shape{x.shape()[0], 16 * 5 * 5});
            h = tanh(bias_add(matmul(h, p[4]), p[5]));
            h = tanh(bias_add(matmul(h, p[6]), p[7]));
            return bias_add(matmul(h, p[8]), p[9]);
        }
    }
    throw ContractViolation("unreachable architecture kind");
}

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

// Test-set accuracy and mean cross-entropy. Argmax ties break to the lowest
// class index. Pure: repeated calls agree exactly.
template <typename T>
EvalResult evaluate(const ArchitectureSpec& arch, const ParamVector<T>& params,
                    const LabeledDataset<T>& ds, int64_t batch = 256) {
    if (ds.size() == 0) throw ContractViolation("evaluate on empty dataset");
    if (ds.example_numel() != arch.input_numel())
        throw ContractViolation("evaluate: dataset example shape " +
                                shape_str(ds.example_shape) + " incompatible with architecture " +
                                arch.id());
    int64_t correct = 0;
    double loss_sum = 0.0;
    for (int64_t start = 0; start < ds.size(); start += batch) {
        const int64_t take = std::min(batch, ds.size() - start);
        std::vector<int64_t> idx(static_cast<size_t>(take));
        std::iota(idx.begin(), idx.end(), start);
        Tensor<T> logits = forward(arch, params.values, ds.batch_inputs(idx));
        Tensor<T> loss = softmax_cross_entropy(logits, ds.batch_onehot(idx));
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(take);
        const auto lg = logits.data();
        for (int64_t i = 0; i < take; ++i) {
            int64_t best = 0;
            for (int64_t c = 1; c < ds.n_cls; ++c)
                if (lg[static_cast<size_t>(i * ds.n_cls + c)] >
                    lg[static_cast<size_t>(i * ds.n_cls + best)])
                    best = c;
            if (static_cast<int32_t>(best) == ds.labels[static_cast<size_t>(start + i)]) ++correct;
        }
    }
    return {static_cast<double>(correct) / static_cast<double>(ds.size()),
            loss_sum / static_cast<double>(ds.size())};
}

// Plain minibatch SGD on cross-entropy; the local trainer used by the FedAvg
// baseline and the centrally-trained references.
template <typename T>
ParamVector<T> sgd_train(const ArchitectureSpec& arch, const ParamVector<T>& start,
                         const LabeledDataset<T>& ds, int64_t epochs, int64_t batch, double lr,
                         uint64_t seed) {
    ParamVector<T> params = start.detached();
    Rng rng(seed);
    std::vector<int64_t> order(static_cast<size_t>(ds.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (int64_t pos = 0; pos < ds.size(); pos += batch) {
            const int64_t take = std::min(batch, ds.size() - pos);
            std::vector<int64_t> idx(order.begin() + pos, order.begin() + pos + take);
            for (auto& v : params.values) v.set_requires_grad(true);
            Tensor<T> loss = softmax_cross_entropy(forward(arch, params.values, ds.batch_inputs(idx)),
                                                   ds.batch_onehot(idx));
            std::vector<Tensor<T>> grads = grad_wrt(loss, params.values);
            for (size_t i = 0; i < params.values.size(); ++i) {
                std::vector<T> next(params.values[i].data().begin(), params.values[i].data().end());
                const auto g = grads[i].data();
                for (size_t j = 0; j < next.size(); ++j) next[j] -= static_cast<T>(lr) * g[j];
                params.values[i] = Tensor<T>::from(std::move(next), params.values[i].shape());
            }
        }
    }
    return params;
}

// --- ParamVector serialization: versioned little-endian binary ------------------

namespace detail {

inline void write_u32le(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32le(std::istream& in, const std::string& file) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IngestionError("truncated file: " + file);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

inline void write_u64le(std::ostream& out, uint64_t v) {
    write_u32le(out, static_cast<uint32_t>(v));
    write_u32le(out, static_cast<uint32_t>(v >> 32));
}

inline uint64_t read_u64le(std::istream& in, const std::string& file) {
    uint64_t lo = read_u32le(in, file);
    uint64_t hi = read_u32le(in, file);
    return lo | (hi << 32);
}

inline void write_string(std::ostream& out, const std::string& s) {
    write_u32le(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const std::string& file) {
    uint32_t n = read_u32le(in, file);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw IngestionError("truncated file: " + file);
    return s;
}

template <typename T>
void write_scalars(std::ostream& out, std::span<const T> vals) {
    // Little-endian IEEE; byte-identical on every supported platform.
    static_assert(std::endian::native == std::endian::little,
                  "big-endian hosts need byte swaps here");
    out.write(reinterpret_cast<const char*>(vals.data()),
              static_cast<std::streamsize>(vals.size() * sizeof(T)));
}

template <typename T>
std::vector<T> read_scalars(std::istream& in, size_t count, const std::string& file) {
    std::vector<T> vals(count);
    in.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(count * sizeof(T)));
    if (!in) throw IngestionError("truncated file: " + file);
    return vals;
}

} // namespace detail

inline constexpr uint32_t kParamMagic = 0x31565044u; // "DPV1"

template <typename T>
void save_params(const ParamVector<T>& pv, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open for writing: " + path);
    detail::write_u32le(f, kParamMagic);
    detail::write_u32le(f, 1); // version
    detail::write_string(f, pv.arch_id);
    detail::write_u32le(f, static_cast<uint32_t>(sizeof(T) * 8)); // precision bits
    for (const auto& v : pv.values) detail::write_scalars<T>(f, v.data());
}

template <typename T>
ParamVector<T> load_params(const ArchitectureSpec& arch, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open: " + path);
    if (detail::read_u32le(f, path) != kParamMagic)
        throw IngestionError("bad parameter-file magic: " + path);
    const uint32_t version = detail::read_u32le(f, path);
    if (version != 1) throw IngestionError("unsupported parameter-file version in " + path);
    const std::string arch_id = detail::read_string(f, path);
    if (arch_id != arch.id())
        throw IngestionError("parameter file " + path + " is for architecture '" + arch_id +
                             "', expected '" + arch.id() + "'");
    const uint32_t bits = detail::read_u32le(f, path);
    if (bits != sizeof(T) * 8)
        throw IngestionError("parameter file " + path + " stores " + std::to_string(bits) +
                             "-bit scalars");
    ParamVector<T> pv;
    pv.arch_id = arch_id;
    for (const auto& def : param_layout(arch)) {
        auto vals = detail::read_scalars<T>(f, static_cast<size_t>(shape_numel(def.shape)), path);
        pv.values.push_back(Tensor<T>::from(std::move(vals), def.shape));
    }
    return pv;
}

} // namespace dosfl
