#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "dosfl/tensor.hpp"

// Primitive op set: matrix multiply, 2-D convolution, max-pool, element-wise
// arithmetic, tanh/relu/sigmoid/exp, stable log-sum-exp (the fused core of
// softmax cross-entropy), reductions, and the broadcast helpers the model zoo
// needs. Every VJP is expressed in terms of these same ops, so reverse passes
// are recordable and gradients of gradients are exact.

namespace dosfl {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
std::vector<T> kernel_matmul(const std::vector<T>& a, const std::vector<T>& b, int64_t m,
                             int64_t k, int64_t n) {
    std::vector<T> out(static_cast<size_t>(m * n));
    Eigen::Map<const MatRM<T>> A(a.data(), m, k);
    Eigen::Map<const MatRM<T>> B(b.data(), k, n);
    Eigen::Map<MatRM<T>> C(out.data(), m, n);
    C.noalias() = A * B;
    return out;
}

template <typename T>
std::vector<T> kernel_transpose(const std::vector<T>& a, int64_t m, int64_t n) {
    std::vector<T> out(a.size());
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

enum class EwCase { Same, ScalarLeft, ScalarRight };

template <typename T, typename F>
std::vector<T> kernel_elementwise(const std::vector<T>& a, const std::vector<T>& b, EwCase c,
                                  F f) {
    if (c == EwCase::Same) {
        std::vector<T> out(a.size());
        for (size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    if (c == EwCase::ScalarLeft) {
        std::vector<T> out(b.size());
        for (size_t i = 0; i < b.size(); ++i) out[i] = f(a[0], b[i]);
        return out;
    }
    std::vector<T> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[0]);
    return out;
}

inline int64_t rows_of(const Shape& s) {
    int64_t r = 1;
    for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
    return r;
}
inline int64_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

} // namespace detail

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// --- element-wise arithmetic -------------------------------------------------

namespace detail {
template <typename T>
EwCase classify_ew(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return EwCase::Same;
    if (a.numel() == 1) return EwCase::ScalarLeft;
    if (b.numel() == 1) return EwCase::ScalarRight;
    throw ContractViolation(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
}
} // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    using detail::EwCase;
    EwCase c = detail::classify_ew("add", a, b);
    auto data = detail::kernel_elementwise(a.node()->data, b.node()->data, c,
                                           [](T x, T y) { return x + y; });
    Shape shape = (c == EwCase::ScalarLeft) ? b.shape() : a.shape();
    return make_op<T>(
        "add", shape, std::move(data), {a, b},
        [c](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>& need) {
            const auto& ins = self.node()->inputs;
            std::vector<Tensor<T>> out(2);
            if (need[0]) out[0] = (c == EwCase::ScalarLeft) ? reshape(sum(g), ins[0].shape()) : g;
            if (need[1]) out[1] = (c == EwCase::ScalarRight) ? reshape(sum(g), ins[1].shape()) : g;
            return out;
        },
        [c](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_elementwise(*ins[0], *ins[1], c, [](T x, T y) { return x + y; });
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    using detail::EwCase;
    EwCase c = detail::classify_ew("sub", a, b);
    auto data = detail::kernel_elementwise(a.node()->data, b.node()->data, c,
                                           [](T x, T y) { return x - y; });
    Shape shape = (c == EwCase::ScalarLeft) ? b.shape() : a.shape();
    return make_op<T>(
        "sub", shape, std::move(data), {a, b},
        [c](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>& need) {
            const auto& ins = self.node()->inputs;
            std::vector<Tensor<T>> out(2);
            if (need[0]) out[0] = (c == EwCase::ScalarLeft) ? reshape(sum(g), ins[0].shape()) : g;
            if (need[1]) {
                Tensor<T> ng = neg(g);
                out[1] = (c == EwCase::ScalarRight) ? reshape(sum(ng), ins[1].shape()) : ng;
            }
            return out;
        },
        [c](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_elementwise(*ins[0], *ins[1], c, [](T x, T y) { return x - y; });
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    using detail::EwCase;
    EwCase c = detail::classify_ew("mul", a, b);
    auto data = detail::kernel_elementwise(a.node()->data, b.node()->data, c,
                                           [](T x, T y) { return x * y; });
    Shape shape = (c == EwCase::ScalarLeft) ? b.shape() : a.shape();
    return make_op<T>(
        "mul", shape, std::move(data), {a, b},
        [c](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>& need) {
            const auto& ins = self.node()->inputs;
            std::vector<Tensor<T>> out(2);
            if (need[0]) {
                Tensor<T> ga = mul(g, ins[1]);
                out[0] = (c == EwCase::ScalarLeft) ? reshape(sum(ga), ins[0].shape()) : ga;
            }
            if (need[1]) {
                Tensor<T> gb = mul(g, ins[0]);
                out[1] = (c == EwCase::ScalarRight) ? reshape(sum(gb), ins[1].shape()) : gb;
            }
            return out;
        },
        [c](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_elementwise(*ins[0], *ins[1], c, [](T x, T y) { return x * y; });
        });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    std::vector<T> data(a.data().begin(), a.data().end());
    for (auto& v : data) v = -v;
    return make_op<T>(
        "neg", a.shape(), std::move(data), {a},
        [](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{neg(g)};
        },
        [](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(*ins[0]);
            for (auto& v : out) v = -v;
            return out;
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return mul(a, Tensor<T>::scalar(c));
}

// --- shape ops ---------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ContractViolation("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                " changes element count");
    Shape orig = a.shape();
    return make_op<T>(
        "reshape", shape, std::vector<T>(a.data().begin(), a.data().end()), {a},
        [orig](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{reshape(g, orig)};
        },
        [](const std::vector<const std::vector<T>*>& ins) { return *ins[0]; });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw ContractViolation("transpose expects a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    return make_op<T>(
        "transpose", Shape{n, m},
        detail::kernel_transpose(a.node()->data, m, n), {a},
        [](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{transpose(g)};
        },
        [m, n](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_transpose(*ins[0], m, n);
        });
}

// --- matmul ------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ContractViolation("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    return make_op<T>(
        "matmul", Shape{m, n},
        detail::kernel_matmul(a.node()->data, b.node()->data, m, k, n), {a, b},
        [](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>& need) {
            const auto& ins = self.node()->inputs;
            std::vector<Tensor<T>> out(2);
            if (need[0]) out[0] = matmul(g, transpose(ins[1]));
            if (need[1]) out[1] = matmul(transpose(ins[0]), g);
            return out;
        },
        [m, k, n](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_matmul(*ins[0], *ins[1], m, k, n);
        });
}

// --- activations -------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    auto mask = std::make_shared<std::vector<T>>(a.data().size());
    std::vector<T> data(a.data().size());
    for (size_t i = 0; i < data.size(); ++i) {
        bool pos = a.data()[i] > T(0);
        (*mask)[i] = pos ? T(1) : T(0);
        data[i] = pos ? a.data()[i] : T(0);
    }
    return make_op<T>(
        "relu", a.shape(), std::move(data), {a},
        [mask](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{masked(g, mask)};
        },
        [](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(*ins[0]);
            for (auto& v : out) v = v > T(0) ? v : T(0);
            return out;
        });
}

// g with a fixed 0/1 mask applied; linear in g (the mask is constant, which is
// exact almost everywhere for relu and max-pool second derivatives).
template <typename T>
Tensor<T> masked(const Tensor<T>& g, std::shared_ptr<std::vector<T>> mask) {
    std::vector<T> data(g.data().size());
    for (size_t i = 0; i < data.size(); ++i) data[i] = g.data()[i] * (*mask)[i];
    return make_op<T>(
        "masked", g.shape(), std::move(data), {g},
        [mask](const Tensor<T>&, const Tensor<T>& gg, const std::vector<char>&) {
            return std::vector<Tensor<T>>{masked(gg, mask)};
        },
        [mask](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(*ins[0]);
            for (size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
            return out;
        });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    std::vector<T> data(a.data().begin(), a.data().end());
    for (auto& v : data) v = std::tanh(v);
    return make_op<T>(
        "tanh", a.shape(), std::move(data), {a},
        [](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>&) {
            Tensor<T> one = Tensor<T>::scalar(T(1));
            return std::vector<Tensor<T>>{mul(g, sub(one, mul(self, self)))};
        },
        [](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(*ins[0]);
            for (auto& v : out) v = std::tanh(v);
            return out;
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> data(a.data().begin(), a.data().end());
    for (auto& v : data) v = T(1) / (T(1) + std::exp(-v));
    return make_op<T>(
        "sigmoid", a.shape(), std::move(data), {a},
        [](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>&) {
            Tensor<T> one = Tensor<T>::scalar(T(1));
            return std::vector<Tensor<T>>{mul(g, mul(self, sub(one, self)))};
        },
        [](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(*ins[0]);
            for (auto& v : out) v = T(1) / (T(1) + std::exp(-v));
            return out;
        });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> data(a.data().begin(), a.data().end());
    for (auto& v : data) v = std::exp(v);
    return make_op<T>(
        "exp", a.shape(), std::move(data), {a},
        [](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{mul(g, self)};
        },
        [](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(*ins[0]);
            for (auto& v : out) v = std::exp(v);
            return out;
        });
}

// --- reductions / broadcasts ---------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    Shape orig = a.shape();
    return make_op<T>(
        "sum", Shape{}, std::vector<T>{s}, {a},
        [orig](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{broadcast_scalar(g, orig)};
        },
        [](const std::vector<const std::vector<T>*>& ins) {
            T s2 = 0;
            for (T v : *ins[0]) s2 += v;
            return std::vector<T>{s2};
        });
}

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& s, Shape shape) {
    if (s.numel() != 1) throw ContractViolation("broadcast_scalar expects a scalar");
    return make_op<T>(
        "broadcast_scalar", shape,
        std::vector<T>(static_cast<size_t>(shape_numel(shape)), s.item()), {s},
        [](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{reshape(sum(g), self.node()->inputs[0].shape())};
        },
        [shape](const std::vector<const std::vector<T>*>& ins) {
            return std::vector<T>(static_cast<size_t>(shape_numel(shape)), (*ins[0])[0]);
        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Row-wise sum of a [B, n] matrix, keeping the row axis: result [B, 1].
template <typename T>
Tensor<T> rowsum(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw ContractViolation("rowsum expects a matrix");
    int64_t b = a.shape()[0], n = a.shape()[1];
    std::vector<T> data(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        T s = 0;
        for (int64_t j = 0; j < n; ++j) s += a.data()[i * n + j];
        data[static_cast<size_t>(i)] = s;
    }
    return make_op<T>(
        "rowsum", Shape{b, 1}, std::move(data), {a},
        [n](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{row_broadcast(g, n)};
        },
        [b, n](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(static_cast<size_t>(b));
            for (int64_t i = 0; i < b; ++i) {
                T s = 0;
                for (int64_t j = 0; j < n; ++j) s += (*ins[0])[i * n + j];
                out[static_cast<size_t>(i)] = s;
            }
            return out;
        });
}

// [B, 1] -> [B, n] by repeating each row value.
template <typename T>
Tensor<T> row_broadcast(const Tensor<T>& a, int64_t n) {
    if (a.shape().size() != 2 || a.shape()[1] != 1)
        throw ContractViolation("row_broadcast expects shape [B,1]");
    int64_t b = a.shape()[0];
    std::vector<T> data(static_cast<size_t>(b * n));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < n; ++j) data[i * n + j] = a.data()[static_cast<size_t>(i)];
    return make_op<T>(
        "row_broadcast", Shape{b, n}, std::move(data), {a},
        [](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{rowsum(g)};
        },
        [b, n](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(static_cast<size_t>(b * n));
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < n; ++j) out[i * n + j] = (*ins[0])[static_cast<size_t>(i)];
            return out;
        });
}

// Column-wise sum of [B, n]: result [n]. Adjoint of a row-broadcast bias.
template <typename T>
Tensor<T> colsum(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw ContractViolation("colsum expects a matrix");
    int64_t b = a.shape()[0], n = a.shape()[1];
    std::vector<T> data(static_cast<size_t>(n), T(0));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < n; ++j) data[static_cast<size_t>(j)] += a.data()[i * n + j];
    return make_op<T>(
        "colsum", Shape{n}, std::move(data), {a},
        [b](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{tile_rows(g, b)};
        },
        [b, n](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(static_cast<size_t>(n), T(0));
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j)] += (*ins[0])[i * n + j];
            return out;
        });
}

// [n] -> [B, n] by stacking copies.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& a, int64_t b) {
    if (a.shape().size() != 1) throw ContractViolation("tile_rows expects a vector");
    int64_t n = a.shape()[0];
    std::vector<T> data(static_cast<size_t>(b * n));
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < n; ++j) data[i * n + j] = a.data()[static_cast<size_t>(j)];
    return make_op<T>(
        "tile_rows", Shape{b, n}, std::move(data), {a},
        [](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{colsum(g)};
        },
        [b, n](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(static_cast<size_t>(b * n));
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < n; ++j) out[i * n + j] = (*ins[0])[static_cast<size_t>(j)];
            return out;
        });
}

// Linear-layer bias: [B, n] + [n].
template <typename T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.shape().size() != 2 || b.shape().size() != 1 || x.shape()[1] != b.shape()[0])
        throw ContractViolation("bias_add: incompatible shapes " + shape_str(x.shape()) +
                                " + " + shape_str(b.shape()));
    return add(x, tile_rows(b, x.shape()[0]));
}

// --- stable log-sum-exp / softmax / cross-entropy ------------------------------

// Row-wise log(sum(exp(x))) with max-shift stabilization; result [B, 1].
template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw ContractViolation("logsumexp_rows expects a matrix");
    int64_t b = a.shape()[0], n = a.shape()[1];
    auto kernel = [b, n](const std::vector<T>& in) {
        std::vector<T> out(static_cast<size_t>(b));
        for (int64_t i = 0; i < b; ++i) {
            T mx = in[i * n];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[i * n + j]);
            T s = 0;
            for (int64_t j = 0; j < n; ++j) s += std::exp(in[i * n + j] - mx);
            out[static_cast<size_t>(i)] = mx + std::log(s);
        }
        return out;
    };
    return make_op<T>(
        "logsumexp_rows", Shape{b, 1},
        kernel(a.node()->data), {a},
        [n](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>&) {
            // d lse / d x = softmax(x), rebuilt from the saved output so the
            // expression stays differentiable.
            const Tensor<T>& x = self.node()->inputs[0];
            Tensor<T> sm = exp(sub(x, row_broadcast(self, n)));
            return std::vector<Tensor<T>>{mul(row_broadcast(g, n), sm)};
        },
        [kernel](const std::vector<const std::vector<T>*>& ins) { return kernel(*ins[0]); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& z) {
    return exp(sub(z, row_broadcast(logsumexp_rows(z), z.shape()[1])));
}

// Mean cross-entropy -sum_c t_c log softmax(z)_c between logits [B, n] and
// target weight rows [B, n]:
//   mean_i( lse(z_i) * sum_c t_ic - sum_c t_ic * z_ic ).
// Targets need not be normalized (learnable soft-label vectors are applied
// directly); for probability rows this is the ordinary cross-entropy.
// Log-sum-exp keeps the value finite for arbitrarily large logits.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.shape() != targets.shape() || logits.shape().size() != 2)
        throw ContractViolation("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                                " vs targets " + shape_str(targets.shape()));
    int64_t b = logits.shape()[0];
    Tensor<T> lse = sum(mul(logsumexp_rows(logits), rowsum(targets)));
    Tensor<T> dot = sum(mul(targets, logits));
    return scale(sub(lse, dot), T(1) / static_cast<T>(b));
}

// --- 2-D convolution (stride 1, zero padding) -----------------------------------

namespace detail {

struct ConvDims {
    int64_t B, C, H, W;   // input
    int64_t F, KH, KW;    // filters
    int64_t pad;
    int64_t OH, OW;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, int64_t pad) {
    if (x.size() != 4 || w.size() != 4 || x[1] != w[1])
        throw ContractViolation("conv2d: expects x[B,C,H,W], w[F,C,KH,KW], got " +
                                shape_str(x) + " and " + shape_str(w));
    ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], pad, 0, 0};
    d.OH = d.H + 2 * pad - d.KH + 1;
    d.OW = d.W + 2 * pad - d.KW + 1;
    if (d.OH <= 0 || d.OW <= 0) throw ContractViolation("conv2d: kernel larger than input");
    return d;
}

// Batched col layout: [C*KH*KW, B*OH*OW], image b in columns [b*OHW, (b+1)*OHW).
// One big GEMM per conv instead of one tiny GEMM per image.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col, int64_t row_stride) {
    const int64_t ohw = d.OH * d.OW;
    for (int64_t c = 0; c < d.C; ++c) {
        for (int64_t kh = 0; kh < d.KH; ++kh) {
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                const int64_t r = (c * d.KH + kh) * d.KW + kw;
                T* dst = col + r * row_stride;
                for (int64_t oh = 0; oh < d.OH; ++oh) {
                    const int64_t ih = oh + kh - d.pad;
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        const int64_t iw = ow + kw - d.pad;
                        dst[oh * d.OW + ow] =
                            (ih >= 0 && ih < d.H && iw >= 0 && iw < d.W)
                                ? x[(c * d.H + ih) * d.W + iw]
                                : T(0);
                    }
                }
            }
        }
    }
    (void)ohw;
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* x, int64_t row_stride) {
    for (int64_t c = 0; c < d.C; ++c) {
        for (int64_t kh = 0; kh < d.KH; ++kh) {
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                const int64_t r = (c * d.KH + kh) * d.KW + kw;
                const T* src = col + r * row_stride;
                for (int64_t oh = 0; oh < d.OH; ++oh) {
                    const int64_t ih = oh + kh - d.pad;
                    if (ih < 0 || ih >= d.H) continue;
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        const int64_t iw = ow + kw - d.pad;
                        if (iw < 0 || iw >= d.W) continue;
                        x[(c * d.H + ih) * d.W + iw] += src[oh * d.OW + ow];
                    }
                }
            }
        }
    }
}

template <typename T>
std::vector<T> batched_im2col(const std::vector<T>& x, const ConvDims& d) {
    const int64_t ckk = d.C * d.KH * d.KW;
    const int64_t ohw = d.OH * d.OW;
    std::vector<T> col(static_cast<size_t>(ckk * d.B * ohw));
    for (int64_t b = 0; b < d.B; ++b)
        im2col(x.data() + b * d.C * d.H * d.W, d, col.data() + b * ohw, d.B * ohw);
    return col;
}

// [B, F, OHW] <-> [F, B*OHW] permutations around the GEMMs.
template <typename T>
std::vector<T> gather_grad_rows(const std::vector<T>& g, const ConvDims& d) {
    const int64_t ohw = d.OH * d.OW;
    std::vector<T> gm(static_cast<size_t>(d.F * d.B * ohw));
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t f = 0; f < d.F; ++f)
            std::copy_n(g.data() + (b * d.F + f) * ohw, ohw,
                        gm.data() + f * d.B * ohw + b * ohw);
    return gm;
}

template <typename T>
std::vector<T> kernel_conv2d(const std::vector<T>& x, const std::vector<T>& w,
                             const ConvDims& d) {
    const int64_t ckk = d.C * d.KH * d.KW;
    const int64_t ohw = d.OH * d.OW;
    std::vector<T> col = batched_im2col(x, d);
    std::vector<T> y(static_cast<size_t>(d.F * d.B * ohw));
    {
        Eigen::Map<const MatRM<T>> W(w.data(), d.F, ckk);
        Eigen::Map<const MatRM<T>> Col(col.data(), ckk, d.B * ohw);
        Eigen::Map<MatRM<T>> Y(y.data(), d.F, d.B * ohw);
        Y.noalias() = W * Col;
    }
    std::vector<T> out(static_cast<size_t>(d.B * d.F * ohw));
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t f = 0; f < d.F; ++f)
            std::copy_n(y.data() + f * d.B * ohw + b * ohw, ohw,
                        out.data() + (b * d.F + f) * ohw);
    return out;
}

// dL/dx of conv2d: W^T * g, scattered back through col2im.
template <typename T>
std::vector<T> kernel_conv2d_input_grad(const std::vector<T>& g, const std::vector<T>& w,
                                        const ConvDims& d) {
    const int64_t ckk = d.C * d.KH * d.KW;
    const int64_t ohw = d.OH * d.OW;
    std::vector<T> gm = gather_grad_rows(g, d);
    std::vector<T> col(static_cast<size_t>(ckk * d.B * ohw));
    {
        Eigen::Map<const MatRM<T>> W(w.data(), d.F, ckk);
        Eigen::Map<const MatRM<T>> G(gm.data(), d.F, d.B * ohw);
        Eigen::Map<MatRM<T>> Col(col.data(), ckk, d.B * ohw);
        Col.noalias() = W.transpose() * G;
    }
    std::vector<T> out(static_cast<size_t>(d.B * d.C * d.H * d.W), T(0));
    for (int64_t b = 0; b < d.B; ++b)
        col2im_add(col.data() + b * ohw, d, out.data() + b * d.C * d.H * d.W, d.B * ohw);
    return out;
}

// dL/dw of conv2d: g * col^T summed over images, as one GEMM.
template <typename T>
std::vector<T> kernel_conv2d_weight_grad(const std::vector<T>& g, const std::vector<T>& x,
                                         const ConvDims& d) {
    const int64_t ckk = d.C * d.KH * d.KW;
    const int64_t ohw = d.OH * d.OW;
    std::vector<T> gm = gather_grad_rows(g, d);
    std::vector<T> col = batched_im2col(x, d);
    std::vector<T> out(static_cast<size_t>(d.F * ckk));
    Eigen::Map<const MatRM<T>> G(gm.data(), d.F, d.B * ohw);
    Eigen::Map<const MatRM<T>> Col(col.data(), ckk, d.B * ohw);
    Eigen::Map<MatRM<T>> DW(out.data(), d.F, ckk);
    DW.noalias() = G * Col.transpose();
    return out;
}

} // namespace detail

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& g, const Tensor<T>& w, Shape x_shape, int64_t pad);
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& g, const Tensor<T>& x, Shape w_shape, int64_t pad);

// conv2d and its two gradient ops form a closed family under differentiation:
//   d conv2d(x,w)        -> (conv2d_input_grad(g,w), conv2d_weight_grad(g,x))
//   d conv2d_input_grad  -> (conv2d(u,w),            conv2d_weight_grad(g,u))
//   d conv2d_weight_grad -> (conv2d(x,u),            conv2d_input_grad(g,u))
// (u is the upstream adjoint; each op is bilinear in its tensor arguments.)
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t pad = 0) {
    detail::ConvDims d = detail::conv_dims(x.shape(), w.shape(), pad);
    return make_op<T>(
        "conv2d", Shape{d.B, d.F, d.OH, d.OW},
        detail::kernel_conv2d(x.node()->data, w.node()->data, d), {x, w},
        [d, pad](const Tensor<T>& self, const Tensor<T>& g, const std::vector<char>& need) {
            const auto& ins = self.node()->inputs;
            std::vector<Tensor<T>> out(2);
            if (need[0]) out[0] = conv2d_input_grad(g, ins[1], ins[0].shape(), pad);
            if (need[1]) out[1] = conv2d_weight_grad(g, ins[0], ins[1].shape(), pad);
            return out;
        },
        [d](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_conv2d(*ins[0], *ins[1], d);
        });
}

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& g, const Tensor<T>& w, Shape x_shape, int64_t pad) {
    detail::ConvDims d = detail::conv_dims(x_shape, w.shape(), pad);
    return make_op<T>(
        "conv2d_input_grad", x_shape,
        detail::kernel_conv2d_input_grad(g.node()->data, w.node()->data, d), {g, w},
        [pad](const Tensor<T>& self, const Tensor<T>& u, const std::vector<char>& need) {
            const auto& ins = self.node()->inputs;
            std::vector<Tensor<T>> out(2);
            if (need[0]) out[0] = conv2d(u, ins[1], pad);
            if (need[1]) out[1] = conv2d_weight_grad(ins[0], u, ins[1].shape(), pad);
            return out;
        },
        [d](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_conv2d_input_grad(*ins[0], *ins[1], d);
        });
}

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& g, const Tensor<T>& x, Shape w_shape, int64_t pad) {
    detail::ConvDims d = detail::conv_dims(x.shape(), w_shape, pad);
    return make_op<T>(
        "conv2d_weight_grad", w_shape,
        detail::kernel_conv2d_weight_grad(g.node()->data, x.node()->data, d), {g, x},
        [pad](const Tensor<T>& self, const Tensor<T>& u, const std::vector<char>& need) {
            const auto& ins = self.node()->inputs;
            std::vector<Tensor<T>> out(2);
            if (need[0]) out[0] = conv2d(ins[1], u, pad);
            if (need[1]) out[1] = conv2d_input_grad(ins[0], u, ins[1].shape(), pad);
            return out;
        },
        [d](const std::vector<const std::vector<T>*>& ins) {
            return detail::kernel_conv2d_weight_grad(*ins[0], *ins[1], d);
        });
}

// Per-channel bias for conv outputs: [B, F, H, W] + [F].
template <typename T>
Tensor<T> channel_bias_add(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.shape().size() != 4 || b.shape().size() != 1 || x.shape()[1] != b.shape()[0])
        throw ContractViolation("channel_bias_add: incompatible shapes");
    int64_t B = x.shape()[0], F = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    // reshape to [B*F? no] -> treat as [B, F, HW]: go through tile trick
    // x_mat [B*F, HW] + per-row scalar where row -> channel (b*F+f) % F
    Shape orig = x.shape();
    Tensor<T> xm = reshape(x, Shape{B * F, HW});
    // bias vector expanded to [B*F]: tile b B times
    Tensor<T> brep = reshape(tile_rows(b, B), Shape{B * F, 1});
    Tensor<T> out = add(xm, row_broadcast(brep, HW));
    return reshape(out, orig);
}

// --- max pooling ----------------------------------------------------------------

template <typename T>
Tensor<T> pool_scatter(const Tensor<T>& g, std::shared_ptr<std::vector<int64_t>> idx,
                       Shape x_shape);

template <typename T>
Tensor<T> pool_gather(const Tensor<T>& x, std::shared_ptr<std::vector<int64_t>> idx,
                      Shape out_shape);

// 2x2 max pooling, stride 2. Ties resolve to the first element in scan order.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
    if (x.shape().size() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0)
        throw ContractViolation("maxpool2 expects [B,C,H,W] with even H and W, got " +
                                shape_str(x.shape()));
    int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int64_t OH = H / 2, OW = W / 2;
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(B * C * OH * OW));
    std::vector<T> data(idx->size());
    const auto in = x.data();
    size_t o = 0;
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const int64_t base = bc * H * W;
        for (int64_t oh = 0; oh < OH; ++oh) {
            for (int64_t ow = 0; ow < OW; ++ow) {
                int64_t best = base + (2 * oh) * W + 2 * ow;
                T bv = in[static_cast<size_t>(best)];
                for (int dh = 0; dh < 2; ++dh) {
                    for (int dw = 0; dw < 2; ++dw) {
                        int64_t p = base + (2 * oh + dh) * W + (2 * ow + dw);
                        if (in[static_cast<size_t>(p)] > bv) {
                            bv = in[static_cast<size_t>(p)];
                            best = p;
                        }
                    }
                }
                (*idx)[o] = best;
                data[o] = bv;
                ++o;
            }
        }
    }
    Shape out_shape{B, C, OH, OW};
    Shape x_shape = x.shape();
    return make_op<T>(
        "maxpool2", out_shape, std::move(data), {x},
        [idx, x_shape](const Tensor<T>&, const Tensor<T>& g, const std::vector<char>&) {
            return std::vector<Tensor<T>>{pool_scatter(g, idx, x_shape)};
        },
        [idx](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(idx->size());
            for (size_t i = 0; i < idx->size(); ++i)
                out[i] = (*ins[0])[static_cast<size_t>((*idx)[i])];
            return out;
        });
}

template <typename T>
Tensor<T> pool_scatter(const Tensor<T>& g, std::shared_ptr<std::vector<int64_t>> idx,
                       Shape x_shape) {
    std::vector<T> data(static_cast<size_t>(shape_numel(x_shape)), T(0));
    for (size_t i = 0; i < idx->size(); ++i)
        data[static_cast<size_t>((*idx)[i])] += g.data()[i];
    Shape g_shape = g.shape();
    return make_op<T>(
        "pool_scatter", x_shape, std::move(data), {g},
        [idx, g_shape](const Tensor<T>&, const Tensor<T>& u, const std::vector<char>&) {
            return std::vector<Tensor<T>>{pool_gather(u, idx, g_shape)};
        },
        [idx, x_shape](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(static_cast<size_t>(shape_numel(x_shape)), T(0));
            for (size_t i = 0; i < idx->size(); ++i)
                out[static_cast<size_t>((*idx)[i])] += (*ins[0])[i];
            return out;
        });
}

template <typename T>
Tensor<T> pool_gather(const Tensor<T>& x, std::shared_ptr<std::vector<int64_t>> idx,
                      Shape out_shape) {
    std::vector<T> data(idx->size());
    for (size_t i = 0; i < idx->size(); ++i)
        data[i] = x.data()[static_cast<size_t>((*idx)[i])];
    Shape x_shape = x.shape();
    return make_op<T>(
        "pool_gather", out_shape, std::move(data), {x},
        [idx, x_shape](const Tensor<T>&, const Tensor<T>& u, const std::vector<char>&) {
            return std::vector<Tensor<T>>{pool_scatter(u, idx, x_shape)};
        },
        [idx](const std::vector<const std::vector<T>*>& ins) {
            std::vector<T> out(idx->size());
            for (size_t i = 0; i < idx->size(); ++i)
                out[i] = (*ins[0])[static_cast<size_t>((*idx)[i])];
            return out;
        });
}

// Adjoint accumulation used by grad_wrt.
template <typename T>
Tensor<T> accumulate_adjoint(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, b);
}

} // namespace dosfl
