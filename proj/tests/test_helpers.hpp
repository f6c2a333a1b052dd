#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dosfl/ops.hpp"

namespace dosfl::testing {

// Normwise relative error: ||a - b||_2 / max(||a||_2, ||b||_2, tiny).
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
    return std::sqrt(diff) / denom;
}

template <typename T>
std::vector<double> to_doubles(const Tensor<T>& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

// Central-difference gradient oracle, independent of the reverse-mode path:
// re-evaluates the scalar function at x +/- h per coordinate.
template <typename T>
std::vector<std::vector<double>> finite_diff_grad(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    const std::vector<Tensor<T>>& inputs, double h = 1e-5) {
    std::vector<std::vector<double>> grads;
    for (size_t which = 0; which < inputs.size(); ++which) {
        std::vector<double> g(static_cast<size_t>(inputs[which].numel()));
        for (size_t j = 0; j < g.size(); ++j) {
            auto eval_at = [&](double delta) {
                std::vector<Tensor<T>> probe;
                for (size_t k = 0; k < inputs.size(); ++k) {
                    std::vector<T> d(inputs[k].data().begin(), inputs[k].data().end());
                    if (k == which) d[j] = static_cast<T>(static_cast<double>(d[j]) + delta);
                    probe.push_back(Tensor<T>::from(std::move(d), inputs[k].shape()));
                }
                return static_cast<double>(f(probe).item());
            };
            g[j] = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

} // namespace dosfl::testing
