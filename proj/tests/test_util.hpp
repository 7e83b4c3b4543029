#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fedprotokd/net.hpp"
#include "fedprotokd/tensor.hpp"

namespace testutil {

// Central-difference gradient of `loss` with respect to every entry of
// every parameter, evaluated at the current parameter values.
inline std::vector<double> finite_difference_gradient(
    const std::vector<fedprotokd::Tensor*>& params, const std::function<double()>& loss,
    double h = 1e-5) {
    std::vector<double> grads;
    for (fedprotokd::Tensor* p : params) {
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double saved = (*p)[i];
            (*p)[i] = saved + h;
            const double up = loss();
            (*p)[i] = saved - h;
            const double down = loss();
            (*p)[i] = saved;
            grads.push_back((up - down) / (2.0 * h));
        }
    }
    return grads;
}

inline std::vector<double> collect_gradients(const std::vector<fedprotokd::Tensor*>& params) {
    std::vector<double> grads;
    for (fedprotokd::Tensor* p : params) {
        for (double g : p->grad()) grads.push_back(g);
    }
    return grads;
}

// Relative error with a small absolute floor so near-zero gradients are
// compared absolutely.
inline double gradient_error(const std::vector<double>& analytic,
                             const std::vector<double>& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom =
            std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), 1e-6});
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

// True when any relu preactivation of the net on `x` sits within `tol`
// of the kink, where finite differences are unreliable.
inline bool near_relu_kink(const fedprotokd::DenseNet& net, const fedprotokd::Tensor& x,
                           double tol = 1e-3) {
    fedprotokd::Tensor h = x;
    for (std::size_t li = 0; li < net.layer_count(); ++li) {
        const auto& layer = net.layer(li);
        const std::size_t n = h.rows(), k = h.cols(), m = layer.weight.cols();
        fedprotokd::Tensor out({n, m});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t l = 0; l < k; ++l) {
                for (std::size_t j = 0; j < m; ++j) {
                    out.at(i, j) += h.at(i, l) * layer.weight.at(l, j);
                }
            }
            for (std::size_t j = 0; j < m; ++j) out.at(i, j) += layer.bias[j];
        }
        if (layer.activation == fedprotokd::Activation::kRelu) {
            for (double v : out.values()) {
                if (std::fabs(v) < tol) return true;
            }
            for (double& v : out.values()) v = std::max(0.0, v);
        }
        h = std::move(out);
    }
    return false;
}

}  // namespace testutil
