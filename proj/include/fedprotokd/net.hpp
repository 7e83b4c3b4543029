#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedprotokd/errors.hpp"
#include "fedprotokd/rng.hpp"
#include "fedprotokd/tape.hpp"
#include "fedprotokd/tensor.hpp"

namespace fedprotokd {

enum class Activation { kIdentity, kRelu };

struct DenseLayer {
    Tensor weight;  // in x out
    Tensor bias;    // out
    Activation activation = Activation::kIdentity;
};

// Plain fully connected network. Parameters are tracked tensors so the
// tape can bind them directly.
class DenseNet {
public:
    DenseNet() = default;

    explicit DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
        for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
            if (layers_[i].weight.cols() != layers_[i + 1].weight.rows()) {
                throw ShapeError("dense net: layer " + std::to_string(i) +
                                 " output does not feed layer " + std::to_string(i + 1));
            }
        }
        for (auto& layer : layers_) {
            if (layer.bias.numel() != layer.weight.cols()) {
                throw ShapeError("dense net: bias length does not match layer width");
            }
        }
    }

    std::size_t layer_count() const { return layers_.size(); }
    const DenseLayer& layer(std::size_t i) const { return layers_[i]; }
    DenseLayer& layer(std::size_t i) { return layers_[i]; }

    std::size_t input_dim() const { return layers_.front().weight.rows(); }
    std::size_t output_dim() const { return layers_.back().weight.cols(); }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (auto& layer : layers_) {
            out.push_back(&layer.weight);
            out.push_back(&layer.bias);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& layer : layers_) n += layer.weight.numel() + layer.bias.numel();
        return n;
    }

    bool all_finite() const {
        for (const auto& layer : layers_) {
            for (double v : layer.weight.values())
                if (!std::isfinite(v)) return false;
            for (double v : layer.bias.values())
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    std::vector<DenseLayer> layers_;
};

// Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
inline DenseNet make_dense_net(const std::vector<std::size_t>& dims,
                               const std::vector<Activation>& activations,
                               std::uint64_t seed) {
    if (dims.size() < 2) {
        throw UsageError("make_dense_net: need at least input and output dims");
    }
    if (activations.size() != dims.size() - 1) {
        throw UsageError("make_dense_net: one activation per layer required");
    }
    Rng rng(seed);
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const std::size_t fan_in = dims[i], fan_out = dims[i + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        DenseLayer layer;
        layer.weight = Tensor({fan_in, fan_out});
        for (double& w : layer.weight.values()) w = rng.uniform(-limit, limit);
        layer.bias = Tensor({fan_out});
        layer.activation = activations[i];
        layer.weight.track();
        layer.bias.track();
        layers.push_back(std::move(layer));
    }
    return DenseNet(std::move(layers));
}

inline Tensor forward(const DenseNet& net, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != net.input_dim()) {
        throw ShapeError("forward: input " + x.shape_string() + " does not match net input dim " +
                         std::to_string(net.input_dim()));
    }
    Tensor h = x;
    for (std::size_t li = 0; li < net.layer_count(); ++li) {
        const DenseLayer& layer = net.layer(li);
        const std::size_t n = h.rows(), k = h.cols(), m = layer.weight.cols();
        Tensor out({n, m});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t l = 0; l < k; ++l) {
                const double hv = h.at(i, l);
                if (hv == 0.0) continue;
                for (std::size_t j = 0; j < m; ++j) out.at(i, j) += hv * layer.weight.at(l, j);
            }
            for (std::size_t j = 0; j < m; ++j) out.at(i, j) += layer.bias[j];
        }
        if (layer.activation == Activation::kRelu) {
            for (double& v : out.values()) v = std::max(0.0, v);
        }
        h = std::move(out);
    }
    return h;
}

// Taped forward from an existing node (used when the input itself is a
// tracked parameter, e.g. trainable prototype bases).
inline Tape::NodeId forward(Tape& tape, DenseNet& net, Tape::NodeId x) {
    if (tape.value(x).rank() != 2 || tape.value(x).cols() != net.input_dim()) {
        throw ShapeError("forward: input " + tape.value(x).shape_string() +
                         " does not match net input dim " + std::to_string(net.input_dim()));
    }
    Tape::NodeId h = x;
    for (std::size_t li = 0; li < net.layer_count(); ++li) {
        DenseLayer& layer = net.layer(li);
        Tape::NodeId w = tape.parameter(layer.weight);
        Tape::NodeId b = tape.parameter(layer.bias);
        h = tape.add_row(tape.matmul(h, w), b);
        if (layer.activation == Activation::kRelu) h = tape.relu(h);
    }
    return h;
}

inline Tape::NodeId forward(Tape& tape, DenseNet& net, const Tensor& x) {
    return forward(tape, net, tape.constant(x));
}

// Taped forward that treats the net's own parameters as constants, so
// gradients flow only through the input node (frozen feature extractors).
inline Tape::NodeId forward_frozen(Tape& tape, const DenseNet& net, Tape::NodeId x) {
    if (tape.value(x).rank() != 2 || tape.value(x).cols() != net.input_dim()) {
        throw ShapeError("forward: input " + tape.value(x).shape_string() +
                         " does not match net input dim " + std::to_string(net.input_dim()));
    }
    Tape::NodeId h = x;
    for (std::size_t li = 0; li < net.layer_count(); ++li) {
        const DenseLayer& layer = net.layer(li);
        Tape::NodeId w = tape.constant(layer.weight);
        Tape::NodeId b = tape.constant(layer.bias);
        h = tape.add_row(tape.matmul(h, w), b);
        if (layer.activation == Activation::kRelu) h = tape.relu(h);
    }
    return h;
}

// Momentum SGD: v <- mu*v + g; p <- p - lr*v. Gradients are consumed
// (zeroed) by step().
class SgdOptimizer {
public:
    explicit SgdOptimizer(double learning_rate = 0.01, double momentum = 0.9)
        : learning_rate_(learning_rate), momentum_(momentum) {
        if (learning_rate <= 0.0) throw DomainError("sgd: learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw DomainError("sgd: momentum must be in [0,1)");
    }

    void step(const std::vector<Tensor*>& params) {
        if (velocity_.empty()) {
            velocity_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                velocity_[i].assign(params[i]->numel(), 0.0);
            }
        }
        if (velocity_.size() != params.size()) {
            throw UsageError("sgd: parameter list changed between steps");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            if (!p.tracked()) {
                throw UsageError("sgd: parameter has no gradient buffer");
            }
            auto& v = velocity_[i];
            if (v.size() != p.numel()) {
                throw UsageError("sgd: parameter shape changed between steps");
            }
            auto& g = p.grad();
            for (std::size_t j = 0; j < p.numel(); ++j) {
                v[j] = momentum_ * v[j] + g[j];
                p[j] -= learning_rate_ * v[j];
            }
            p.zero_grad();
        }
    }

    double learning_rate() const { return learning_rate_; }
    double momentum() const { return momentum_; }

private:
    double learning_rate_;
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

}  // namespace fedprotokd
