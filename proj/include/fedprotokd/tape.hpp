#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fedprotokd/errors.hpp"
#include "fedprotokd/tensor.hpp"

namespace fedprotokd {

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& logits) {
    Tensor out = logits;
    const std::size_t n = logits.rows();
    const std::size_t s = logits.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < s; ++j) mx = std::max(mx, logits.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
            out.at(i, j) = std::exp(logits.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (std::size_t j = 0; j < s; ++j) out.at(i, j) /= sum;
    }
    return out;
}

// Row-wise log-softmax.
inline Tensor log_softmax_rows(const Tensor& logits) {
    Tensor out = logits;
    const std::size_t n = logits.rows();
    const std::size_t s = logits.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < s; ++j) mx = std::max(mx, logits.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < s; ++j) sum += std::exp(logits.at(i, j) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < s; ++j) out.at(i, j) = logits.at(i, j) - lse;
    }
    return out;
}

// Reverse-mode tape for feedforward computations. Nodes are created in
// topological order; backward() walks them in reverse and accumulates
// gradients into the tracked parameter tensors bound via parameter().
class Tape {
public:
    using NodeId = std::size_t;

    NodeId constant(Tensor value) {
        return push(std::move(value), {}, false, nullptr, {});
    }

    // Binds an external tracked tensor as a leaf; backward() accumulates
    // into its grad buffer.
    NodeId parameter(Tensor& param) {
        if (!param.tracked()) {
            throw UsageError("tape: parameter() requires a tracked tensor");
        }
        return push(param, {}, true, &param, {});
    }

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    bool tracked(NodeId id) const { return nodes_[id].tracked; }
    double scalar(NodeId id) const {
        if (nodes_[id].value.numel() != 1) {
            throw UsageError("tape: scalar() on non-scalar node");
        }
        return nodes_[id].value[0];
    }

    // --- operations --------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
            throw ShapeError("matmul: incompatible shapes " + A.shape_string() +
                             " x " + B.shape_string());
        }
        const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
        Tensor C({n, m});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t l = 0; l < k; ++l) {
                const double av = A.at(i, l);
                if (av == 0.0) continue;
                for (std::size_t j = 0; j < m; ++j) {
                    C.at(i, j) += av * B.at(l, j);
                }
            }
        }
        return push(std::move(C), {a, b}, track_any({a, b}), nullptr,
                    [a, b, n, k, m](Tape& t, const Node& node) {
                        const Tensor& Av = t.nodes_[a].value;
                        const Tensor& Bv = t.nodes_[b].value;
                        if (t.nodes_[a].tracked) {
                            auto& ga = t.nodes_[a].grad;
                            for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < m; ++j) {
                                    const double g = node.grad[i * m + j];
                                    if (g == 0.0) continue;
                                    for (std::size_t l = 0; l < k; ++l)
                                        ga[i * k + l] += g * Bv.at(l, j);
                                }
                        }
                        if (t.nodes_[b].tracked) {
                            auto& gb = t.nodes_[b].grad;
                            for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t l = 0; l < k; ++l) {
                                    const double av = Av.at(i, l);
                                    if (av == 0.0) continue;
                                    for (std::size_t j = 0; j < m; ++j)
                                        gb[l * m + j] += av * node.grad[i * m + j];
                                }
                        }
                    });
    }

    // Broadcast-add a length-m bias vector to every row of an n x m matrix.
    NodeId add_row(NodeId a, NodeId bias) {
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[bias].value;
        if (A.rank() != 2 || B.numel() != A.cols()) {
            throw ShapeError("add_row: bias length " + B.shape_string() +
                             " does not match matrix " + A.shape_string());
        }
        Tensor C = A;
        const std::size_t n = A.rows(), m = A.cols();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) C.at(i, j) += B[j];
        return push(std::move(C), {a, bias}, track_any({a, bias}), nullptr,
                    [a, bias, n, m](Tape& t, const Node& node) {
                        if (t.nodes_[a].tracked) {
                            auto& ga = t.nodes_[a].grad;
                            for (std::size_t i = 0; i < node.grad.size(); ++i)
                                ga[i] += node.grad[i];
                        }
                        if (t.nodes_[bias].tracked) {
                            auto& gb = t.nodes_[bias].grad;
                            for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < m; ++j)
                                    gb[j] += node.grad[i * m + j];
                        }
                    });
    }

    NodeId relu(NodeId a) {
        Tensor C = nodes_[a].value;
        for (double& v : C.values()) v = std::max(0.0, v);
        return push(std::move(C), {a}, nodes_[a].tracked, nullptr,
                    [a](Tape& t, const Node& node) {
                        if (!t.nodes_[a].tracked) return;
                        auto& ga = t.nodes_[a].grad;
                        const Tensor& av = t.nodes_[a].value;
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                            if (av[i] > 0.0) ga[i] += node.grad[i];
                    });
    }

    NodeId add(NodeId a, NodeId b) {
        require_same_shape(nodes_[a].value, nodes_[b].value, "add");
        Tensor C = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        for (std::size_t i = 0; i < C.numel(); ++i) C[i] += B[i];
        return push(std::move(C), {a, b}, track_any({a, b}), nullptr,
                    [a, b](Tape& t, const Node& node) {
                        for (NodeId p : {a, b}) {
                            if (!t.nodes_[p].tracked) continue;
                            auto& g = t.nodes_[p].grad;
                            for (std::size_t i = 0; i < node.grad.size(); ++i)
                                g[i] += node.grad[i];
                        }
                    });
    }

    NodeId scale(NodeId a, double c) {
        Tensor C = nodes_[a].value;
        for (double& v : C.values()) v *= c;
        return push(std::move(C), {a}, nodes_[a].tracked, nullptr,
                    [a, c](Tape& t, const Node& node) {
                        if (!t.nodes_[a].tracked) return;
                        auto& ga = t.nodes_[a].grad;
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                            ga[i] += c * node.grad[i];
                    });
    }

    NodeId add_constant(NodeId a, const Tensor& k) {
        require_same_shape(nodes_[a].value, k, "add_constant");
        Tensor C = nodes_[a].value;
        for (std::size_t i = 0; i < C.numel(); ++i) C[i] += k[i];
        return push(std::move(C), {a}, nodes_[a].tracked, nullptr,
                    [a](Tape& t, const Node& node) {
                        if (!t.nodes_[a].tracked) return;
                        auto& ga = t.nodes_[a].grad;
                        for (std::size_t i = 0; i < node.grad.size(); ++i)
                            ga[i] += node.grad[i];
                    });
    }

    // Euclidean distances between fixed anchor rows (b x k) and tracked
    // point rows (s x k); result is b x s.
    NodeId pairwise_distance(const Tensor& anchors, NodeId points) {
        const Tensor& P = nodes_[points].value;
        if (anchors.rank() != 2 || P.rank() != 2 || anchors.cols() != P.cols()) {
            throw ShapeError("pairwise_distance: anchors " + anchors.shape_string() +
                             " vs points " + P.shape_string());
        }
        const std::size_t b = anchors.rows(), s = P.rows(), k = P.cols();
        Tensor D({b, s});
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < s; ++j) {
                double acc = 0.0;
                for (std::size_t l = 0; l < k; ++l) {
                    const double diff = anchors.at(i, l) - P.at(j, l);
                    acc += diff * diff;
                }
                D.at(i, j) = std::sqrt(acc);
            }
        Tensor anchors_copy = anchors;
        return push(std::move(D), {points}, nodes_[points].tracked, nullptr,
                    [points, anchors_copy, b, s, k](Tape& t, const Node& node) {
                        if (!t.nodes_[points].tracked) return;
                        auto& gp = t.nodes_[points].grad;
                        const Tensor& P = t.nodes_[points].value;
                        for (std::size_t i = 0; i < b; ++i)
                            for (std::size_t j = 0; j < s; ++j) {
                                const double g = node.grad[i * s + j];
                                if (g == 0.0) continue;
                                const double d = std::max(node.value.at(i, j), 1e-12);
                                for (std::size_t l = 0; l < k; ++l) {
                                    gp[j * k + l] +=
                                        g * (P.at(j, l) - anchors_copy.at(i, l)) / d;
                                }
                            }
                    });
    }

    // Mean over the batch of -log softmax(logits)[label], optionally
    // weighted per sample.
    NodeId cross_entropy(NodeId logits, const std::vector<int>& labels,
                         const std::vector<double>& weights = {}) {
        const Tensor& Z = nodes_[logits].value;
        if (Z.rank() != 2 || labels.size() != Z.rows()) {
            throw ShapeError("cross_entropy: labels size does not match logit rows");
        }
        if (!weights.empty() && weights.size() != labels.size()) {
            throw ShapeError("cross_entropy: weights size does not match logit rows");
        }
        const std::size_t n = Z.rows(), s = Z.cols();
        for (int label : labels) {
            if (label < 0 || static_cast<std::size_t>(label) >= s) {
                throw DomainError("cross_entropy: label " + std::to_string(label) +
                                  " out of range [0," + std::to_string(s) + ")");
            }
        }
        Tensor probs = softmax_rows(Z);
        Tensor logp = log_softmax_rows(Z);
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double w = weights.empty() ? 1.0 : weights[i];
            loss -= w * logp.at(i, static_cast<std::size_t>(labels[i]));
        }
        loss /= static_cast<double>(n);
        return push(Tensor({1}, {loss}), {logits}, nodes_[logits].tracked, nullptr,
                    [logits, probs, labels, weights, n, s](Tape& t, const Node& node) {
                        if (!t.nodes_[logits].tracked) return;
                        auto& gz = t.nodes_[logits].grad;
                        const double g = node.grad[0] / static_cast<double>(n);
                        for (std::size_t i = 0; i < n; ++i) {
                            const double w = weights.empty() ? 1.0 : weights[i];
                            for (std::size_t j = 0; j < s; ++j) {
                                double p = probs.at(i, j);
                                if (j == static_cast<std::size_t>(labels[i])) p -= 1.0;
                                gz[i * s + j] += g * w * p;
                            }
                        }
                    });
    }

    // Mean over the batch of KL(softmax(teacher) || softmax(student));
    // the teacher is a constant, gradient flows to the student only.
    NodeId kl_divergence(const Tensor& teacher_logits, NodeId student) {
        const Tensor& Z = nodes_[student].value;
        require_same_shape(teacher_logits, Z, "kl_divergence");
        const std::size_t n = Z.rows(), s = Z.cols();
        Tensor p = softmax_rows(teacher_logits);
        Tensor logp = log_softmax_rows(teacher_logits);
        Tensor q = softmax_rows(Z);
        Tensor logq = log_softmax_rows(Z);
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < s; ++j) {
                const double pij = p.at(i, j);
                if (pij > 0.0) loss += pij * (logp.at(i, j) - logq.at(i, j));
            }
        loss /= static_cast<double>(n);
        return push(Tensor({1}, {loss}), {student}, nodes_[student].tracked, nullptr,
                    [student, p, q, n, s](Tape& t, const Node& node) {
                        if (!t.nodes_[student].tracked) return;
                        auto& gz = t.nodes_[student].grad;
                        const double g = node.grad[0] / static_cast<double>(n);
                        for (std::size_t i = 0; i < n * s; ++i)
                            gz[i] += g * (q[i] - p[i]);
                    });
    }

    // Mean of squared element differences against a constant target.
    NodeId mse(NodeId a, const Tensor& target) {
        const Tensor& A = nodes_[a].value;
        require_same_shape(A, target, "mse");
        const std::size_t n = A.numel();
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = A[i] - target[i];
            loss += d * d;
        }
        loss /= static_cast<double>(n);
        Tensor target_copy = target;
        return push(Tensor({1}, {loss}), {a}, nodes_[a].tracked, nullptr,
                    [a, target_copy, n](Tape& t, const Node& node) {
                        if (!t.nodes_[a].tracked) return;
                        auto& ga = t.nodes_[a].grad;
                        const Tensor& A = t.nodes_[a].value;
                        const double g = 2.0 * node.grad[0] / static_cast<double>(n);
                        for (std::size_t i = 0; i < n; ++i)
                            ga[i] += g * (A[i] - target_copy[i]);
                    });
    }

    NodeId mse(NodeId a, NodeId b) {
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        require_same_shape(A, B, "mse");
        const std::size_t n = A.numel();
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = A[i] - B[i];
            loss += d * d;
        }
        loss /= static_cast<double>(n);
        return push(Tensor({1}, {loss}), {a, b}, track_any({a, b}), nullptr,
                    [a, b, n](Tape& t, const Node& node) {
                        const Tensor& A = t.nodes_[a].value;
                        const Tensor& B = t.nodes_[b].value;
                        const double g = 2.0 * node.grad[0] / static_cast<double>(n);
                        if (t.nodes_[a].tracked) {
                            auto& ga = t.nodes_[a].grad;
                            for (std::size_t i = 0; i < n; ++i) ga[i] += g * (A[i] - B[i]);
                        }
                        if (t.nodes_[b].tracked) {
                            auto& gb = t.nodes_[b].grad;
                            for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (A[i] - B[i]);
                        }
                    });
    }

    // --- backward ----------------------------------------------------------

    // Seeds d(loss)/d(loss)=1 and accumulates gradients into every bound
    // parameter tensor reachable from `loss`.
    void backward(NodeId loss) {
        Node& top = nodes_[loss];
        if (top.value.numel() != 1) {
            throw UsageError("backward: loss must be a scalar");
        }
        if (!top.tracked) {
            throw UsageError("backward: loss does not depend on any tracked parameter");
        }
        top.grad.assign(1, 1.0);
        for (std::size_t i = loss + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (!node.tracked || node.grad.empty()) continue;
            if (node.backprop) {
                ensure_parent_grads(node);
                node.backprop(*this, node);
            }
            if (node.param != nullptr) {
                auto& pg = node.param->grad();
                for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += node.grad[j];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        std::vector<NodeId> parents;
        bool tracked = false;
        Tensor* param = nullptr;
        std::function<void(Tape&, const Node&)> backprop;
    };

    bool track_any(std::initializer_list<NodeId> ids) const {
        return std::any_of(ids.begin(), ids.end(),
                           [&](NodeId id) { return nodes_[id].tracked; });
    }

    void ensure_parent_grads(const Node& node) {
        for (NodeId p : node.parents) {
            Node& parent = nodes_[p];
            if (parent.tracked && parent.grad.empty()) {
                parent.grad.assign(parent.value.numel(), 0.0);
            }
        }
    }

    NodeId push(Tensor value, std::vector<NodeId> parents, bool tracked,
                Tensor* param, std::function<void(Tape&, const Node&)> backprop) {
        Node node;
        node.value = std::move(value);
        node.parents = std::move(parents);
        node.tracked = tracked;
        node.param = param;
        node.backprop = std::move(backprop);
        nodes_.push_back(std::move(node));
        return nodes_.size() - 1;
    }

    std::vector<Node> nodes_;
};

}  // namespace fedprotokd
