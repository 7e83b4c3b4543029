#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedprotokd/data.hpp"
#include "fedprotokd/errors.hpp"
#include "fedprotokd/model.hpp"
#include "fedprotokd/net.hpp"
#include "fedprotokd/rng.hpp"

namespace fedprotokd {

using PrototypeMap = std::map<int, std::vector<double>>;

// Per-class mean projected features. Deliberately count-free: sample
// counts never leave the client unless the counted variant is requested
// explicitly, so averaging protocols that need them must say so in the
// type system.
struct ClientPrototypes {
    PrototypeMap by_class;
};

struct CountedClientPrototypes {
    ClientPrototypes prototypes;
    std::map<int, std::size_t> counts;
};

struct TrainOptions {
    double learning_rate = 0.01;
    double momentum = 0.9;
};

// Mean per-sample loss terms over the final epoch.
struct TrainTrace {
    double total = 0.0;
    double cross_entropy = 0.0;
    double prototype_alignment = 0.0;
    double kl = 0.0;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size,
                                                         Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

inline Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), m.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t j = 0; j < m.cols(); ++j) out.at(r, j) = m.at(rows[r], j);
    }
    return out;
}

// Shared local-training loop; prototype alignment is skipped entirely
// when epsilon is zero so the RNG stream (and hence the trajectory)
// matches plain supervised training exactly.
inline TrainTrace train_local(ProjectedNet& net, const Dataset& data,
                              const PrototypeMap* server_prototypes, double epsilon,
                              std::size_t epochs, std::size_t batch_size, std::uint64_t seed,
                              const TrainOptions& opts) {
    data.validate();
    if (data.size() == 0) throw DomainError("local training: empty dataset");
    if (batch_size == 0) throw DomainError("local training: batch size must be positive");
    if (epsilon < 0.0) throw DomainError("local training: epsilon must be nonnegative");
    if (epsilon > 0.0) {
        if (server_prototypes == nullptr) {
            throw UsageError("local training: epsilon > 0 requires server prototypes");
        }
        for (int y : data.labels) {
            if (server_prototypes->find(y) == server_prototypes->end()) {
                throw ConfigError("local training: no server prototype for class " +
                                  std::to_string(y));
            }
        }
    }
    TrainTrace trace;
    if (epochs == 0) return trace;

    Rng rng(seed);
    SgdOptimizer opt(opts.learning_rate, opts.momentum);
    auto params = net.trainable_parameters();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const bool last = (epoch + 1 == epochs);
        double sum_total = 0.0, sum_ce = 0.0, sum_align = 0.0;
        for (const auto& batch : minibatches(data.size(), batch_size, rng)) {
            Tensor x = gather_rows(data.features, batch);
            std::vector<int> y;
            for (std::size_t i : batch) y.push_back(data.labels[i]);

            Tape tape;
            Tape::NodeId feats = features(tape, net, x);
            Tape::NodeId z = logits_from_features(tape, net, feats);
            Tape::NodeId ce = tape.cross_entropy(z, y);
            Tape::NodeId loss = ce;
            double align_value = 0.0;
            if (epsilon > 0.0) {
                Tensor targets({batch.size(), net.common_dim()});
                for (std::size_t r = 0; r < batch.size(); ++r) {
                    const auto& proto = server_prototypes->at(y[r]);
                    if (proto.size() != net.common_dim()) {
                        throw ShapeError("local training: prototype dim mismatch for class " +
                                         std::to_string(y[r]));
                    }
                    for (std::size_t j = 0; j < proto.size(); ++j) targets.at(r, j) = proto[j];
                }
                Tape::NodeId align = tape.mse(feats, targets);
                align_value = tape.scalar(align);
                loss = tape.add(ce, tape.scale(align, epsilon));
            }
            tape.backward(loss);
            opt.step(params);
            if (last) {
                const double w = static_cast<double>(batch.size());
                sum_total += tape.scalar(loss) * w;
                sum_ce += tape.scalar(ce) * w;
                sum_align += align_value * w;
            }
        }
        if (last) {
            const double n = static_cast<double>(data.size());
            trace.total = sum_total / n;
            trace.cross_entropy = sum_ce / n;
            trace.prototype_alignment = sum_align / n;
        }
    }
    return trace;
}

}  // namespace detail

// Round-zero training: plain supervised minimization of cross entropy.
inline TrainTrace local_train_initial(ProjectedNet& net, const Dataset& data,
                                      std::size_t epochs, std::size_t batch_size,
                                      std::uint64_t seed, const TrainOptions& opts = {}) {
    return detail::train_local(net, data, nullptr, 0.0, epochs, batch_size, seed, opts);
}

// Later rounds: cross entropy plus epsilon-weighted alignment of projected
// features to the server prototype of each sample's class.
inline TrainTrace local_train_regularized(ProjectedNet& net, const Dataset& data,
                                          const PrototypeMap& server_prototypes,
                                          double epsilon, std::size_t epochs,
                                          std::size_t batch_size, std::uint64_t seed,
                                          const TrainOptions& opts = {}) {
    for (int y : data.labels) {
        if (server_prototypes.find(y) == server_prototypes.end()) {
            throw ConfigError("local training: no server prototype for class " +
                              std::to_string(y));
        }
    }
    return detail::train_local(net, data, &server_prototypes, epsilon, epochs, batch_size,
                               seed, opts);
}

inline ClientPrototypes compute_prototypes(const ProjectedNet& net, const Dataset& data) {
    data.validate();
    if (data.size() == 0) throw DomainError("compute_prototypes: empty dataset");
    Tensor feats = features(net, data.features);
    std::map<int, std::pair<std::vector<double>, std::size_t>> acc;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto& [sum, count] = acc[data.labels[i]];
        if (sum.empty()) sum.assign(feats.cols(), 0.0);
        for (std::size_t j = 0; j < feats.cols(); ++j) sum[j] += feats.at(i, j);
        ++count;
    }
    ClientPrototypes out;
    for (auto& [c, sc] : acc) {
        auto& [sum, count] = sc;
        for (double& v : sum) v /= static_cast<double>(count);
        out.by_class[c] = std::move(sum);
    }
    return out;
}

inline CountedClientPrototypes compute_counted_prototypes(const ProjectedNet& net,
                                                          const Dataset& data) {
    CountedClientPrototypes out;
    out.prototypes = compute_prototypes(net, data);
    for (int y : data.labels) out.counts[y] += 1;
    return out;
}

inline Tensor infer_public(const ProjectedNet& net, const Tensor& public_features) {
    return logits(net, public_features);
}

// Argmax per row; ties resolve to the lowest class index.
inline std::vector<int> pseudo_labels(const Tensor& logit_rows) {
    std::vector<int> out(logit_rows.rows());
    for (std::size_t i = 0; i < logit_rows.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logit_rows.cols(); ++j) {
            if (logit_rows.at(i, j) > logit_rows.at(i, best)) best = j;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

// Client-side distillation against server logits on the public pool:
// eta * KL(server || client) + (1 - eta) * CE against the server's
// argmax pseudo labels. Terms with zero weight are never built.
inline TrainTrace distill_from_server(ProjectedNet& net, const Tensor& public_features,
                                      const Tensor& server_logits, double eta,
                                      std::size_t epochs, std::size_t batch_size,
                                      std::uint64_t seed, const TrainOptions& opts = {}) {
    if (public_features.rows() != server_logits.rows()) {
        throw ShapeError("distill: public rows do not match server logit rows");
    }
    if (server_logits.cols() != net.class_count()) {
        throw ShapeError("distill: server logit width does not match class count");
    }
    if (eta < 0.0 || eta > 1.0) throw DomainError("distill: eta must be in [0,1]");
    if (batch_size == 0) throw DomainError("distill: batch size must be positive");
    TrainTrace trace;
    if (epochs == 0 || public_features.rows() == 0) return trace;

    const std::vector<int> pseudo = pseudo_labels(server_logits);
    Rng rng(seed);
    SgdOptimizer opt(opts.learning_rate, opts.momentum);
    auto params = net.trainable_parameters();
    const std::size_t n = public_features.rows();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const bool last = (epoch + 1 == epochs);
        double sum_total = 0.0, sum_kl = 0.0, sum_ce = 0.0;
        for (const auto& batch : detail::minibatches(n, batch_size, rng)) {
            Tensor x = detail::gather_rows(public_features, batch);
            Tensor teacher = detail::gather_rows(server_logits, batch);
            std::vector<int> y;
            for (std::size_t i : batch) y.push_back(pseudo[i]);

            Tape tape;
            Tape::NodeId z = logits_from_features(tape, net, features(tape, net, x));
            Tape::NodeId loss = 0;
            bool has_loss = false;
            double kl_value = 0.0, ce_value = 0.0;
            if (eta > 0.0) {
                Tape::NodeId kl = tape.kl_divergence(teacher, z);
                kl_value = tape.scalar(kl);
                loss = tape.scale(kl, eta);
                has_loss = true;
            }
            if (eta < 1.0) {
                Tape::NodeId ce = tape.cross_entropy(z, y);
                ce_value = tape.scalar(ce);
                Tape::NodeId weighted = tape.scale(ce, 1.0 - eta);
                loss = has_loss ? tape.add(loss, weighted) : weighted;
            }
            tape.backward(loss);
            opt.step(params);
            if (last) {
                const double w = static_cast<double>(batch.size());
                sum_total += tape.scalar(loss) * w;
                sum_kl += kl_value * w;
                sum_ce += ce_value * w;
            }
        }
        if (last) {
            trace.total = sum_total / static_cast<double>(n);
            trace.kl = sum_kl / static_cast<double>(n);
            trace.cross_entropy = sum_ce / static_cast<double>(n);
        }
    }
    return trace;
}

}  // namespace fedprotokd
