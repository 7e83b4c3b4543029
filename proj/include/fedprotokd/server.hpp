#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "fedprotokd/client.hpp"
#include "fedprotokd/data.hpp"
#include "fedprotokd/errors.hpp"
#include "fedprotokd/model.hpp"
#include "fedprotokd/net.hpp"

namespace fedprotokd {

// --- logit aggregation ------------------------------------------------------

struct AggregatedLogits {
    Tensor logits;                        // n x classes
    Tensor weights;                       // n x clients, rows sum to 1
    std::vector<bool> uniform_fallback;   // true where all variances were zero
};

// Variance-weighted ensemble of client logits: per sample, each client's
// weight is its logit variance divided by the total variance across
// clients (confident spiky predictions get more say). Samples where every
// client is flat fall back to uniform weights.
inline AggregatedLogits aggregate_logits(const std::vector<Tensor>& client_logits) {
    if (client_logits.empty()) throw UsageError("aggregate_logits: no client logits");
    const Tensor& first = client_logits.front();
    if (first.rank() != 2) throw ShapeError("aggregate_logits: logits must be rank 2");
    for (const Tensor& t : client_logits) {
        require_same_shape(first, t, "aggregate_logits");
    }
    const std::size_t n = first.rows(), s = first.cols(), m = client_logits.size();
    AggregatedLogits out;
    out.logits = Tensor({n, s});
    out.weights = Tensor({n, m});
    out.uniform_fallback.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> var(m, 0.0);
        double total = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            double mean = 0.0;
            for (std::size_t j = 0; j < s; ++j) mean += client_logits[c].at(i, j);
            mean /= static_cast<double>(s);
            double acc = 0.0;
            for (std::size_t j = 0; j < s; ++j) {
                const double d = client_logits[c].at(i, j) - mean;
                acc += d * d;
            }
            var[c] = acc / static_cast<double>(s);
            total += var[c];
        }
        if (total <= 0.0) {
            out.uniform_fallback[i] = true;
            for (std::size_t c = 0; c < m; ++c) var[c] = 1.0;
            total = static_cast<double>(m);
        }
        for (std::size_t c = 0; c < m; ++c) {
            const double w = var[c] / total;
            out.weights.at(i, c) = w;
            for (std::size_t j = 0; j < s; ++j) {
                out.logits.at(i, j) += w * client_logits[c].at(i, j);
            }
        }
    }
    return out;
}

// --- prototype aggregation (averaging baselines) ---------------------------

// Count-weighted mean per class; only reachable through the counted type.
inline PrototypeMap weighted_average_prototypes(
    const std::vector<CountedClientPrototypes>& contributions) {
    if (contributions.empty()) throw UsageError("weighted_average_prototypes: no inputs");
    std::map<int, std::pair<std::vector<double>, double>> acc;
    for (const auto& contrib : contributions) {
        for (const auto& [c, proto] : contrib.prototypes.by_class) {
            auto it = contrib.counts.find(c);
            if (it == contrib.counts.end() || it->second == 0) {
                throw UsageError("weighted_average_prototypes: missing count for class " +
                                 std::to_string(c));
            }
            const double w = static_cast<double>(it->second);
            auto& [sum, wsum] = acc[c];
            if (sum.empty()) sum.assign(proto.size(), 0.0);
            if (sum.size() != proto.size()) {
                throw ShapeError("weighted_average_prototypes: dim mismatch for class " +
                                 std::to_string(c));
            }
            for (std::size_t j = 0; j < proto.size(); ++j) sum[j] += w * proto[j];
            wsum += w;
        }
    }
    PrototypeMap out;
    for (auto& [c, sw] : acc) {
        auto& [sum, wsum] = sw;
        for (double& v : sum) v /= wsum;
        out[c] = std::move(sum);
    }
    return out;
}

// Unweighted mean over the clients holding each class.
inline PrototypeMap plain_average_prototypes(const std::vector<ClientPrototypes>& contributions) {
    if (contributions.empty()) throw UsageError("plain_average_prototypes: no inputs");
    std::map<int, std::pair<std::vector<double>, std::size_t>> acc;
    for (const auto& contrib : contributions) {
        for (const auto& [c, proto] : contrib.by_class) {
            auto& [sum, count] = acc[c];
            if (sum.empty()) sum.assign(proto.size(), 0.0);
            if (sum.size() != proto.size()) {
                throw ShapeError("plain_average_prototypes: dim mismatch for class " +
                                 std::to_string(c));
            }
            for (std::size_t j = 0; j < proto.size(); ++j) sum[j] += proto[j];
            ++count;
        }
    }
    PrototypeMap out;
    for (auto& [c, sc] : acc) {
        auto& [sum, count] = sc;
        for (double& v : sum) v /= static_cast<double>(count);
        out[c] = std::move(sum);
    }
    return out;
}

// Unweighted per-class centers over all client contributions; these are
// the anchors the margin schedule is computed from.
inline PrototypeMap class_centers(const std::vector<ClientPrototypes>& contributions) {
    return plain_average_prototypes(contributions);
}

// --- margins ----------------------------------------------------------------

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("euclidean: dim mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

struct MarginSchedule {
    std::map<int, double> xi;  // per-class margin actually used this round
    double zeta = 0.0;
    PrototypeMap centers;
};

// Class-wise adaptive margin: distance from each class center to its
// nearest other center, capped at zeta.
inline MarginSchedule adaptive_margins(const PrototypeMap& centers, double zeta) {
    if (zeta <= 0.0) throw DomainError("adaptive_margins: zeta must be positive");
    if (centers.size() < 2) {
        throw DomainError("adaptive_margins: need at least two class centers");
    }
    MarginSchedule out;
    out.zeta = zeta;
    out.centers = centers;
    for (const auto& [c, center] : centers) {
        double nearest = std::numeric_limits<double>::infinity();
        for (const auto& [c2, other] : centers) {
            if (c2 == c) continue;
            nearest = std::min(nearest, euclidean(center, other));
        }
        out.xi[c] = std::min(nearest, zeta);
    }
    return out;
}

// Single shared margin: the largest of the per-class nearest-center
// distances, capped at zeta (the non-adaptive ablation).
inline double fixed_shared_margin(const PrototypeMap& centers, double zeta) {
    MarginSchedule adaptive = adaptive_margins(centers, zeta);
    double largest = 0.0;
    for (const auto& [c, xi] : adaptive.xi) largest = std::max(largest, xi);
    return std::min(largest, zeta);
}

inline MarginSchedule fixed_margin_schedule(const PrototypeMap& centers, double zeta) {
    MarginSchedule out;
    out.zeta = zeta;
    out.centers = centers;
    const double shared = fixed_shared_margin(centers, zeta);
    for (const auto& [c, center] : centers) out.xi[c] = shared;
    return out;
}

// Smallest pairwise distance between emitted prototypes (the separation
// metric reported per round).
inline double prototype_margin(const PrototypeMap& prototypes) {
    if (prototypes.size() < 2) {
        throw DomainError("prototype_margin: need at least two prototypes");
    }
    double best = std::numeric_limits<double>::infinity();
    for (auto it = prototypes.begin(); it != prototypes.end(); ++it) {
        for (auto jt = std::next(it); jt != prototypes.end(); ++jt) {
            best = std::min(best, euclidean(it->second, jt->second));
        }
    }
    return best;
}

// --- trainable server prototypes --------------------------------------------

struct PrototypeSample {
    int label = 0;
    std::vector<double> vector;
};

inline std::vector<PrototypeSample> collect_prototype_samples(
    const std::vector<ClientPrototypes>& contributions) {
    std::vector<PrototypeSample> out;
    for (const auto& contrib : contributions) {
        for (const auto& [c, proto] : contrib.by_class) out.push_back({c, proto});
    }
    return out;
}

// Learnable base vectors plus a shared two-layer generator; the server
// prototypes are generator(base). Both are trained by the contrastive
// objective and warm-start across rounds.
struct TrainableServerPrototypes {
    Tensor base;        // classes x common_dim, tracked
    DenseNet generator; // common_dim -> common_dim -> common_dim, relu then identity
    std::size_t class_count = 0;
    std::size_t common_dim = 0;

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out = {&base};
        for (Tensor* p : generator.parameters()) out.push_back(p);
        return out;
    }
};

inline TrainableServerPrototypes make_server_prototypes(std::size_t classes,
                                                        std::size_t common_dim,
                                                        std::uint64_t seed) {
    if (classes == 0 || common_dim == 0) {
        throw DomainError("make_server_prototypes: classes and common_dim must be positive");
    }
    TrainableServerPrototypes out;
    out.class_count = classes;
    out.common_dim = common_dim;
    out.base = Tensor({classes, common_dim});
    Rng rng(derive_seed(seed, 11));
    for (double& v : out.base.values()) v = rng.normal();
    out.base.track();
    out.generator = make_dense_net({common_dim, common_dim, common_dim},
                                   {Activation::kRelu, Activation::kIdentity},
                                   derive_seed(seed, 12));
    return out;
}

inline Tensor emit_prototypes(TrainableServerPrototypes& tsp) {
    Tape tape;
    return tape.value(forward(tape, tsp.generator, tape.parameter(tsp.base)));
}

inline PrototypeMap emitted_prototype_map(TrainableServerPrototypes& tsp) {
    Tensor emitted = emit_prototypes(tsp);
    PrototypeMap out;
    for (std::size_t c = 0; c < tsp.class_count; ++c) {
        std::vector<double> row(tsp.common_dim);
        for (std::size_t j = 0; j < tsp.common_dim; ++j) row[j] = emitted.at(c, j);
        out[static_cast<int>(c)] = std::move(row);
    }
    return out;
}

namespace detail {

// Contrastive loss over a set of client prototype samples: for sample i
// of class c, softmax cross entropy over per-class scores
// z_k = -(distance(emitted_k, sample_i) + xi_c * [k == c]), summed (or
// averaged) over samples. Pushing a sample's own distance-plus-margin
// down relative to other classes' distances tightens same-class pull and
// cross-class separation simultaneously.
inline Tape::NodeId contrastive_loss_node(Tape& tape, TrainableServerPrototypes& tsp,
                                          const std::vector<PrototypeSample>& samples,
                                          const MarginSchedule& margins, bool mean) {
    if (samples.empty()) throw UsageError("contrastive loss: no prototype samples");
    const std::size_t n = samples.size();
    Tensor anchors({n, tsp.common_dim});
    std::vector<int> labels(n);
    Tensor margin_offsets({n, tsp.class_count});
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = samples[i];
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= tsp.class_count) {
            throw ConfigError("contrastive loss: sample class " + std::to_string(s.label) +
                              " outside the trainable prototype set");
        }
        if (s.vector.size() != tsp.common_dim) {
            throw ShapeError("contrastive loss: sample dim mismatch");
        }
        auto it = margins.xi.find(s.label);
        if (it == margins.xi.end()) {
            throw ConfigError("contrastive loss: no margin for class " +
                              std::to_string(s.label));
        }
        for (std::size_t j = 0; j < tsp.common_dim; ++j) anchors.at(i, j) = s.vector[j];
        labels[i] = s.label;
        margin_offsets.at(i, static_cast<std::size_t>(s.label)) = -it->second;
    }
    Tape::NodeId emitted = forward(tape, tsp.generator, tape.parameter(tsp.base));
    // distances: n x classes, then scores z = -(d + xi_own one-hot).
    Tape::NodeId dist = tape.pairwise_distance(anchors, emitted);
    Tape::NodeId scores = tape.add_constant(tape.scale(dist, -1.0), margin_offsets);
    Tape::NodeId loss = tape.cross_entropy(scores, labels);
    if (!mean) loss = tape.scale(loss, static_cast<double>(n));
    return loss;
}

}  // namespace detail

// Exact objective value (sum over samples), no parameter updates.
inline double contrastive_prototype_loss(TrainableServerPrototypes& tsp,
                                         const std::vector<PrototypeSample>& samples,
                                         const MarginSchedule& margins) {
    Tape tape;
    return tape.scalar(detail::contrastive_loss_node(tape, tsp, samples, margins, false));
}

// Same objective with one margin shared by every class (the non-adaptive
// baseline variant).
inline double fixed_margin_loss(TrainableServerPrototypes& tsp,
                                const std::vector<PrototypeSample>& samples,
                                double xi_fixed) {
    if (xi_fixed < 0.0) throw DomainError("fixed_margin_loss: margin must be nonnegative");
    MarginSchedule margins;
    margins.zeta = std::max(xi_fixed, 1.0);
    for (std::size_t c = 0; c < tsp.class_count; ++c) {
        margins.xi[static_cast<int>(c)] = xi_fixed;
    }
    Tape tape;
    return tape.scalar(detail::contrastive_loss_node(tape, tsp, samples, margins, false));
}

// Minibatch training of base + generator on the batch-mean contrastive
// loss. Returns the mean per-sample loss over the final epoch.
inline TrainTrace actsp_train(TrainableServerPrototypes& tsp,
                              const std::vector<PrototypeSample>& samples,
                              const MarginSchedule& margins, std::size_t epochs,
                              std::size_t batch_size, std::uint64_t seed,
                              const TrainOptions& opts = {}) {
    if (samples.empty()) throw UsageError("actsp_train: no prototype samples");
    if (batch_size == 0) throw DomainError("actsp_train: batch size must be positive");
    TrainTrace trace;
    if (epochs == 0) return trace;
    Rng rng(seed);
    SgdOptimizer opt(opts.learning_rate, opts.momentum);
    auto params = tsp.parameters();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const bool last = (epoch + 1 == epochs);
        double sum_loss = 0.0;
        for (const auto& batch : detail::minibatches(samples.size(), batch_size, rng)) {
            std::vector<PrototypeSample> chunk;
            chunk.reserve(batch.size());
            for (std::size_t i : batch) chunk.push_back(samples[i]);
            Tape tape;
            Tape::NodeId loss = detail::contrastive_loss_node(tape, tsp, chunk, margins, true);
            tape.backward(loss);
            opt.step(params);
            if (last) sum_loss += tape.scalar(loss) * static_cast<double>(batch.size());
        }
        if (last) trace.total = sum_loss / static_cast<double>(samples.size());
    }
    return trace;
}

// --- public-sample importance -----------------------------------------------

struct ImportanceScores {
    std::vector<double> importance;        // I_i, strictly positive
    std::vector<double> ease;              // E_i in (0,1)
    std::vector<double> normalized_close;  // dhat_i in [0,1]; 1 = closest to prototype
    std::vector<double> distance;          // raw distance to pseudo-class prototype
    std::vector<int> pseudo;               // argmax of aggregated logits
    bool degenerate = false;               // all inverse distances equal -> dhat := 0.5
};

// Importance of each public sample: I = phi * (1 + dhat) + (1 - phi) * E.
// dhat is the min-max normalized inverse distance 1/(d + eps) between the
// server's projected feature and the prototype of the sample's pseudo
// class (so dhat = 1 marks the sample closest to its prototype), and ease
// E = 1 - sigmoid(k * (dhat - median(dhat))).
inline ImportanceScores importance_scores(const AggregatedLogits& aggregated,
                                          const Tensor& server_projected,
                                          const PrototypeMap& prototypes, double phi,
                                          double k_steepness, double eps_guard) {
    if (phi < 0.0 || phi > 1.0) throw DomainError("importance: phi must be in [0,1]");
    if (k_steepness <= 0.0) throw DomainError("importance: k must be positive");
    if (eps_guard <= 0.0) throw DomainError("importance: eps guard must be positive");
    const std::size_t n = aggregated.logits.rows();
    if (server_projected.rows() != n) {
        throw ShapeError("importance: projected rows do not match logit rows");
    }
    ImportanceScores out;
    out.pseudo = pseudo_labels(aggregated.logits);
    out.distance.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto it = prototypes.find(out.pseudo[i]);
        if (it == prototypes.end()) {
            throw ConfigError("importance: no prototype for pseudo class " +
                              std::to_string(out.pseudo[i]));
        }
        const auto& proto = it->second;
        if (proto.size() != server_projected.cols()) {
            throw ShapeError("importance: prototype dim does not match projected features");
        }
        double acc = 0.0;
        for (std::size_t j = 0; j < proto.size(); ++j) {
            const double d = server_projected.at(i, j) - proto[j];
            acc += d * d;
        }
        out.distance[i] = std::sqrt(acc);
    }
    std::vector<double> inverse(n);
    for (std::size_t i = 0; i < n; ++i) inverse[i] = 1.0 / (out.distance[i] + eps_guard);
    const double tmin = *std::min_element(inverse.begin(), inverse.end());
    const double tmax = *std::max_element(inverse.begin(), inverse.end());
    out.normalized_close.resize(n);
    if (tmax - tmin <= 0.0) {
        out.degenerate = true;
        std::fill(out.normalized_close.begin(), out.normalized_close.end(), 0.5);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            out.normalized_close[i] = (inverse[i] - tmin) / (tmax - tmin);
        }
    }
    // median with the even-count midpoint convention
    std::vector<double> sorted = out.normalized_close;
    std::sort(sorted.begin(), sorted.end());
    const double median = (n % 2 == 1)
                              ? sorted[n / 2]
                              : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    out.ease.resize(n);
    out.importance.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = k_steepness * (out.normalized_close[i] - median);
        out.ease[i] = 1.0 - 1.0 / (1.0 + std::exp(-x));
        out.importance[i] = phi * (1.0 + out.normalized_close[i]) + (1.0 - phi) * out.ease[i];
    }
    return out;
}

// --- server knowledge-distillation training ---------------------------------

// Server update on the public pool: upsilon-weighted logit distillation
// (KL against the aggregated ensemble plus importance-weighted CE on
// pseudo labels) and (1-upsilon)-weighted prototype alignment of the
// server's projected features to the prototype of each pseudo class.
inline TrainTrace server_kd_train(ProjectedNet& server, const Tensor& public_features,
                                  const AggregatedLogits& aggregated,
                                  const ImportanceScores& scores,
                                  const PrototypeMap& prototypes, double upsilon,
                                  std::size_t epochs, std::size_t batch_size,
                                  std::uint64_t seed, const TrainOptions& opts = {}) {
    if (upsilon < 0.0 || upsilon > 1.0) throw DomainError("server train: upsilon in [0,1]");
    if (batch_size == 0) throw DomainError("server train: batch size must be positive");
    const std::size_t n = public_features.rows();
    if (aggregated.logits.rows() != n || scores.importance.size() != n) {
        throw ShapeError("server train: row counts disagree across inputs");
    }
    TrainTrace trace;
    if (epochs == 0 || n == 0) return trace;

    Rng rng(seed);
    SgdOptimizer opt(opts.learning_rate, opts.momentum);
    auto params = server.trainable_parameters();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const bool last = (epoch + 1 == epochs);
        double sum_total = 0.0, sum_kl = 0.0, sum_ce = 0.0, sum_align = 0.0;
        for (const auto& batch : detail::minibatches(n, batch_size, rng)) {
            Tensor x = detail::gather_rows(public_features, batch);
            Tensor teacher = detail::gather_rows(aggregated.logits, batch);
            std::vector<int> y;
            std::vector<double> w;
            for (std::size_t i : batch) {
                y.push_back(scores.pseudo[i]);
                w.push_back(scores.importance[i]);
            }
            Tape tape;
            Tape::NodeId feats = features(tape, server, x);
            Tape::NodeId z = logits_from_features(tape, server, feats);

            Tape::NodeId loss = 0;
            bool has_loss = false;
            double kl_value = 0.0, ce_value = 0.0, align_value = 0.0;
            if (upsilon > 0.0) {
                Tape::NodeId kl = tape.kl_divergence(teacher, z);
                Tape::NodeId ce = tape.cross_entropy(z, y, w);
                kl_value = tape.scalar(kl);
                ce_value = tape.scalar(ce);
                loss = tape.scale(tape.add(kl, ce), upsilon);
                has_loss = true;
            }
            if (upsilon < 1.0) {
                Tensor targets({batch.size(), server.common_dim()});
                for (std::size_t r = 0; r < batch.size(); ++r) {
                    const auto& proto = prototypes.at(y[r]);
                    if (proto.size() != server.common_dim()) {
                        throw ShapeError("server train: prototype dim mismatch");
                    }
                    for (std::size_t j = 0; j < proto.size(); ++j) targets.at(r, j) = proto[j];
                }
                Tape::NodeId align = tape.mse(feats, targets);
                align_value = tape.scalar(align);
                Tape::NodeId weighted = tape.scale(align, 1.0 - upsilon);
                loss = has_loss ? tape.add(loss, weighted) : weighted;
            }
            tape.backward(loss);
            opt.step(params);
            if (last) {
                const double bw = static_cast<double>(batch.size());
                sum_total += tape.scalar(loss) * bw;
                sum_kl += kl_value * bw;
                sum_ce += ce_value * bw;
                sum_align += align_value * bw;
            }
        }
        if (last) {
            const double dn = static_cast<double>(n);
            trace.total = sum_total / dn;
            trace.kl = sum_kl / dn;
            trace.cross_entropy = sum_ce / dn;
            trace.prototype_alignment = sum_align / dn;
        }
    }
    return trace;
}

}  // namespace fedprotokd
