#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedprotokd/errors.hpp"
#include "fedprotokd/rng.hpp"
#include "fedprotokd/tensor.hpp"

namespace fedprotokd {

struct Dataset {
    Tensor features;  // n x dim
    std::vector<int> labels;
    int class_count = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols(); }

    void validate() const {
        if (features.rank() != 2 || features.rows() != labels.size()) {
            throw ShapeError("dataset: feature rows do not match label count");
        }
        for (int y : labels) {
            if (y < 0 || y >= class_count) {
                throw DomainError("dataset: label " + std::to_string(y) +
                                  " outside [0," + std::to_string(class_count) + ")");
            }
        }
    }

    Dataset subset(const std::vector<std::size_t>& indices) const {
        Dataset out;
        out.class_count = class_count;
        out.features = Tensor({indices.size(), dim()});
        out.labels.reserve(indices.size());
        for (std::size_t r = 0; r < indices.size(); ++r) {
            const std::size_t i = indices[r];
            if (i >= size()) throw UsageError("dataset subset: index out of range");
            for (std::size_t j = 0; j < dim(); ++j) out.features.at(r, j) = features.at(i, j);
            out.labels.push_back(labels[i]);
        }
        return out;
    }
};

// Unlabeled shared pool. True labels are kept privately for evaluation
// and diagnostics only; protocol code gets the features.
class PublicSet {
public:
    PublicSet() = default;
    PublicSet(Tensor features, std::vector<int> eval_labels)
        : features_(std::move(features)), eval_labels_(std::move(eval_labels)) {}

    const Tensor& features() const { return features_; }
    std::size_t size() const { return eval_labels_.size(); }
    // Diagnostics only; never consumed by the protocol itself.
    const std::vector<int>& evaluation_labels() const { return eval_labels_; }

private:
    Tensor features_;
    std::vector<int> eval_labels_;
};

// Gaussian blobs with class centers spaced on a circle of radius 5 in the
// first two feature dimensions; remaining dimensions are pure noise.
inline Dataset generate_mixture(int classes, std::size_t feature_dim, std::size_t per_class,
                                double spread, std::uint64_t seed) {
    if (classes < 2) throw DomainError("generate_mixture: need at least 2 classes");
    if (feature_dim < 2) throw DomainError("generate_mixture: need at least 2 feature dims");
    if (per_class < 1) throw DomainError("generate_mixture: need at least 1 sample per class");
    if (spread < 0.0) throw DomainError("generate_mixture: spread must be nonnegative");

    Rng rng(seed);
    Dataset out;
    out.class_count = classes;
    out.features = Tensor({static_cast<std::size_t>(classes) * per_class, feature_dim});
    out.labels.reserve(out.features.rows());
    const double radius = 5.0;
    const double two_pi = 8.0 * std::atan(1.0);
    std::size_t row = 0;
    for (int c = 0; c < classes; ++c) {
        const double angle = two_pi * static_cast<double>(c) / static_cast<double>(classes);
        for (std::size_t s = 0; s < per_class; ++s, ++row) {
            out.features.at(row, 0) = radius * std::cos(angle) + spread * rng.normal();
            out.features.at(row, 1) = radius * std::sin(angle) + spread * rng.normal();
            for (std::size_t j = 2; j < feature_dim; ++j) {
                out.features.at(row, j) = spread * rng.normal();
            }
            out.labels.push_back(c);
        }
    }
    return out;
}

namespace detail {

inline std::map<int, std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
    return by_class;
}

// Largest-remainder allocation of `total` items across weights.
inline std::vector<std::size_t> proportional_counts(const std::vector<double>& weights,
                                                    std::size_t total) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> counts(weights.size(), 0);
    if (wsum <= 0.0) return counts;
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = static_cast<double>(total) * weights[i] / wsum;
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        remainders.push_back({exact - static_cast<double>(counts[i]), i});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t r = 0; assigned < total; ++r) {
        counts[remainders[r % remainders.size()].second] += 1;
        ++assigned;
    }
    return counts;
}

}  // namespace detail

struct PublicSplit {
    PublicSet public_set;
    Dataset private_pool;
    std::vector<std::size_t> public_indices;   // into the source dataset
    std::vector<std::size_t> private_indices;  // into the source dataset
};

// Class-stratified draw of `public_n` rows into the unlabeled pool; the
// remainder keeps its labels and feeds the client partition.
inline PublicSplit split_public(const Dataset& ds, std::size_t public_n, std::uint64_t seed) {
    if (public_n == 0) throw DomainError("split_public: public_n must be positive");
    if (public_n >= ds.size()) {
        throw DomainError("split_public: public_n " + std::to_string(public_n) +
                          " must leave a nonempty private pool of " +
                          std::to_string(ds.size()) + " rows");
    }
    Rng rng(seed);
    auto by_class = detail::indices_by_class(ds);
    std::vector<double> weights;
    std::vector<int> class_order;
    for (auto& [c, idx] : by_class) {
        rng.shuffle(idx);
        weights.push_back(static_cast<double>(idx.size()));
        class_order.push_back(c);
    }
    auto quotas = detail::proportional_counts(weights, public_n);

    // Cap quotas so every class keeps at least one private row, then push
    // any shortfall onto classes that still have spare capacity.
    std::vector<std::size_t> caps(quotas.size());
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < class_order.size(); ++k) {
        const std::size_t sz = by_class[class_order[k]].size();
        caps[k] = sz > 0 ? sz - 1 : 0;
        quotas[k] = std::min(quotas[k], caps[k]);
        assigned += quotas[k];
    }
    for (std::size_t k = 0; assigned < public_n; k = (k + 1) % quotas.size()) {
        bool any_spare = false;
        for (std::size_t j = 0; j < quotas.size(); ++j) any_spare |= quotas[j] < caps[j];
        if (!any_spare) break;
        if (quotas[k] < caps[k]) {
            ++quotas[k];
            ++assigned;
        }
    }

    PublicSplit out;
    for (std::size_t k = 0; k < class_order.size(); ++k) {
        auto& idx = by_class[class_order[k]];
        const std::size_t take = std::min(quotas[k], idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < take ? out.public_indices : out.private_indices).push_back(idx[i]);
        }
    }
    std::sort(out.public_indices.begin(), out.public_indices.end());
    std::sort(out.private_indices.begin(), out.private_indices.end());
    if (out.private_indices.empty()) {
        throw DomainError("split_public: private pool ended up empty");
    }

    Dataset pub = ds.subset(out.public_indices);
    out.public_set = PublicSet(std::move(pub.features), std::move(pub.labels));
    out.private_pool = ds.subset(out.private_indices);
    return out;
}

// Assignment of pool rows to clients, plus the public rows, all as
// indices into one source dataset so conservation can be checked.
struct PartitionPlan {
    std::vector<std::vector<std::size_t>> client_indices;
    std::vector<std::size_t> public_indices;

    std::size_t total_assigned() const {
        std::size_t n = public_indices.size();
        for (const auto& c : client_indices) n += c.size();
        return n;
    }
};

inline nlohmann::json plan_to_json(const PartitionPlan& plan) {
    nlohmann::json j;
    j["public_indices"] = plan.public_indices;
    j["client_indices"] = plan.client_indices;
    return j;
}

inline PartitionPlan plan_from_json(const nlohmann::json& j) {
    PartitionPlan plan;
    try {
        plan.public_indices = j.at("public_indices").get<std::vector<std::size_t>>();
        plan.client_indices = j.at("client_indices").get<std::vector<std::vector<std::size_t>>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("partition plan: ") + e.what());
    }
    return plan;
}

// Per-class Dirichlet(alpha) proportions across clients. Every client is
// guaranteed at least one sample by moving rows from the largest shard.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(const Dataset& ds,
                                                                 std::size_t clients,
                                                                 double alpha,
                                                                 std::uint64_t seed) {
    if (clients < 1) throw DomainError("dirichlet_partition: need at least one client");
    if (alpha <= 0.0) throw DomainError("dirichlet_partition: alpha must be positive");
    if (ds.size() < clients) {
        throw DomainError("dirichlet_partition: fewer samples than clients");
    }
    Rng rng(seed);
    auto by_class = detail::indices_by_class(ds);
    std::vector<std::vector<std::size_t>> shards(clients);
    for (auto& [c, idx] : by_class) {
        rng.shuffle(idx);
        std::vector<double> props(clients);
        for (auto& p : props) p = rng.gamma(alpha);
        auto counts = detail::proportional_counts(props, idx.size());
        std::size_t cursor = 0;
        for (std::size_t k = 0; k < clients; ++k) {
            for (std::size_t i = 0; i < counts[k]; ++i) shards[k].push_back(idx[cursor++]);
        }
    }
    // Repair empty shards deterministically.
    for (std::size_t k = 0; k < clients; ++k) {
        while (shards[k].empty()) {
            std::size_t donor = 0;
            for (std::size_t d = 1; d < clients; ++d) {
                if (shards[d].size() > shards[donor].size()) donor = d;
            }
            if (shards[donor].size() <= 1) {
                throw DomainError("dirichlet_partition: not enough samples to cover clients");
            }
            shards[k].push_back(shards[donor].back());
            shards[donor].pop_back();
        }
    }
    for (auto& s : shards) std::sort(s.begin(), s.end());
    return shards;
}

// Each client holds exactly k_classes classes; classes go to the least
// loaded clients first, and shard sizes are skewed by a per-client
// multiplier in [0.5, 1.5].
inline std::vector<std::vector<std::size_t>> pathological_partition(const Dataset& ds,
                                                                    std::size_t clients,
                                                                    std::size_t k_classes,
                                                                    std::uint64_t seed) {
    if (clients < 1) throw DomainError("pathological_partition: need at least one client");
    if (k_classes < 1) throw DomainError("pathological_partition: k_classes must be positive");
    const std::size_t classes = static_cast<std::size_t>(ds.class_count);
    if (k_classes > classes) {
        throw DomainError("pathological_partition: k_classes exceeds class count");
    }
    if (clients * k_classes < classes) {
        throw DomainError(
            "pathological_partition: clients * k_classes is too small to cover every class");
    }
    Rng rng(seed);
    auto by_class = detail::indices_by_class(ds);

    // Total class slots, dealt to least-loaded clients with a seeded
    // shuffle of class order per pass.
    std::vector<std::vector<int>> classes_of(clients);
    std::vector<int> class_ids;
    for (auto& [c, idx] : by_class) class_ids.push_back(c);
    if (class_ids.size() != classes) {
        throw DomainError("pathological_partition: dataset is missing some classes");
    }
    const std::size_t total_slots = clients * k_classes;
    std::size_t dealt = 0;
    while (dealt < total_slots) {
        std::vector<int> order = class_ids;
        rng.shuffle(order);
        for (int c : order) {
            if (dealt == total_slots) break;
            // Least-loaded client that does not already hold c.
            std::size_t best = clients;
            for (std::size_t k = 0; k < clients; ++k) {
                if (classes_of[k].size() >= k_classes) continue;
                if (std::find(classes_of[k].begin(), classes_of[k].end(), c) !=
                    classes_of[k].end()) {
                    continue;
                }
                if (best == clients || classes_of[k].size() < classes_of[best].size()) best = k;
            }
            if (best == clients) continue;
            classes_of[best].push_back(c);
            ++dealt;
        }
    }

    std::vector<double> multiplier(clients);
    for (auto& m : multiplier) m = rng.uniform(0.5, 1.5);

    std::vector<std::vector<std::size_t>> shards(clients);
    for (auto& [c, idx] : by_class) {
        rng.shuffle(idx);
        std::vector<std::size_t> holders;
        for (std::size_t k = 0; k < clients; ++k) {
            if (std::find(classes_of[k].begin(), classes_of[k].end(), c) !=
                classes_of[k].end()) {
                holders.push_back(k);
            }
        }
        if (holders.empty()) continue;
        if (idx.size() < holders.size()) {
            throw DomainError("pathological_partition: class " + std::to_string(c) +
                              " has fewer samples than holders");
        }
        std::vector<double> weights;
        for (std::size_t h : holders) weights.push_back(multiplier[h]);
        auto counts = detail::proportional_counts(weights, idx.size() - holders.size());
        std::size_t cursor = 0;
        for (std::size_t h = 0; h < holders.size(); ++h) {
            const std::size_t take = counts[h] + 1;  // guaranteed floor of one
            for (std::size_t i = 0; i < take; ++i) shards[holders[h]].push_back(idx[cursor++]);
        }
    }
    for (auto& s : shards) {
        if (s.empty()) throw DomainError("pathological_partition: produced an empty shard");
        std::sort(s.begin(), s.end());
    }
    return shards;
}

// Stratified split: returns (held_out, rest) where held_out gets roughly
// `fraction` of every class (at least one row per class when possible).
inline std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, double fraction,
                                                    std::uint64_t seed) {
    if (fraction <= 0.0 || fraction >= 1.0) {
        throw DomainError("stratified_split: fraction must be in (0,1)");
    }
    Rng rng(seed);
    auto by_class = detail::indices_by_class(ds);
    std::vector<std::size_t> held, rest;
    for (auto& [c, idx] : by_class) {
        rng.shuffle(idx);
        std::size_t take = static_cast<std::size_t>(
            std::llround(fraction * static_cast<double>(idx.size())));
        if (idx.size() >= 2) take = std::max<std::size_t>(1, std::min(take, idx.size() - 1));
        else take = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < take ? held : rest).push_back(idx[i]);
        }
    }
    std::sort(held.begin(), held.end());
    std::sort(rest.begin(), rest.end());
    return {ds.subset(held), ds.subset(rest)};
}

// CSV rows are `label,f1,...,fd`. All rows must agree on d.
inline Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_csv: cannot open " + path);
    Dataset out;
    std::vector<double> flat;
    std::size_t dim = 0;
    std::string line;
    std::size_t lineno = 0;
    auto parse_number = [&](const std::string& tok) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            throw ParseError("load_csv: row " + std::to_string(lineno) +
                             ": not a number: '" + tok + "'");
        }
        while (used < tok.size() && std::isspace(static_cast<unsigned char>(tok[used]))) ++used;
        if (used != tok.size()) {
            throw ParseError("load_csv: row " + std::to_string(lineno) +
                             ": not a number: '" + tok + "'");
        }
        return v;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> tokens;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) tokens.push_back(tok);
        if (line.back() == ',') tokens.push_back("");
        if (tokens.size() < 2) {
            throw ParseError("load_csv: row " + std::to_string(lineno) +
                             ": need a label and at least one feature");
        }
        const double label_value = parse_number(tokens[0]);
        const int label = static_cast<int>(std::llround(label_value));
        if (label < 0 || static_cast<double>(label) != label_value) {
            throw ParseError("load_csv: row " + std::to_string(lineno) +
                             ": label must be a nonnegative integer");
        }
        if (dim == 0) {
            dim = tokens.size() - 1;
        } else if (tokens.size() - 1 != dim) {
            throw ParseError("load_csv: row " + std::to_string(lineno) + ": expected " +
                             std::to_string(dim) + " features, got " +
                             std::to_string(tokens.size() - 1));
        }
        for (std::size_t i = 1; i < tokens.size(); ++i) flat.push_back(parse_number(tokens[i]));
        out.labels.push_back(label);
        out.class_count = std::max(out.class_count, label + 1);
    }
    if (out.labels.empty()) throw ParseError("load_csv: " + path + " holds no data rows");
    out.features = Tensor({out.labels.size(), dim}, std::move(flat));
    out.validate();
    return out;
}

inline void save_csv(const std::string& path, const Dataset& ds) {
    std::ofstream outf(path);
    if (!outf) throw IoError("save_csv: cannot open " + path + " for writing");
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        outf << ds.labels[i];
        for (std::size_t j = 0; j < ds.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.features.at(i, j));
            outf << ',' << buf;
        }
        outf << '\n';
    }
    if (!outf) throw IoError("save_csv: write failed for " + path);
}

}  // namespace fedprotokd
