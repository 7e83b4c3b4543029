#pragma once

#include <atomic>
#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedprotokd/client.hpp"
#include "fedprotokd/config.hpp"
#include "fedprotokd/data.hpp"
#include "fedprotokd/errors.hpp"
#include "fedprotokd/model.hpp"
#include "fedprotokd/server.hpp"

namespace fedprotokd {

// --- helpers -----------------------------------------------------------------

inline double evaluate_accuracy(const ProjectedNet& net, const Dataset& data) {
    if (data.size() == 0) throw DomainError("evaluate: empty dataset");
    Tensor z = logits(net, data.features);
    const std::vector<int> predicted = pseudo_labels(z);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (predicted[i] == data.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

namespace detail {

// Index-parallel loop with deterministic output: each index writes only
// its own slot, so results are identical for any worker count.
inline void parallel_for(std::size_t count, int threads,
                         const std::function<void(std::size_t)>& fn) {
    int workers = threads;
    if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    if (workers == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) break;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                break;
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(workers), count);
    for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

template <typename Fn>
auto with_phase(const std::string& context, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const ShapeError& e) {
        throw ShapeError(context + ": " + e.what());
    } catch (const DomainError& e) {
        throw DomainError(context + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(context + ": " + e.what());
    } catch (const ParseError& e) {
        throw ParseError(context + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError(context + ": " + e.what());
    } catch (const UsageError& e) {
        throw UsageError(context + ": " + e.what());
    }
}

}  // namespace detail

// Counts of every protocol message kind that crossed the client/server
// boundary, for verifying what a run actually exchanged.
struct MessageAudit {
    std::map<std::string, std::size_t> counts;

    void record(const std::string& kind, std::size_t n = 1) { counts[kind] += n; }
    std::size_t count(const std::string& kind) const {
        auto it = counts.find(kind);
        return it == counts.end() ? 0 : it->second;
    }
};

inline constexpr const char* kMsgClientLogits = "client_logits";
inline constexpr const char* kMsgClientPrototypes = "client_prototypes";
inline constexpr const char* kMsgClientPrototypesWithCounts = "client_prototypes_with_counts";
inline constexpr const char* kMsgServerLogits = "server_logits";
inline constexpr const char* kMsgServerPrototypes = "server_prototypes";

// One row of the metrics report.
struct RoundRecord {
    int round = 0;
    std::vector<double> xi;  // per-class margin used this round; NaN if class absent
    double emitted_global_margin = 0.0;
    double server_accuracy = 0.0;
    std::vector<double> client_accuracy;
    double mean_client_accuracy = 0.0;
    double client_loss = 0.0;
    double client_reg_loss = 0.0;
    double actsp_loss = 0.0;
    double server_loss = 0.0;
    double distill_loss = 0.0;
};

struct ExperimentResult {
    ExperimentConfig config;
    double initial_server_accuracy = 0.0;
    std::vector<RoundRecord> rounds;
    MessageAudit audit;
    PartitionPlan plan;

    double final_server_accuracy() const {
        return rounds.empty() ? initial_server_accuracy : rounds.back().server_accuracy;
    }
    double best_server_accuracy() const {
        double best = initial_server_accuracy;
        for (const auto& r : rounds) best = std::max(best, r.server_accuracy);
        return best;
    }
    double final_margin() const {
        return rounds.empty() ? 0.0 : rounds.back().emitted_global_margin;
    }
};

// Drives one full protocol run: data staging, per-round client training,
// logit/prototype exchange, server-side prototype update (trainable or
// averaged depending on the method), dual-KD server training, and client
// distillation.
class Experiment {
public:
    explicit Experiment(const ExperimentConfig& cfg) : cfg_(cfg) {
        validate_config(cfg_);
        detail::with_phase("setup", [&] { stage(); });
    }

    RoundRecord run_round(int t) {
        RoundRecord rec;
        rec.round = t;
        const std::size_t n_clients = clients_.size();

        // 1) local training, prototype extraction, public inference
        std::vector<TrainTrace> local_traces(n_clients);
        std::vector<ClientPrototypes> prototypes(n_clients);
        std::vector<CountedClientPrototypes> counted(
            cfg_.method == Method::kFedPkdWeightedAvg ? n_clients : 0);
        std::vector<Tensor> public_logits(n_clients);
        detail::with_phase("round " + std::to_string(t) + " local training", [&] {
            detail::parallel_for(n_clients, cfg_.threads, [&](std::size_t i) {
                TrainOptions opts{cfg_.lr_client, cfg_.momentum};
                const std::uint64_t seed =
                    derive_seed(cfg_.seed, 20, static_cast<std::uint64_t>(t), i);
                if (t == 0 || server_prototypes_.empty()) {
                    local_traces[i] = local_train_initial(
                        clients_[i], client_train_[i], static_cast<std::size_t>(cfg_.ep_c),
                        static_cast<std::size_t>(cfg_.batch_size), seed, opts);
                } else {
                    local_traces[i] = local_train_regularized(
                        clients_[i], client_train_[i], server_prototypes_, cfg_.epsilon,
                        static_cast<std::size_t>(cfg_.ep_c),
                        static_cast<std::size_t>(cfg_.batch_size), seed, opts);
                }
                prototypes[i] = compute_prototypes(clients_[i], client_train_[i]);
                if (cfg_.method == Method::kFedPkdWeightedAvg) {
                    counted[i] = compute_counted_prototypes(clients_[i], client_train_[i]);
                }
                public_logits[i] = infer_public(clients_[i], public_.features());
            });
        });
        audit_.record(kMsgClientLogits, n_clients);
        if (cfg_.method == Method::kFedPkdWeightedAvg) {
            audit_.record(kMsgClientPrototypesWithCounts, n_clients);
        } else {
            audit_.record(kMsgClientPrototypes, n_clients);
        }

        // 2) ensemble the client logits
        AggregatedLogits aggregated = detail::with_phase(
            "round " + std::to_string(t) + " aggregation",
            [&] { return aggregate_logits(public_logits); });

        // 3) margin schedule from the unweighted class centers
        PrototypeMap centers = class_centers(prototypes);
        MarginSchedule margins = detail::with_phase(
            "round " + std::to_string(t) + " margins", [&] {
                return cfg_.method == Method::kFedProtoKdZeta
                           ? fixed_margin_schedule(centers, cfg_.zeta)
                           : adaptive_margins(centers, cfg_.zeta);
            });
        rec.xi.assign(static_cast<std::size_t>(cfg_.classes),
                      std::numeric_limits<double>::quiet_NaN());
        for (const auto& [c, xi] : margins.xi) rec.xi[static_cast<std::size_t>(c)] = xi;

        // 4) server prototype update
        detail::with_phase("round " + std::to_string(t) + " prototype update", [&] {
            switch (cfg_.method) {
                case Method::kFedProtoKd:
                case Method::kFedProtoKdZeta: {
                    auto samples = collect_prototype_samples(prototypes);
                    TrainOptions opts{cfg_.lr_tsp, cfg_.momentum};
                    TrainTrace trace = actsp_train(
                        tsp_, samples, margins, static_cast<std::size_t>(cfg_.ep_tsp),
                        static_cast<std::size_t>(cfg_.batch_size),
                        derive_seed(cfg_.seed, 21, static_cast<std::uint64_t>(t)), opts);
                    rec.actsp_loss = trace.total;
                    server_prototypes_ = emitted_prototype_map(tsp_);
                    break;
                }
                case Method::kFedPkdWeightedAvg: {
                    PrototypeMap averaged = weighted_average_prototypes(counted);
                    for (auto& [c, proto] : averaged) server_prototypes_[c] = std::move(proto);
                    rec.actsp_loss = std::numeric_limits<double>::quiet_NaN();
                    break;
                }
                case Method::kFedProtoPlainAvg: {
                    PrototypeMap averaged = plain_average_prototypes(prototypes);
                    for (auto& [c, proto] : averaged) server_prototypes_[c] = std::move(proto);
                    rec.actsp_loss = std::numeric_limits<double>::quiet_NaN();
                    break;
                }
            }
        });
        rec.emitted_global_margin = detail::with_phase(
            "round " + std::to_string(t) + " margin metric",
            [&] { return prototype_margin(server_prototypes_); });

        // 5) importance weighting of the public pool
        ImportanceScores scores = detail::with_phase(
            "round " + std::to_string(t) + " importance", [&] {
                Tensor projected = features(server_, public_.features());
                return importance_scores(aggregated, projected, server_prototypes_, cfg_.phi,
                                         cfg_.k_steepness, cfg_.eps_guard);
            });

        // 6) server dual-KD training
        detail::with_phase("round " + std::to_string(t) + " server training", [&] {
            TrainOptions opts{cfg_.lr_server, cfg_.momentum};
            TrainTrace trace = server_kd_train(
                server_, public_.features(), aggregated, scores, server_prototypes_,
                cfg_.upsilon, static_cast<std::size_t>(cfg_.ep_s),
                static_cast<std::size_t>(cfg_.batch_size),
                derive_seed(cfg_.seed, 22, static_cast<std::uint64_t>(t)), opts);
            rec.server_loss = trace.total;
        });

        // 7) broadcast: server logits for distillation, prototypes for the
        //    next round's regularizer
        Tensor server_logits = infer_public(server_, public_.features());
        audit_.record(kMsgServerLogits, n_clients);
        audit_.record(kMsgServerPrototypes, n_clients);

        // 8) client-side distillation
        std::vector<TrainTrace> distill_traces(n_clients);
        detail::with_phase("round " + std::to_string(t) + " distillation", [&] {
            detail::parallel_for(n_clients, cfg_.threads, [&](std::size_t i) {
                TrainOptions opts{cfg_.lr_client, cfg_.momentum};
                distill_traces[i] = distill_from_server(
                    clients_[i], public_.features(), server_logits, cfg_.eta,
                    static_cast<std::size_t>(cfg_.ep_distill),
                    static_cast<std::size_t>(cfg_.batch_size),
                    derive_seed(cfg_.seed, 23, static_cast<std::uint64_t>(t), i), opts);
            });
        });

        // 9) evaluation
        detail::with_phase("round " + std::to_string(t) + " evaluation", [&] {
            rec.server_accuracy = evaluate_accuracy(server_, global_test_);
            rec.client_accuracy.resize(n_clients);
            detail::parallel_for(n_clients, cfg_.threads, [&](std::size_t i) {
                rec.client_accuracy[i] = evaluate_accuracy(clients_[i], client_test_[i]);
            });
        });
        double acc_sum = 0.0, loss_sum = 0.0, reg_sum = 0.0, distill_sum = 0.0;
        for (std::size_t i = 0; i < n_clients; ++i) {
            acc_sum += rec.client_accuracy[i];
            loss_sum += local_traces[i].total;
            reg_sum += local_traces[i].prototype_alignment;
            distill_sum += distill_traces[i].total;
        }
        rec.mean_client_accuracy = acc_sum / static_cast<double>(n_clients);
        rec.client_loss = loss_sum / static_cast<double>(n_clients);
        rec.client_reg_loss = reg_sum / static_cast<double>(n_clients);
        rec.distill_loss = distill_sum / static_cast<double>(n_clients);
        return rec;
    }

    ExperimentResult run() {
        ExperimentResult result;
        result.config = cfg_;
        result.initial_server_accuracy = initial_server_accuracy_;
        result.plan = plan_;
        for (int t = 0; t < cfg_.rounds; ++t) result.rounds.push_back(run_round(t));
        result.audit = audit_;
        return result;
    }

    // accessors for tests and tools
    const ExperimentConfig& config() const { return cfg_; }
    const PublicSet& public_set() const { return public_; }
    const Dataset& global_test() const { return global_test_; }
    const Dataset& client_train(std::size_t i) const { return client_train_[i]; }
    const Dataset& client_test(std::size_t i) const { return client_test_[i]; }
    ProjectedNet& client(std::size_t i) { return clients_[i]; }
    ProjectedNet& server() { return server_; }
    const PrototypeMap& server_prototypes() const { return server_prototypes_; }
    const MessageAudit& audit() const { return audit_; }
    const PartitionPlan& plan() const { return plan_; }
    double initial_server_accuracy() const { return initial_server_accuracy_; }

private:
    void stage() {
        Dataset source;
        if (cfg_.source == DataSource::kSynthetic) {
            source = generate_mixture(cfg_.classes, static_cast<std::size_t>(cfg_.feature_dim),
                                      static_cast<std::size_t>(cfg_.per_class), cfg_.spread,
                                      derive_seed(cfg_.seed, 1));
        } else {
            source = load_csv(cfg_.csv_path);
            cfg_.classes = source.class_count;
            cfg_.feature_dim = static_cast<int>(source.dim());
        }
        source.validate();
        if (source.class_count < 2) throw DomainError("stage: need at least two classes");

        auto [test, working] = stratified_split(source, cfg_.test_fraction,
                                                derive_seed(cfg_.seed, 2));
        global_test_ = std::move(test);

        PublicSplit split = split_public(working, static_cast<std::size_t>(cfg_.public_n),
                                         derive_seed(cfg_.seed, 3));
        public_ = std::move(split.public_set);
        Dataset pool = std::move(split.private_pool);

        const std::size_t n_clients = static_cast<std::size_t>(cfg_.clients);
        std::vector<std::vector<std::size_t>> shards;
        if (cfg_.partition == "dirichlet") {
            shards = dirichlet_partition(pool, n_clients, cfg_.alpha, derive_seed(cfg_.seed, 4));
        } else {
            shards = pathological_partition(pool, n_clients,
                                            static_cast<std::size_t>(cfg_.k_classes),
                                            derive_seed(cfg_.seed, 4));
        }

        plan_.public_indices = split.public_indices;
        plan_.client_indices.resize(n_clients);
        for (std::size_t i = 0; i < n_clients; ++i) {
            for (std::size_t idx : shards[i]) {
                plan_.client_indices[i].push_back(split.private_indices[idx]);
            }
        }

        clients_.reserve(n_clients);
        client_train_.resize(n_clients);
        client_test_.resize(n_clients);
        for (std::size_t i = 0; i < n_clients; ++i) {
            Dataset shard = pool.subset(shards[i]);
            if (shard.size() >= 2) {
                auto [ctest, ctrain] = stratified_split(shard, cfg_.client_test_fraction,
                                                        derive_seed(cfg_.seed, 5, i));
                if (ctest.size() == 0 || ctrain.size() == 0) {
                    client_train_[i] = shard;
                    client_test_[i] = std::move(shard);
                } else {
                    client_train_[i] = std::move(ctrain);
                    client_test_[i] = std::move(ctest);
                }
            } else {
                client_train_[i] = shard;
                client_test_[i] = std::move(shard);
            }
            clients_.push_back(make_client_model(
                i, static_cast<std::size_t>(cfg_.feature_dim),
                static_cast<std::size_t>(cfg_.common_dim),
                static_cast<std::size_t>(cfg_.classes), derive_seed(cfg_.seed, 6, i)));
        }

        server_ = make_server_model(static_cast<std::size_t>(cfg_.feature_dim),
                                    static_cast<std::size_t>(cfg_.common_dim),
                                    static_cast<std::size_t>(cfg_.classes),
                                    derive_seed(cfg_.seed, 7));
        if (cfg_.method == Method::kFedProtoKd || cfg_.method == Method::kFedProtoKdZeta) {
            tsp_ = make_server_prototypes(static_cast<std::size_t>(cfg_.classes),
                                          static_cast<std::size_t>(cfg_.common_dim),
                                          derive_seed(cfg_.seed, 8));
        }
        initial_server_accuracy_ = evaluate_accuracy(server_, global_test_);
    }

    ExperimentConfig cfg_;
    Dataset global_test_;
    PublicSet public_;
    std::vector<Dataset> client_train_;
    std::vector<Dataset> client_test_;
    std::vector<ProjectedNet> clients_;
    ProjectedNet server_;
    TrainableServerPrototypes tsp_;
    PrototypeMap server_prototypes_;
    MessageAudit audit_;
    PartitionPlan plan_;
    double initial_server_accuracy_ = 0.0;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    Experiment experiment(cfg);
    return experiment.run();
}

}  // namespace fedprotokd
