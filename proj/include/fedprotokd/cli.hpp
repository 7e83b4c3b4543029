#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedprotokd/config.hpp"
#include "fedprotokd/orchestrator.hpp"
#include "fedprotokd/reports.hpp"

namespace fedprotokd {

inline constexpr const char* kVersion = "fedprotokd 0.1.0";
inline constexpr const char* kOutDirEnv = "FEDPROTOKD_OUT_DIR";

// Output directory precedence: explicit --out flag, then the
// FEDPROTOKD_OUT_DIR environment variable, then the working directory.
inline std::string resolve_out_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') {
        return env;
    }
    return ".";
}

inline std::string config_stem(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

// Runs the experiment(s) described by the config (one per seed in the
// sweep), writing one metrics CSV per seed, optional audit JSON, and a
// run manifest. The manifest is written last so its presence marks a
// completed run.
inline int run_command(const std::string& config_path, const std::string& out_flag,
                       std::ostream& out, std::ostream& err) {
    try {
        const ExperimentConfig base = load_config(config_path);
        const std::string out_dir = resolve_out_dir(out_flag);
        std::filesystem::create_directories(out_dir);
        const std::string stem = config_stem(config_path);

        nlohmann::json manifest;
        manifest["version"] = kVersion;
        manifest["config_path"] = config_path;
        manifest["config"] = serialize_config(base);
        manifest["outputs"] = nlohmann::json::array();
        manifest["results"] = nlohmann::json::array();
        double setup_seconds = 0.0, train_seconds = 0.0, report_seconds = 0.0;

        for (std::uint64_t seed : base.seed_list()) {
            ExperimentConfig cfg = base;
            cfg.seed = seed;
            cfg.seeds.clear();

            auto t0 = std::chrono::steady_clock::now();
            Experiment experiment(cfg);
            setup_seconds += detail::seconds_since(t0);

            t0 = std::chrono::steady_clock::now();
            ExperimentResult result = experiment.run();
            train_seconds += detail::seconds_since(t0);

            t0 = std::chrono::steady_clock::now();
            const std::string csv_name = stem + "." + method_name(cfg.method) + ".seed" +
                                         std::to_string(seed) + ".metrics.csv";
            const std::string csv_path = (std::filesystem::path(out_dir) / csv_name).string();
            write_metrics_csv(csv_path, result);
            manifest["outputs"].push_back(csv_path);

            if (cfg.audit) {
                nlohmann::json audit;
                audit["messages"] = result.audit.counts;
                audit["partition"] = plan_to_json(result.plan);
                nlohmann::json rounds = nlohmann::json::array();
                for (const auto& r : result.rounds) {
                    rounds.push_back({{"round", r.round},
                                      {"xi", r.xi},
                                      {"global_margin", r.emitted_global_margin}});
                }
                audit["rounds"] = rounds;
                const std::string audit_name = stem + "." + method_name(cfg.method) + ".seed" +
                                               std::to_string(seed) + ".audit.json";
                const std::string audit_path =
                    (std::filesystem::path(out_dir) / audit_name).string();
                std::ofstream audit_file(audit_path, std::ios::binary);
                if (!audit_file) throw IoError("run: cannot open " + audit_path);
                audit_file << audit.dump(2) << "\n";
                if (!audit_file) throw IoError("run: write failed for " + audit_path);
                manifest["outputs"].push_back(audit_path);
            }
            report_seconds += detail::seconds_since(t0);

            manifest["results"].push_back(
                {{"seed", seed},
                 {"initial_server_accuracy", result.initial_server_accuracy},
                 {"final_server_accuracy", result.final_server_accuracy()},
                 {"best_server_accuracy", result.best_server_accuracy()},
                 {"final_margin", result.final_margin()},
                 {"rounds", result.rounds.size()}});

            out << "seed " << seed << ": server accuracy "
                << detail::format_metric(result.initial_server_accuracy) << " -> "
                << detail::format_metric(result.final_server_accuracy())
                << ", final margin " << detail::format_metric(result.final_margin())
                << ", wrote " << csv_path << "\n";
        }

        manifest["timings_seconds"] = {{"setup", setup_seconds},
                                       {"train", train_seconds},
                                       {"report", report_seconds}};
        const std::string manifest_path =
            (std::filesystem::path(out_dir) / (stem + ".run_manifest.json")).string();
        std::ofstream mf(manifest_path, std::ios::binary);
        if (!mf) throw IoError("run: cannot open " + manifest_path);
        mf << manifest.dump(2) << "\n";
        if (!mf) throw IoError("run: write failed for " + manifest_path);
        out << "manifest: " << manifest_path << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "run: error: " << e.what() << "\n";
        return 1;
    }
}

inline int validate_command(const std::string& config_path, std::ostream& out,
                            std::ostream& err) {
    try {
        const ExperimentConfig cfg = load_config(config_path);
        out << "ok: " << config_path << "\n" << serialize_config(cfg);
        return 0;
    } catch (const std::exception& e) {
        err << "validate: error: " << e.what() << "\n";
        return 1;
    }
}

inline int compare_command(const std::vector<std::string>& paths, std::ostream& out,
                           std::ostream& err) {
    try {
        out << compare_report(paths);
        return 0;
    } catch (const std::exception& e) {
        err << "compare: error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace fedprotokd
