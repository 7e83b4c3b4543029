#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedprotokd/errors.hpp"

namespace fedprotokd {

enum class Method {
    kFedProtoKd,        // trainable prototypes, class-wise adaptive margins
    kFedProtoKdZeta,    // trainable prototypes, single shared margin
    kFedPkdWeightedAvg, // count-weighted prototype averaging
    kFedProtoPlainAvg,  // unweighted prototype averaging
};

inline std::string method_name(Method m) {
    switch (m) {
        case Method::kFedProtoKd: return "fedprotokd";
        case Method::kFedProtoKdZeta: return "fedprotokd_zeta";
        case Method::kFedPkdWeightedAvg: return "fedpkd_weightedavg";
        case Method::kFedProtoPlainAvg: return "fedproto_plainavg";
    }
    throw UsageError("method_name: unknown method");
}

inline Method parse_method(const std::string& name) {
    if (name == "fedprotokd") return Method::kFedProtoKd;
    if (name == "fedprotokd_zeta") return Method::kFedProtoKdZeta;
    if (name == "fedpkd_weightedavg") return Method::kFedPkdWeightedAvg;
    if (name == "fedproto_plainavg") return Method::kFedProtoPlainAvg;
    throw ParseError("method: unknown value '" + name + "'");
}

enum class DataSource { kSynthetic, kCsv };

struct ExperimentConfig {
    // [experiment]
    Method method = Method::kFedProtoKd;
    int rounds = 50;
    int clients = 10;
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds;  // optional sweep; empty means {seed}
    int threads = 1;
    bool audit = false;

    // [data]
    DataSource source = DataSource::kSynthetic;
    int classes = 10;
    int feature_dim = 8;
    int per_class = 1250;
    double spread = 1.0;
    std::string csv_path;
    int public_n = 2500;
    std::string partition = "dirichlet";  // dirichlet | pathological
    double alpha = 0.1;
    int k_classes = 3;
    double test_fraction = 0.2;
    double client_test_fraction = 0.2;

    // [hyperparameters]
    int common_dim = 16;
    int ep_c = 5;
    int ep_s = 10;
    int ep_tsp = 100;
    int ep_distill = 5;
    int batch_size = 32;
    double zeta = 50.0;
    double upsilon = 0.5;
    double epsilon = 0.5;
    double eta = 0.5;
    double phi = 0.8;
    double k_steepness = 10.0;
    double eps_guard = 1e-8;
    double lr_client = 0.01;
    double lr_server = 0.01;
    double lr_tsp = 0.01;
    double momentum = 0.9;

    bool operator==(const ExperimentConfig&) const = default;

    std::vector<std::uint64_t> seed_list() const {
        return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double_value(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        throw ParseError(key + ": not a number: '" + value + "'");
    }
    if (used != value.size()) throw ParseError(key + ": not a number: '" + value + "'");
    return v;
}

inline long long parse_int_value(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &used);
    } catch (const std::exception&) {
        throw ParseError(key + ": not an integer: '" + value + "'");
    }
    if (used != value.size()) throw ParseError(key + ": not an integer: '" + value + "'");
    return v;
}

inline bool parse_bool_value(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ParseError(key + ": not a boolean: '" + value + "'");
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& cfg) {
    auto range = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    range(cfg.rounds >= 1, "rounds: must be at least 1");
    range(cfg.clients >= 2, "clients: must be at least 2");
    range(cfg.threads >= 0, "threads: must be nonnegative");
    range(cfg.classes >= 2, "classes: must be at least 2");
    range(cfg.feature_dim >= 2, "feature_dim: must be at least 2");
    range(cfg.per_class >= 1, "per_class: must be at least 1");
    range(cfg.spread >= 0.0, "spread: must be nonnegative");
    range(cfg.public_n >= 1, "public_n: must be at least 1");
    range(cfg.partition == "dirichlet" || cfg.partition == "pathological",
          "partition: must be 'dirichlet' or 'pathological'");
    range(cfg.alpha > 0.0, "alpha: must be positive");
    range(cfg.k_classes >= 1 && cfg.k_classes <= cfg.classes,
          "k_classes: must be in [1, classes]");
    range(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0,
          "test_fraction: must be in (0,1)");
    range(cfg.client_test_fraction > 0.0 && cfg.client_test_fraction < 1.0,
          "client_test_fraction: must be in (0,1)");
    range(cfg.source == DataSource::kSynthetic || !cfg.csv_path.empty(),
          "csv_path: required when source is csv");
    range(cfg.common_dim >= 1, "common_dim: must be at least 1");
    range(cfg.ep_c >= 0, "ep_c: must be nonnegative");
    range(cfg.ep_s >= 0, "ep_s: must be nonnegative");
    range(cfg.ep_tsp >= 0, "ep_tsp: must be nonnegative");
    range(cfg.ep_distill >= 0, "ep_distill: must be nonnegative");
    range(cfg.batch_size >= 1, "batch_size: must be at least 1");
    range(cfg.zeta > 0.0, "zeta: must be positive");
    range(cfg.upsilon >= 0.0 && cfg.upsilon <= 1.0, "upsilon: must be in [0,1]");
    range(cfg.epsilon >= 0.0, "epsilon: must be nonnegative");
    range(cfg.eta >= 0.0 && cfg.eta <= 1.0, "eta: must be in [0,1]");
    range(cfg.phi >= 0.0 && cfg.phi <= 1.0, "phi: must be in [0,1]");
    range(cfg.k_steepness > 0.0, "k_steepness: must be positive");
    range(cfg.eps_guard > 0.0, "eps_guard: must be positive");
    range(cfg.lr_client > 0.0, "lr_client: must be positive");
    range(cfg.lr_server > 0.0, "lr_server: must be positive");
    range(cfg.lr_tsp > 0.0, "lr_tsp: must be positive");
    range(cfg.momentum >= 0.0 && cfg.momentum < 1.0, "momentum: must be in [0,1)");
}

// INI-style config text: [experiment] / [data] / [hyperparameters]
// sections, key = value lines, '#' or ';' comments. Unknown sections or
// keys are rejected by name; every key has a default.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ParseError("config line " + std::to_string(lineno) +
                                 ": malformed section header");
            }
            section = detail::trim(line.substr(1, line.size() - 2));
            if (section != "experiment" && section != "data" && section != "hyperparameters") {
                throw ParseError("config line " + std::to_string(lineno) +
                                 ": unknown section [" + section + "]");
            }
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (section.empty()) {
            throw ParseError("config line " + std::to_string(lineno) +
                             ": key '" + key + "' outside any section");
        }

        auto as_int = [&]() { return detail::parse_int_value(key, value); };
        auto as_double = [&]() { return detail::parse_double_value(key, value); };

        bool handled = true;
        if (section == "experiment") {
            if (key == "method") cfg.method = parse_method(value);
            else if (key == "rounds") cfg.rounds = static_cast<int>(as_int());
            else if (key == "clients") cfg.clients = static_cast<int>(as_int());
            else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_int());
            else if (key == "seeds") {
                cfg.seeds.clear();
                std::stringstream ss(value);
                std::string tok;
                while (std::getline(ss, tok, ',')) {
                    tok = detail::trim(tok);
                    if (tok.empty()) continue;
                    cfg.seeds.push_back(
                        static_cast<std::uint64_t>(detail::parse_int_value(key, tok)));
                }
            }
            else if (key == "threads") cfg.threads = static_cast<int>(as_int());
            else if (key == "audit") cfg.audit = detail::parse_bool_value(key, value);
            else handled = false;
        } else if (section == "data") {
            if (key == "source") {
                if (value == "synthetic") cfg.source = DataSource::kSynthetic;
                else if (value == "csv") cfg.source = DataSource::kCsv;
                else throw ParseError("source: unknown value '" + value + "'");
            }
            else if (key == "classes") cfg.classes = static_cast<int>(as_int());
            else if (key == "feature_dim") cfg.feature_dim = static_cast<int>(as_int());
            else if (key == "per_class") cfg.per_class = static_cast<int>(as_int());
            else if (key == "spread") cfg.spread = as_double();
            else if (key == "csv_path") cfg.csv_path = value;
            else if (key == "public_n") cfg.public_n = static_cast<int>(as_int());
            else if (key == "partition") cfg.partition = value;
            else if (key == "alpha") cfg.alpha = as_double();
            else if (key == "k_classes") cfg.k_classes = static_cast<int>(as_int());
            else if (key == "test_fraction") cfg.test_fraction = as_double();
            else if (key == "client_test_fraction") cfg.client_test_fraction = as_double();
            else handled = false;
        } else {  // hyperparameters
            if (key == "common_dim") cfg.common_dim = static_cast<int>(as_int());
            else if (key == "ep_c") cfg.ep_c = static_cast<int>(as_int());
            else if (key == "ep_s") cfg.ep_s = static_cast<int>(as_int());
            else if (key == "ep_tsp") cfg.ep_tsp = static_cast<int>(as_int());
            else if (key == "ep_distill") cfg.ep_distill = static_cast<int>(as_int());
            else if (key == "batch_size") cfg.batch_size = static_cast<int>(as_int());
            else if (key == "zeta") cfg.zeta = as_double();
            else if (key == "upsilon") cfg.upsilon = as_double();
            else if (key == "epsilon") cfg.epsilon = as_double();
            else if (key == "eta") cfg.eta = as_double();
            else if (key == "phi") cfg.phi = as_double();
            else if (key == "k_steepness") cfg.k_steepness = as_double();
            else if (key == "eps_guard") cfg.eps_guard = as_double();
            else if (key == "lr_client") cfg.lr_client = as_double();
            else if (key == "lr_server") cfg.lr_server = as_double();
            else if (key == "lr_tsp") cfg.lr_tsp = as_double();
            else if (key == "momentum") cfg.momentum = as_double();
            else handled = false;
        }
        if (!handled) {
            throw ParseError("config line " + std::to_string(lineno) + ": unknown key '" +
                             key + "' in section [" + section + "]");
        }
    }
    validate_config(cfg);
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "[experiment]\n";
    out << "method = " << method_name(cfg.method) << "\n";
    out << "rounds = " << cfg.rounds << "\n";
    out << "clients = " << cfg.clients << "\n";
    out << "seed = " << cfg.seed << "\n";
    if (!cfg.seeds.empty()) {
        out << "seeds = ";
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
            if (i) out << ",";
            out << cfg.seeds[i];
        }
        out << "\n";
    }
    out << "threads = " << cfg.threads << "\n";
    out << "audit = " << (cfg.audit ? "true" : "false") << "\n";
    out << "\n[data]\n";
    out << "source = " << (cfg.source == DataSource::kSynthetic ? "synthetic" : "csv") << "\n";
    out << "classes = " << cfg.classes << "\n";
    out << "feature_dim = " << cfg.feature_dim << "\n";
    out << "per_class = " << cfg.per_class << "\n";
    out << "spread = " << detail::format_double(cfg.spread) << "\n";
    if (!cfg.csv_path.empty()) out << "csv_path = " << cfg.csv_path << "\n";
    out << "public_n = " << cfg.public_n << "\n";
    out << "partition = " << cfg.partition << "\n";
    out << "alpha = " << detail::format_double(cfg.alpha) << "\n";
    out << "k_classes = " << cfg.k_classes << "\n";
    out << "test_fraction = " << detail::format_double(cfg.test_fraction) << "\n";
    out << "client_test_fraction = " << detail::format_double(cfg.client_test_fraction) << "\n";
    out << "\n[hyperparameters]\n";
    out << "common_dim = " << cfg.common_dim << "\n";
    out << "ep_c = " << cfg.ep_c << "\n";
    out << "ep_s = " << cfg.ep_s << "\n";
    out << "ep_tsp = " << cfg.ep_tsp << "\n";
    out << "ep_distill = " << cfg.ep_distill << "\n";
    out << "batch_size = " << cfg.batch_size << "\n";
    out << "zeta = " << detail::format_double(cfg.zeta) << "\n";
    out << "upsilon = " << detail::format_double(cfg.upsilon) << "\n";
    out << "epsilon = " << detail::format_double(cfg.epsilon) << "\n";
    out << "eta = " << detail::format_double(cfg.eta) << "\n";
    out << "phi = " << detail::format_double(cfg.phi) << "\n";
    out << "k_steepness = " << detail::format_double(cfg.k_steepness) << "\n";
    out << "eps_guard = " << detail::format_double(cfg.eps_guard) << "\n";
    out << "lr_client = " << detail::format_double(cfg.lr_client) << "\n";
    out << "lr_server = " << detail::format_double(cfg.lr_server) << "\n";
    out << "lr_tsp = " << detail::format_double(cfg.lr_tsp) << "\n";
    out << "momentum = " << detail::format_double(cfg.momentum) << "\n";
    return out.str();
}

}  // namespace fedprotokd
