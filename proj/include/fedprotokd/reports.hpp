#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedprotokd/errors.hpp"
#include "fedprotokd/orchestrator.hpp"

namespace fedprotokd {

namespace detail {

inline std::string format_metric(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        out += c;
        if (c == '"') out += '"';
    }
    out += '"';
    return out;
}

inline std::string basename_of(const std::string& path) {
    const std::size_t pos = path.find_last_of("/\\");
    return pos == std::string::npos ? path : path.substr(pos + 1);
}

}  // namespace detail

inline std::vector<std::string> metrics_columns(int classes, int clients) {
    std::vector<std::string> cols = {"round", "global_margin"};
    for (int c = 0; c < classes; ++c) cols.push_back("xi_" + std::to_string(c));
    cols.push_back("server_acc");
    cols.push_back("mean_client_acc");
    for (int i = 0; i < clients; ++i) cols.push_back("client_acc_" + std::to_string(i));
    cols.push_back("client_loss");
    cols.push_back("client_reg_loss");
    cols.push_back("actsp_loss");
    cols.push_back("server_loss");
    cols.push_back("distill_loss");
    return cols;
}

inline std::string metrics_csv_text(const ExperimentResult& result) {
    const int classes = result.config.classes;
    const int clients = result.config.clients;
    std::ostringstream out;
    const auto cols = metrics_columns(classes, clients);
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i) out << ',';
        out << cols[i];
    }
    out << '\n';
    for (const auto& r : result.rounds) {
        out << r.round << ',' << detail::format_metric(r.emitted_global_margin);
        for (int c = 0; c < classes; ++c) {
            out << ',' << detail::format_metric(r.xi[static_cast<std::size_t>(c)]);
        }
        out << ',' << detail::format_metric(r.server_accuracy);
        out << ',' << detail::format_metric(r.mean_client_accuracy);
        for (int i = 0; i < clients; ++i) {
            out << ',' << detail::format_metric(r.client_accuracy[static_cast<std::size_t>(i)]);
        }
        out << ',' << detail::format_metric(r.client_loss);
        out << ',' << detail::format_metric(r.client_reg_loss);
        out << ',' << detail::format_metric(r.actsp_loss);
        out << ',' << detail::format_metric(r.server_loss);
        out << ',' << detail::format_metric(r.distill_loss);
        out << '\n';
    }
    return out.str();
}

inline void write_metrics_csv(const std::string& path, const ExperimentResult& result) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("metrics: cannot open " + path + " for writing");
    out << metrics_csv_text(result);
    if (!out) throw IoError("metrics: write failed for " + path);
}

struct MetricsTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    std::size_t column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i) {
            if (columns[i] == name) return i;
        }
        throw ParseError("metrics: missing column '" + name + "'");
    }
};

inline MetricsTable read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("metrics: cannot open " + path);
    MetricsTable table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> tokens;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) tokens.push_back(tok);
        if (lineno == 1) {
            table.columns = tokens;
            continue;
        }
        if (tokens.size() != table.columns.size()) {
            throw ParseError("metrics: " + path + " row " + std::to_string(lineno) +
                             ": expected " + std::to_string(table.columns.size()) +
                             " fields, got " + std::to_string(tokens.size()));
        }
        std::vector<double> row;
        for (const auto& field : tokens) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(field, &used);
            } catch (const std::exception&) {
                throw ParseError("metrics: " + path + " row " + std::to_string(lineno) +
                                 ": not a number: '" + field + "'");
            }
            if (used != field.size()) {
                throw ParseError("metrics: " + path + " row " + std::to_string(lineno) +
                                 ": not a number: '" + field + "'");
            }
            row.push_back(v);
        }
        table.rows.push_back(std::move(row));
    }
    if (table.columns.empty()) throw ParseError("metrics: " + path + " is empty");
    return table;
}

// Side-by-side textual comparison of metric files produced by run. All
// files must share one schema; every pair gets delta and verdict lines.
inline std::string compare_report(const std::vector<std::string>& paths) {
    if (paths.empty()) throw UsageError("compare: need at least one metrics file");
    std::vector<MetricsTable> tables;
    for (const auto& p : paths) tables.push_back(read_metrics_csv(p));

    const auto& schema = tables.front().columns;
    for (std::size_t i = 1; i < tables.size(); ++i) {
        std::vector<std::string> missing;
        for (const auto& col : schema) {
            bool found = false;
            for (const auto& other : tables[i].columns) {
                if (other == col) { found = true; break; }
            }
            if (!found) missing.push_back(col);
        }
        for (const auto& col : tables[i].columns) {
            bool found = false;
            for (const auto& ours : schema) {
                if (ours == col) { found = true; break; }
            }
            if (!found) missing.push_back(col + " (extra)");
        }
        if (!missing.empty()) {
            std::string what = "compare: schema mismatch between " +
                               detail::basename_of(paths[0]) + " and " +
                               detail::basename_of(paths[i]) + ":";
            for (const auto& m : missing) what += " " + m;
            throw ParseError(what);
        }
    }

    struct Summary {
        std::string label;
        std::size_t rounds = 0;
        double final_margin = 0.0, best_margin = 0.0;
        double final_acc = 0.0, best_acc = 0.0;
        double final_client_acc = 0.0;
    };
    std::vector<Summary> summaries;
    for (std::size_t i = 0; i < tables.size(); ++i) {
        const auto& t = tables[i];
        if (t.rows.empty()) {
            throw ParseError("compare: " + paths[i] + " holds no data rows");
        }
        Summary s;
        s.label = detail::basename_of(paths[i]);
        s.rounds = t.rows.size();
        const std::size_t margin_col = t.column_index("global_margin");
        const std::size_t acc_col = t.column_index("server_acc");
        const std::size_t cacc_col = t.column_index("mean_client_acc");
        s.final_margin = t.rows.back()[margin_col];
        s.final_acc = t.rows.back()[acc_col];
        s.final_client_acc = t.rows.back()[cacc_col];
        s.best_margin = s.final_margin;
        s.best_acc = s.final_acc;
        for (const auto& row : t.rows) {
            s.best_margin = std::max(s.best_margin, row[margin_col]);
            s.best_acc = std::max(s.best_acc, row[acc_col]);
        }
        summaries.push_back(s);
    }

    std::ostringstream out;
    out << "metrics comparison (" << summaries.size() << " file"
        << (summaries.size() == 1 ? "" : "s") << ")\n";
    for (const auto& s : summaries) {
        out << "\n" << s.label << "\n";
        out << "  rounds:                " << s.rounds << "\n";
        out << "  final global margin:   " << detail::format_metric(s.final_margin)
            << "  (best " << detail::format_metric(s.best_margin) << ")\n";
        out << "  final server accuracy: " << detail::format_metric(s.final_acc)
            << "  (best " << detail::format_metric(s.best_acc) << ")\n";
        out << "  final mean client acc: " << detail::format_metric(s.final_client_acc) << "\n";
    }
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        for (std::size_t j = i + 1; j < summaries.size(); ++j) {
            const auto& a = summaries[i];
            const auto& b = summaries[j];
            out << "\n" << a.label << " vs " << b.label << "\n";
            out << "  final margin delta:   "
                << detail::format_metric(a.final_margin - b.final_margin) << "\n";
            out << "  final accuracy delta: "
                << detail::format_metric(a.final_acc - b.final_acc) << "\n";
            auto lead = [&](double x, double y) {
                if (x > y) return a.label;
                if (y > x) return b.label;
                return std::string("tie");
            };
            out << "  verdict: margin " << lead(a.final_margin, b.final_margin)
                << ", server accuracy " << lead(a.final_acc, b.final_acc) << "\n";
        }
    }
    return out.str();
}

}  // namespace fedprotokd
