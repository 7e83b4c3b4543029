#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedprotokd/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Deterministic simulator for prototype-based heterogeneous federated "
                 "distillation"};
    app.set_version_flag("--version", std::string(fedprotokd::kVersion));
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    auto* run = app.add_subcommand("run", "Run the experiment(s) described by a config file");
    run->add_option("config", config_path, "Path to an INI config file")->required();
    run->add_option("--out", out_dir,
                    "Output directory (defaults to $FEDPROTOKD_OUT_DIR, then '.')");

    std::string validate_path;
    auto* validate = app.add_subcommand("validate", "Parse and validate a config file");
    validate->add_option("config", validate_path, "Path to an INI config file")->required();

    std::vector<std::string> csv_paths;
    auto* compare = app.add_subcommand("compare", "Compare metrics CSVs produced by run");
    compare->add_option("csv", csv_paths, "Metrics CSV files")->required()->expected(-1);

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        return fedprotokd::run_command(config_path, out_dir, std::cout, std::cerr);
    }
    if (validate->parsed()) {
        return fedprotokd::validate_command(validate_path, std::cout, std::cerr);
    }
    return fedprotokd::compare_command(csv_paths, std::cout, std::cerr);
}
