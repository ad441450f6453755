// frrr: command-line driver for the fractional-posterior reduced-rank toolkit.
//
//   frrr <subcommand> [--config FILE] [--set section.key=value]... [--out DIR]
//   frrr <subcommand> --print-config [...]
//
// Exit codes: 0 ok, 1 I/O or other failure, 2 config error, 3 data error,
// 4 numerical failure (including studies that finish with aborted cells).

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "frrr/cli.hpp"

int main(int argc, char** argv) {
    namespace cli = frrr::cli;
    std::cout.setf(std::ios::unitbuf);

    CLI::App app{"Fractional-posterior reduced-rank regression toolkit"};
    app.set_version_flag("--version", cli::kVersion);
    app.require_subcommand(1);

    struct Options {
        std::string config;
        std::vector<std::string> sets;
        std::string out;
        bool print = false;
    };
    std::vector<Options> opts(cli::subcommands().size());
    for (std::size_t k = 0; k < cli::subcommands().size(); ++k) {
        CLI::App* sub = app.add_subcommand(cli::subcommands()[k]);
        sub->add_option("-c,--config", opts[k].config, "INI config file");
        sub->add_option("-s,--set", opts[k].sets, "override one key: section.key=value");
        sub->add_option("-o,--out", opts[k].out, "output directory (overrides run.output_dir)");
        sub->add_flag("--print-config", opts[k].print, "print the effective config and exit");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : cli::ExitCode::config;
    }

    std::size_t k = 0;
    while (!app.got_subcommand(cli::subcommands()[k])) ++k;
    const std::string& name = cli::subcommands()[k];
    const Options& o = opts[k];

    cli::Config config;
    try {
        config = o.config.empty() ? cli::default_config(name) : cli::load_config(name, o.config);
        if (o.config.empty()) config.base_dir = ".";
        for (const auto& s : o.sets) cli::apply_assignment(config, s);
        if (!o.out.empty()) {
            // relative to the working directory, not the config file
            cli::apply_assignment(config, "run.output_dir=" + std::filesystem::absolute(o.out).string());
        }
    } catch (const std::exception& e) {
        std::cerr << "frrr " << name << ": " << e.what() << '\n';
        return cli::ExitCode::config;
    }
    if (o.print) {
        std::cout << cli::serialize(config);
        return 0;
    }

    try {
        return cli::run_command(config, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "frrr " << name << ": " << e.what() << '\n';
        return cli::exit_code_for(std::current_exception());
    }
}
