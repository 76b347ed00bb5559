#include "memloom/commands.hpp"
#include "memloom/error.hpp"
#include "memloom/log.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Flags {
    std::optional<std::string> config;
    std::optional<std::string> data;
    memloom::Overrides overrides;
    std::optional<std::string> out;
};

void add_run_flags(CLI::App* cmd, Flags& f)
{
    cmd->add_option("--config", f.config, "JSON config file");
    cmd->add_option("--variant", f.overrides.variant, "enc-dec|replay|mbpa++|meta-mbpa|mtl");
    cmd->add_option("--policy", f.overrides.policy, "random|diversity|uncertainty|forgettable");
    cmd->add_option("--memory-rate", f.overrides.memory_rate, "fraction of the stream written to memory");
    cmd->add_option("--ordering", f.overrides.ordering, "task ordering: i|ii|iii|iv");
    cmd->add_option("--seed", f.overrides.seed, "run seed");
    cmd->add_option("--out", f.out, "run directory");
    cmd->add_flag("--first-order", f.overrides.first_order, "drop second-order terms of the meta gradient");
    cmd->add_option("--diversity-rule", f.overrides.diversity_rule, "intuitive|literal");
    cmd->add_flag("--no-adapt-eval", f.overrides.no_adapt_eval, "predict without local adaptation");
    cmd->add_option("--data", f.data, "data directory (default: <out>/data)");
}

memloom::RunConfig resolve(const Flags& f)
{
    memloom::Overrides o = f.overrides;
    if (f.out) {
        o.output = *f.out;
    }
    std::optional<std::filesystem::path> path;
    if (f.config) {
        path = *f.config;
    }
    return memloom::load_config(path, o);
}

void print_summary(const memloom::EvalReport& r)
{
    for (const auto& s : r.per_task) {
        std::printf("%-8s %.4f\n", s.task.c_str(), s.accuracy);
    }
    std::printf("macro    %.4f\nlast     %.4f\n", r.macro, r.last_task);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app { "memloom: lifelong text-classification experiments on synthetic task streams" };
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "log progress to stderr");

    Flags gen, train, eval, run;
    app.fallthrough();
    add_run_flags(app.add_subcommand("generate", "write the task stream and test sets"), gen);
    add_run_flags(app.add_subcommand("train", "train a variant on a generated stream"), train);
    add_run_flags(app.add_subcommand("eval", "evaluate saved artifacts and write reports"), eval);
    add_run_flags(app.add_subcommand("run", "generate, train and eval"), run);

    auto* compare = app.add_subcommand("compare", "tabulate runs (directories or config files)");
    std::vector<std::string> inputs;
    std::string compare_out = "comparison";
    compare->add_option("inputs", inputs, "run directories or config files")->required();
    compare->add_option("--out", compare_out, "directory for comparison.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }
    if (verbose) {
        memloom::log::set_level(memloom::log::Level::Info);
    }

    const auto data_dir = [](const Flags& f) -> std::optional<std::filesystem::path> {
        if (f.data) {
            return std::filesystem::path(*f.data);
        }
        return std::nullopt;
    };

    try {
        if (app.got_subcommand("generate")) {
            memloom::cmd_generate(resolve(gen), data_dir(gen));
        } else if (app.got_subcommand("train")) {
            memloom::cmd_train(resolve(train), data_dir(train));
        } else if (app.got_subcommand("eval")) {
            print_summary(memloom::cmd_eval(resolve(eval), data_dir(eval)));
        } else if (app.got_subcommand("run")) {
            const auto cfg = resolve(run);
            memloom::cmd_generate(cfg, data_dir(run));
            memloom::cmd_train(cfg, data_dir(run));
            print_summary(memloom::cmd_eval(cfg, data_dir(run)));
        } else if (app.got_subcommand("compare")) {
            std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
            std::cout << memloom::cmd_compare(paths, compare_out);
        }
    } catch (const memloom::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const memloom::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}
