// Command line driver: optimizer runs, field samples, rate fits and presets.

#include "mlsgd/mlmc.hpp"
#include "mlsgd/randfield.hpp"
#include "mlsgd/rates.hpp"
#include "mlsgd/runner.hpp"
#include "mlsgd/seeds.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace mlsgd;
using runner::ExitCode;

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
    std::string out;
};

void apply(runner::RunConfig& c, const Overrides& o) {
    if (o.seed) c.root_seed = *o.seed;
    if (o.workers) c.workers = *o.workers;
}

int report(const runner::RunResult& r) {
    if (r.exit_code != runner::kOk) std::cerr << "mlsgd: " << r.error << '\n';
    return r.exit_code;
}

int cmd_run(const std::string& config_path, const Overrides& o) {
    runner::RunConfig c;
    try {
        if (!config_path.empty()) c = runner::load_config(config_path);
        apply(c, o);
        if (!o.out.empty()) c.output = o.out;
        runner::validate(c);
    } catch (const runner::ConfigError& e) {
        std::cerr << "mlsgd: " << e.what() << '\n';
        return runner::kConfigError;
    }
    return report(runner::run(c));
}

int cmd_sample_grf(const std::string& config_path, int level, const Overrides& o) {
    runner::RunConfig c;
    try {
        if (!config_path.empty()) c = runner::load_config(config_path);
        apply(c, o);
        runner::validate(c);
        if (level < 0 || c.e0 + level > mesh::kMaxExponent) throw runner::ConfigError("level out of range");
    } catch (const runner::ConfigError& e) {
        std::cerr << "mlsgd: " << e.what() << '\n';
        return runner::kConfigError;
    }
    mesh::NodalField y;
    try {
        const mesh::GridLevel g{level, c.e0};
        const auto plan = randfield::build_embedding(g, c.matern, c.padding_factor);
        y = randfield::sample_field(plan, seeds::mix(c.root_seed, 0, static_cast<std::uint64_t>(level), 1));
    } catch (const std::exception& e) {
        std::cerr << "mlsgd: " << e.what() << '\n';
        return runner::kSolverFailure;
    }
    std::ofstream file;
    if (!o.out.empty() && o.out != "-") {
        file.open(o.out);
        if (!file) {
            std::cerr << "mlsgd: cannot open '" << o.out << "'\n";
            return runner::kIoError;
        }
    }
    std::ostream& out = file.is_open() ? file : std::cout;
    out << "x1,x2,y\n";
    const double h = y.level().h();
    for (std::size_t j = 0; j < y.side(); ++j)
        for (std::size_t i = 0; i < y.side(); ++i)
            out << runner::format_real(static_cast<double>(i) * h) << ',' << runner::format_real(static_cast<double>(j) * h)
                << ',' << runner::format_real(y(i, j)) << '\n';
    out.flush();
    return out ? runner::kOk : runner::kIoError;
}

int cmd_rates(const std::string& log_path, double burn_in_fraction) {
    std::ifstream in(log_path);
    if (!in) {
        std::cerr << "mlsgd: cannot open '" << log_path << "'\n";
        return runner::kIoError;
    }
    std::vector<IterationRecord> records;
    try {
        records = runner::read_log(in);
    } catch (const std::exception& e) {
        std::cerr << "mlsgd: " << e.what() << '\n';
        return runner::kIoError;
    }
    const double total = records.empty() ? 0.0 : records.back().cumulative_cost;
    const runner::RunSummary s = runner::summarize(records, burn_in_fraction * total);
    std::cout << "records=" << records.size() << '\n'
              << "total_cost=" << runner::format_real(s.total_cost) << '\n'
              << "final_grad_norm=" << runner::format_real(s.final_grad_norm) << '\n'
              << "alpha_hat=" << runner::format_real(s.alpha_hat) << '\n'
              << "beta_hat=" << runner::format_real(s.beta_hat) << '\n'
              << "gamma_hat=" << runner::format_real(s.gamma_hat) << '\n'
              << "delta_hat=" << runner::format_real(s.delta_hat) << '\n';
    return runner::kOk;
}

int cmd_preset(const std::string& name, const Overrides& o) {
    std::vector<runner::PresetRun> runs;
    try {
        runs = runner::preset(name);
    } catch (const runner::ConfigError& e) {
        std::cerr << "mlsgd: " << e.what() << '\n';
        return runner::kConfigError;
    }
    const std::filesystem::path dir = o.out.empty() ? std::filesystem::path(".") : std::filesystem::path(o.out);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        std::cerr << "mlsgd: cannot create '" << dir.string() << "': " << ec.message() << '\n';
        return runner::kIoError;
    }
    std::optional<double> matched_budget;
    for (auto& [tag, config] : runs) {
        apply(config, o);
        // the method comparison spends the same budget on every optimizer
        if (name == "fig5-desk" && matched_budget && !config.T0) config.T0 = *matched_budget;
        config.output = (dir / (name + "-" + tag + ".csv")).string();
        std::cerr << "mlsgd: " << name << " " << tag << " -> " << config.output << '\n';
        const runner::RunResult r = runner::run(config);
        if (r.exit_code != runner::kOk) return report(r);
        if (!matched_budget) matched_budget = r.summary.total_cost;
    }
    return runner::kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multilevel stochastic gradient descent for an elliptic control problem"};
    app.require_subcommand(1);

    Overrides o;
    std::uint64_t seed = 0;
    unsigned workers = 0;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Root seed");
        sub->add_option("--workers", workers, "Worker threads (0: all cores)");
        sub->add_option("--out", o.out, "Output file or directory");
    };

    std::string config_path;
    auto* run = app.add_subcommand("run", "Run one optimizer from a config file");
    run->add_option("--config", config_path, "key = value config file");
    add_common(run);

    int level = 0;
    auto* grf = app.add_subcommand("sample-grf", "Write one log-coefficient sample as x1,x2,y");
    grf->add_option("--config", config_path, "key = value config file");
    grf->add_option("--level", level, "Grid level");
    add_common(grf);

    std::string log_path;
    double burn_in = 0.05;
    auto* rates = app.add_subcommand("rates", "Re-fit rate exponents from a run log");
    rates->add_option("log", log_path, "CSV log written by run")->required();
    rates->add_option("--burn-in", burn_in, "Fraction of the total cost skipped before the delta fit")
        ->check(CLI::Range(0.0, 1.0));

    std::string preset_name;
    auto* preset = app.add_subcommand("preset", "Run a named batch of configurations");
    preset->add_option("name", preset_name, "fig5-desk, fig6-desk or smoke")->required();
    add_common(preset);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : runner::kConfigError;
    }
    for (auto* sub : {run, grf, preset}) {
        if (!sub->parsed()) continue;
        if (sub->count("--seed")) o.seed = seed;
        if (sub->count("--workers")) o.workers = workers;
    }

    if (run->parsed()) return cmd_run(config_path, o);
    if (grf->parsed()) return cmd_sample_grf(config_path, level, o);
    if (rates->parsed()) return cmd_rates(log_path, burn_in);
    return cmd_preset(preset_name, o);
}
