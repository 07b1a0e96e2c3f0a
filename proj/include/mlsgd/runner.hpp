#pragma once

// Run configuration, CSV log format and the orchestration of one optimizer run.

#include "mlsgd/descent.hpp"
#include "mlsgd/mlmc.hpp"
#include "mlsgd/rates.hpp"
#include "mlsgd/record.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mlsgd::runner {

enum class Algorithm { bsgd, mlsgd, bmlsgd };

struct RunConfig {
    Algorithm algorithm = Algorithm::bsgd;
    int e0 = 4;
    int L = 3;                                   // bsgd level
    std::size_t M = 64;                          // bsgd batch
    std::vector<std::size_t> batch{64, 16, 4};   // mlsgd batch and bmlsgd initial batch
    int K = 100;
    std::optional<descent::StepRule::Kind> step_kind;  // constant for bsgd/mlsgd, adaptive for bmlsgd
    std::optional<double> t0;                           // 100 for bsgd/mlsgd, 200 for bmlsgd
    double p = 0.5;
    double lambda = 1e-8;
    double eta = 0.9;
    double theta = 0.5;
    double z_low = -1000.0;
    double z_up = 1000.0;
    randfield::MaternParams matern{};
    std::optional<double> T0;  // bmlsgd: 1e9 work units or 3600 s; others: no cap
    double Mem0 = 1024.0 * 1024.0 * 1024.0;
    double time_floor = 0.05;
    int max_level = 7;
    mlmc::CostMode cost_mode = mlmc::CostMode::work_units;
    std::uint64_t root_seed = 1;
    unsigned workers = 0;  // 0: hardware concurrency
    std::string output;    // empty: stdout
    bool deterministic_y = false;
    double solver_tol = 1e-8;
    int solver_max_iterations = 500;
    std::size_t padding_factor = 2;

    [[nodiscard]] descent::StepRule step_rule() const {
        descent::StepRule r;
        r.kind = step_kind.value_or(algorithm == Algorithm::bmlsgd ? descent::StepRule::Kind::adaptive
                                                                   : descent::StepRule::Kind::constant);
        r.t0 = t0.value_or(algorithm == Algorithm::bmlsgd ? 200.0 : 100.0);
        r.p = p;
        return r;
    }
    [[nodiscard]] double budget_T0() const {
        if (T0) return *T0;
        if (algorithm != Algorithm::bmlsgd) return std::numeric_limits<double>::infinity();
        return cost_mode == mlmc::CostMode::work_units ? 1e9 : 3600.0;
    }
    [[nodiscard]] mlmc::ProblemSetup problem() const {
        mlmc::ProblemSetup ps;
        ps.e0 = e0;
        ps.matern = matern;
        ps.lambda = lambda;
        ps.solver.tolerance = solver_tol;
        ps.solver.max_iterations = solver_max_iterations;
        ps.deterministic_y = deterministic_y;
        ps.cost_mode = cost_mode;
        ps.workers = workers;
        ps.padding_factor = padding_factor;
        return ps;
    }
    [[nodiscard]] descent::Hyperparams hyperparams() const { return {eta, theta, {z_low, z_up}}; }
};

inline constexpr int kLevelSlots = 8;
inline constexpr const char* kLogVersion = "# mlsgd-log v1";

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline const char* to_string(Algorithm a) {
    switch (a) {
        case Algorithm::bsgd: return "bsgd";
        case Algorithm::mlsgd: return "mlsgd";
        case Algorithm::bmlsgd: return "bmlsgd";
    }
    return "?";
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(std::string_view v, const std::string& where) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(where + ": expected a number, got '" + std::string(v) + "'");
    return out;
}

inline double parse_real(std::string_view v, const std::string& where) {
    const double x = parse_number<double>(v, where);
    if (!std::isfinite(x)) throw ConfigError(where + ": value must be finite");
    return x;
}

inline bool parse_bool(std::string_view v, const std::string& where) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(where + ": expected true or false, got '" + std::string(v) + "'");
}

inline std::vector<std::size_t> parse_list(std::string_view v, const std::string& where) {
    std::vector<std::size_t> out;
    while (!v.empty()) {
        const auto comma = v.find(',');
        out.push_back(parse_number<std::size_t>(trim(v.substr(0, comma)), where));
        if (comma == std::string_view::npos) break;
        v.remove_prefix(comma + 1);
    }
    if (out.empty()) throw ConfigError(where + ": empty list");
    return out;
}

inline void require(bool ok, const std::string& where, const std::string& what) {
    if (!ok) throw ConfigError(where + ": " + what);
}

}  // namespace detail

/// Checks the cross-field invariants; `where` prefixes the messages.
inline void validate(const RunConfig& c, const std::string& where = "config") {
    using detail::require;
    require(c.e0 >= 1, where, "e0 must be >= 1");
    require(c.L >= 0, where, "L must be >= 0");
    require(c.M >= 1, where, "M must be >= 1");
    require(!c.batch.empty() && c.batch.size() <= kLevelSlots, where,
            "batch must list between 1 and " + std::to_string(kLevelSlots) + " levels");
    for (std::size_t m : c.batch) require(m >= 1, where, "batch entries must be >= 1");
    require(c.K >= 0, where, "K must be >= 0");
    require(!c.t0 || *c.t0 >= 0.0, where, "t0 must be >= 0");
    require(c.p >= 0.0, where, "p must be >= 0");
    require(c.lambda >= 0.0, where, "lambda must be >= 0");
    require(c.eta > 0.0 && c.eta <= 1.0, where, "eta must lie in (0, 1]");
    require(c.theta > 0.0 && c.theta < 1.0, where, "theta must lie in (0, 1)");
    require(c.z_low <= c.z_up, where, "z_low must not exceed z_up");
    require(c.matern.sigma2 > 0.0 && c.matern.nu > 0.0 && c.matern.lambda_kappa > 0.0, where,
            "sigma2, nu and lambda_kappa must be > 0");
    require(!c.T0 || *c.T0 > 0.0, where, "budget_T0 must be > 0");
    require(c.Mem0 > 0.0, where, "budget_Mem0 must be > 0");
    require(c.time_floor >= 0.0 && c.time_floor < 1.0, where, "time_floor must lie in [0, 1)");
    require(c.max_level >= 0 && c.max_level < kLevelSlots, where,
            "max_level must lie in [0, " + std::to_string(kLevelSlots - 1) + "]");
    require(c.solver_tol > 0.0 && c.solver_tol < 1.0, where, "solver_tol must lie in (0, 1)");
    require(c.solver_max_iterations >= 1, where, "solver_max_iterations must be >= 1");
    require(c.padding_factor >= 2, where, "padding_factor must be >= 2");
    require(c.e0 + std::max(c.L, c.max_level) <= mesh::kMaxExponent, where, "e0 plus the finest level is too large");
    if (c.algorithm == Algorithm::bsgd) require(c.L < kLevelSlots, where, "L must be < 8");
    if (c.algorithm == Algorithm::bmlsgd) {
        require(c.step_rule().t0 > 0.0, where, "bmlsgd needs t0 > 0");
        require(static_cast<int>(c.batch.size()) - 1 <= c.max_level, where,
                "the initial batch is deeper than max_level");
    }
}

/// key = value lines; '#' starts a comment. Unknown keys, malformed values
/// and violated invariants are reported with their line number.
inline RunConfig parse_config(std::string_view text) {
    RunConfig c;
    int line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
        const std::string key(detail::trim(line.substr(0, eq)));
        const std::string_view v = detail::trim(line.substr(eq + 1));
        const std::string at = where + " (" + key + ")";
        if (v.empty()) throw ConfigError(at + ": missing value");

        if (key == "algorithm") {
            if (v == "bsgd") c.algorithm = Algorithm::bsgd;
            else if (v == "mlsgd") c.algorithm = Algorithm::mlsgd;
            else if (v == "bmlsgd") c.algorithm = Algorithm::bmlsgd;
            else throw ConfigError(at + ": expected bsgd, mlsgd or bmlsgd");
        } else if (key == "e0") c.e0 = detail::parse_number<int>(v, at);
        else if (key == "L") c.L = detail::parse_number<int>(v, at);
        else if (key == "M") c.M = detail::parse_number<std::size_t>(v, at);
        else if (key == "batch") c.batch = detail::parse_list(v, at);
        else if (key == "K") c.K = detail::parse_number<int>(v, at);
        else if (key == "step") {
            if (v == "constant") c.step_kind = descent::StepRule::Kind::constant;
            else if (v == "decay") c.step_kind = descent::StepRule::Kind::decay;
            else if (v == "adaptive") c.step_kind = descent::StepRule::Kind::adaptive;
            else throw ConfigError(at + ": expected constant, decay or adaptive");
        } else if (key == "t0") c.t0 = detail::parse_real(v, at);
        else if (key == "p") c.p = detail::parse_real(v, at);
        else if (key == "lambda") c.lambda = detail::parse_real(v, at);
        else if (key == "eta") c.eta = detail::parse_real(v, at);
        else if (key == "theta") c.theta = detail::parse_real(v, at);
        else if (key == "z_low") c.z_low = detail::parse_real(v, at);
        else if (key == "z_up") c.z_up = detail::parse_real(v, at);
        else if (key == "sigma2") c.matern.sigma2 = detail::parse_real(v, at);
        else if (key == "nu") c.matern.nu = detail::parse_real(v, at);
        else if (key == "lambda_kappa") c.matern.lambda_kappa = detail::parse_real(v, at);
        else if (key == "budget_T0") c.T0 = detail::parse_real(v, at);
        else if (key == "budget_Mem0") c.Mem0 = detail::parse_real(v, at);
        else if (key == "time_floor") c.time_floor = detail::parse_real(v, at);
        else if (key == "max_level") c.max_level = detail::parse_number<int>(v, at);
        else if (key == "cost_mode") {
            if (v == "work_units") c.cost_mode = mlmc::CostMode::work_units;
            else if (v == "seconds") c.cost_mode = mlmc::CostMode::seconds;
            else throw ConfigError(at + ": expected work_units or seconds");
        } else if (key == "root_seed") c.root_seed = detail::parse_number<std::uint64_t>(v, at);
        else if (key == "workers") c.workers = detail::parse_number<unsigned>(v, at);
        else if (key == "output") c.output = std::string(v);
        else if (key == "deterministic_y") c.deterministic_y = detail::parse_bool(v, at);
        else if (key == "solver_tol") c.solver_tol = detail::parse_real(v, at);
        else if (key == "solver_max_iterations") c.solver_max_iterations = detail::parse_number<int>(v, at);
        else if (key == "padding_factor") c.padding_factor = detail::parse_number<std::size_t>(v, at);
        else throw ConfigError(where + ": unknown key '" + key + "'");

        // single-field invariants are reported against the line that set them
        validate(c, at);
    }
    validate(c);
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

// ---------------------------------------------------------------- CSV log

inline std::string format_real(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string csv_header() {
    std::string h =
        "k,L,J_hat,grad_norm,t_k,eps_k,err_sam,err_num,alpha_hat,step_fallback,cumulative_cost,remaining_T,"
        "remaining_Mem";
    for (int l = 0; l < kLevelSlots; ++l) {
        const std::string s = std::to_string(l);
        h += ",M_" + s + ",normp_" + s + ",s2_" + s + ",cost_" + s;
    }
    h += ",stop_reason";
    return h;
}

inline std::string csv_row(const IterationRecord& r) {
    std::string row = std::to_string(r.k) + "," + std::to_string(r.L) + "," + format_real(r.J_hat) + "," +
                      format_real(r.grad_norm) + "," + format_real(r.t_k) + "," + format_real(r.eps_k) + "," +
                      format_real(r.err_sam) + "," + format_real(r.err_num) + "," + format_real(r.alpha_hat) + "," +
                      (r.step_fallback ? "1" : "0") + "," + format_real(r.cumulative_cost) + "," +
                      format_real(r.remaining_T) + "," + format_real(r.remaining_Mem);
    std::vector<const LevelSummary*> slot(kLevelSlots, nullptr);
    for (const auto& s : r.levels) {
        if (s.ell < 0 || s.ell >= kLevelSlots) throw std::runtime_error("csv_row: level outside the log slots");
        slot[s.ell] = &s;
    }
    for (const LevelSummary* s : slot) {
        if (s)
            row += "," + std::to_string(s->M) + "," + format_real(s->norm_mean_p) + "," + format_real(s->s2_p) + "," +
                   format_real(s->mean_cost);
        else
            row += ",,,,";
    }
    row += "," + r.stop_reason;
    return row;
}

/// Owns the output stream; rows are flushed as they arrive so a truncated
/// run leaves a parseable log.
class CsvLog {
public:
    explicit CsvLog(std::ostream& out) : out_(out) {
        out_ << kLogVersion << '\n' << csv_header() << '\n';
        out_.flush();
    }
    void row(const IterationRecord& r) {
        out_ << csv_row(r) << '\n';
        out_.flush();
    }
    void footer(const std::string& key, const std::string& value) {
        out_ << "# " << key << '=' << value << '\n';
        out_.flush();
    }

private:
    std::ostream& out_;
};

/// Level-rate fits from the per-level columns of one row plus the
/// cost-rate fit of the whole trajectory.
struct RunSummary {
    double total_cost = 0.0;
    double final_grad_norm = kNaN;
    double alpha_hat = kNaN;  // ||E p_ell|| ~ h^alpha over ell >= 1
    double beta_hat = kNaN;   // s2 / (M - 1) ~ h^beta over ell >= 1
    double gamma_hat = kNaN;  // cost per sample ~ h^-gamma
    double delta_hat = kNaN;  // ||g|| ~ cost^-delta past the burn-in
    std::string stop_reason;
};

inline RunSummary summarize(const std::vector<IterationRecord>& records, double burn_in_cost) {
    RunSummary s;
    if (records.empty()) return s;
    const IterationRecord& last = records.back();
    s.total_cost = last.cumulative_cost;
    s.final_grad_norm = last.grad_norm;
    s.stop_reason = last.stop_reason;
    std::vector<double> ha, na, hb, vb, hc, cc;
    for (const auto& l : last.levels) {
        const double h = std::ldexp(1.0, -l.ell);
        if (l.ell >= 1 && l.norm_mean_p > 0.0) {
            ha.push_back(h);
            na.push_back(l.norm_mean_p);
        }
        if (l.ell >= 1 && l.M >= 2 && l.s2_p > 0.0) {
            hb.push_back(h);
            vb.push_back(l.s2_p / static_cast<double>(l.M - 1));
        }
        if (l.mean_cost > 0.0) {
            hc.push_back(h);
            cc.push_back(l.mean_cost);
        }
    }
    if (ha.size() >= 2) s.alpha_hat = rates::fit_loglinear(ha, na, 1).exponent;
    if (hb.size() >= 2) s.beta_hat = rates::fit_loglinear(hb, vb, 1).exponent;
    if (hc.size() >= 2) s.gamma_hat = rates::fit_loglinear(hc, cc, -1).exponent;
    try {
        s.delta_hat = rates::estimate_delta(records, burn_in_cost).exponent;
    } catch (const std::invalid_argument&) {
    }
    return s;
}

inline void write_footer(CsvLog& log, const RunSummary& s) {
    log.footer("total_cost", format_real(s.total_cost));
    log.footer("final_grad_norm", format_real(s.final_grad_norm));
    log.footer("alpha_hat", format_real(s.alpha_hat));
    log.footer("beta_hat", format_real(s.beta_hat));
    log.footer("gamma_hat", format_real(s.gamma_hat));
    log.footer("delta_hat", format_real(s.delta_hat));
    log.footer("stop_reason", s.stop_reason);
}

/// Parses the data rows of a log written by CsvLog (footer lines skipped).
inline std::vector<IterationRecord> read_log(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kLogVersion)
        throw std::runtime_error("read_log: missing or unsupported version line");
    if (!std::getline(in, line) || line != csv_header()) throw std::runtime_error("read_log: header mismatch");
    std::vector<IterationRecord> out;
    int row_no = 2;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            cols.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        const std::size_t expected = 13 + 4 * kLevelSlots + 1;
        if (cols.size() != expected)
            throw std::runtime_error("read_log: row " + std::to_string(row_no) + " has " +
                                     std::to_string(cols.size()) + " columns, expected " + std::to_string(expected));
        auto real = [&](const std::string& v) { return v.empty() ? kNaN : std::stod(v); };
        IterationRecord r;
        r.k = std::stoi(cols[0]);
        r.L = std::stoi(cols[1]);
        r.J_hat = real(cols[2]);
        r.grad_norm = real(cols[3]);
        r.t_k = real(cols[4]);
        r.eps_k = real(cols[5]);
        r.err_sam = real(cols[6]);
        r.err_num = real(cols[7]);
        r.alpha_hat = real(cols[8]);
        r.step_fallback = cols[9] == "1";
        r.cumulative_cost = real(cols[10]);
        r.remaining_T = real(cols[11]);
        r.remaining_Mem = real(cols[12]);
        for (int l = 0; l < kLevelSlots; ++l) {
            const std::size_t b = 13 + 4 * static_cast<std::size_t>(l);
            if (cols[b].empty()) continue;
            r.levels.push_back({l, std::stoull(cols[b]), real(cols[b + 1]), real(cols[b + 2]), real(cols[b + 3])});
        }
        r.stop_reason = cols.back();
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------- run

enum ExitCode : int { kOk = 0, kConfigError = 2, kSolverFailure = 3, kIoError = 4 };

struct RunResult {
    int exit_code = kOk;
    descent::Trajectory trajectory;
    RunSummary summary;
    std::string error;
};

/// Executes the configured optimizer and writes the log to `out`.
inline RunResult run(const RunConfig& config, std::ostream& out) {
    RunResult result;
    try {
        validate(config);
    } catch (const ConfigError& e) {
        result.exit_code = kConfigError;
        result.error = e.what();
        return result;
    }
    CsvLog log(out);
    const descent::RecordSink sink = [&](const IterationRecord& r) { log.row(r); };
    const double T0 = config.budget_T0();
    try {
        mlmc::Estimator est(config.problem());
        const descent::Hyperparams hp = config.hyperparams();
        switch (config.algorithm) {
            case Algorithm::bsgd: {
                descent::FixedRunOptions opt{config.K, T0, config.root_seed};
                result.trajectory = descent::bsgd(est, mesh::NodalField(est.grid(config.L)), config.step_rule(),
                                                  config.M, opt, hp, sink);
                break;
            }
            case Algorithm::mlsgd: {
                descent::FixedRunOptions opt{config.K, T0, config.root_seed};
                const mlmc::MultilevelBatch b{config.batch};
                result.trajectory = descent::mlsgd(est, mesh::NodalField(est.grid(b.finest())), config.step_rule(),
                                                   b, opt, hp, sink);
                break;
            }
            case Algorithm::bmlsgd: {
                descent::BudgetedOptions opt;
                opt.T0 = T0;
                opt.Mem0 = config.Mem0;
                opt.step = config.step_rule();
                opt.time_floor = config.time_floor;
                opt.max_level = config.max_level;
                opt.root_seed = config.root_seed;
                const mlmc::MultilevelBatch b{config.batch};
                result.trajectory =
                    descent::bmlsgd(est, mesh::NodalField(est.grid(b.finest())), b, opt, hp, sink);
                break;
            }
        }
    } catch (const descent::DescentAborted& e) {
        result.exit_code = kSolverFailure;
        result.error = e.what();
        result.trajectory = e.partial;
        result.trajectory.stop_reason = "solver-failure";
    } catch (const std::exception& e) {
        result.exit_code = kSolverFailure;
        result.error = e.what();
        result.trajectory.stop_reason = "solver-failure";
    }
    const double total = result.trajectory.records.empty() ? 0.0 : result.trajectory.records.back().cumulative_cost;
    const double burn_in = 0.05 * (std::isfinite(T0) ? T0 : total);
    result.summary = summarize(result.trajectory.records, burn_in);
    result.summary.stop_reason = result.trajectory.stop_reason;
    write_footer(log, result.summary);
    if (!out) {
        result.exit_code = kIoError;
        result.error = "write to the log failed";
    }
    return result;
}

inline RunResult run(const RunConfig& config) {
    if (config.output.empty() || config.output == "-") return run(config, std::cout);
    std::ofstream file(config.output);
    if (!file) {
        RunResult r;
        r.exit_code = kIoError;
        r.error = "cannot open output file '" + config.output + "'";
        return r;
    }
    return run(config, file);
}

// ---------------------------------------------------------------- presets

struct PresetRun {
    std::string tag;
    RunConfig config;
};

/// Desk-scale versions of the method and step-size comparisons. Budgets of
/// later runs are matched to the first run's total cost by the caller.
inline std::vector<PresetRun> preset(const std::string& name) {
    if (name == "fig5-desk") {
        RunConfig bsgd;
        bsgd.algorithm = Algorithm::bsgd;
        bsgd.L = 2;
        bsgd.M = 64;
        bsgd.K = 150;
        bsgd.step_kind = descent::StepRule::Kind::constant;
        bsgd.t0 = 250.0 / std::sqrt(150.0);
        RunConfig bml;
        bml.algorithm = Algorithm::bmlsgd;
        bml.step_kind = descent::StepRule::Kind::adaptive;
        bml.t0 = 200.0;
        return {{"bsgd", bsgd}, {"bmlsgd", bml}};
    }
    if (name == "fig6-desk") {
        std::vector<PresetRun> runs;
        for (double t : {100.0, 150.0}) {
            RunConfig c;
            c.algorithm = Algorithm::bmlsgd;
            c.step_kind = descent::StepRule::Kind::constant;
            c.t0 = t;
            runs.push_back({"bmlsgd-t" + std::to_string(static_cast<int>(t)), c});
        }
        RunConfig a;
        a.algorithm = Algorithm::bmlsgd;
        a.step_kind = descent::StepRule::Kind::adaptive;
        a.t0 = 200.0;
        runs.push_back({"bmlsgd-adaptive", a});
        return runs;
    }
    if (name == "smoke") {
        RunConfig c;
        c.algorithm = Algorithm::bmlsgd;
        c.T0 = 2e7;
        return {{"bmlsgd", c}};
    }
    throw ConfigError("unknown preset '" + name + "' (known: fig5-desk, fig6-desk, smoke)");
}

}  // namespace mlsgd::runner
