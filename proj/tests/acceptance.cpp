// Acceptance suite: one PASS/FAIL line per criterion.
#include "mlsgd/descent.hpp"
#include "mlsgd/mlmc.hpp"
#include "mlsgd/pde.hpp"
#include "mlsgd/randfield.hpp"
#include "mlsgd/rates.hpp"
#include "mlsgd/runner.hpp"
#include "mlsgd/seeds.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <tuple>

using namespace mlsgd;
using mesh::GridLevel;
using mesh::NodalField;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

NodalField random_field(GridLevel g, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    NodalField f(g);
    for (double& v : f.values()) v = n(rng);
    return f;
}

NodalField bump(GridLevel g) {
    return mesh::sample_function(g, [](double a, double b) { return 40.0 * a * (1 - a) * b * (1 - b); });
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

// ---------------------------------------------------------------- 1

Outcome adjoint_gradient() {
    const GridLevel g{0, 4};
    const NodalField d = mesh::sample_function(g, mlmc::default_target);
    const pde::SolverOptions tight{1e-10, 500, 0.8};
    const auto plan = randfield::build_embedding(g, {});
    std::mt19937_64 rng(11);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const NodalField y = randfield::sample_field(plan, seeds::mix(101, 0, 0, trial));
        const NodalField z = random_field(g, rng, 10.0);
        const NodalField dir = random_field(g, rng, 1.0);
        const pde::EllipticSolver solver(y);
        auto J = [&](const NodalField& zz) {
            return pde::sample_objective(pde::solve_state(solver, zz, tight).first, d, zz, 1e-8);
        };
        const NodalField u = pde::solve_state(solver, z, tight).first;
        const NodalField q = pde::solve_adjoint(solver, u, d, tight).first;
        const double analytic = mesh::inner_l2(1e-8 * z - q, dir);
        const double eps = 1e-4;
        NodalField zp = z, zm = z;
        zp.axpy(eps, dir);
        zm.axpy(-eps, dir);
        worst = std::max(worst, rel((J(zp) - J(zm)) / (2 * eps), analytic));
    }
    return {worst <= 1e-5, fmt("max relative error %.2e over 5 triples (limit 1e-5)", worst)};
}

// ---------------------------------------------------------------- 2

Outcome manufactured_solution() {
    auto exact = [](double a, double b) { return std::sin(kPi * a) * std::sin(kPi * b); };
    auto rhs = [&](double a, double b) { return 2 * kPi * kPi * exact(a, b); };
    std::vector<double> hs, errs;
    for (int e = 3; e <= 6; ++e) {
        const GridLevel g{0, e};
        const NodalField u = pde::solve_state(NodalField(g), mesh::sample_function(g, rhs), {1e-12, 500, 0.8}).first;
        hs.push_back(g.h());
        errs.push_back(mesh::norm_l2(u - mesh::sample_function(g, exact)));
    }
    const double order = rates::fit_loglinear(hs, errs, 1).exponent;
    return {order >= 1.9 && order <= 2.1, fmt("L2 error order %.4f over h = 2^-3..2^-6 (target [1.9, 2.1])", order)};
}

// ---------------------------------------------------------------- 3

Outcome telescoping() {
    mlmc::ProblemSetup ps;
    ps.coupling = mlmc::Coupling::shared;
    mlmc::Estimator est(ps);
    const NodalField z = bump(est.grid(3));
    const std::size_t M = 8;
    const auto ml = est.multilevel_estimation(z, {{M, M, M, M}}, 0, 2024);
    const auto fine = est.batch_estimation(z, M, 0, 2024);
    const double dq = mesh::norm_l2(ml.q_hat - fine.mean) / mesh::norm_l2(fine.mean);
    const double dJ = rel(ml.J_hat, fine.J);
    return {dq <= 1e-12 && dJ <= 1e-12,
            fmt("relative gap q %.2e, objective %.2e with M = %zu on levels 0..3", dq, dJ, M)};
}

// ---------------------------------------------------------------- 4

Outcome mc_rate() {
    mlmc::Estimator est(mlmc::ProblemSetup{});
    const NodalField z = bump(est.grid(1));
    const NodalField ref = est.batch_estimation(z, 10000, 0, 900).mean;
    const int R = 40;
    std::vector<double> Ms, rmse;
    for (std::size_t M : {16u, 64u, 256u}) {
        double acc = 0.0;
        for (int r = 0; r < R; ++r) {
            const double e = mesh::norm_l2(est.batch_estimation(z, M, r, 1000 + M).mean - ref);
            acc += e * e;
        }
        Ms.push_back(static_cast<double>(M));
        rmse.push_back(std::sqrt(acc / R));
    }
    const double slope = rates::fit_loglinear(Ms, rmse, 1).exponent;
    return {std::abs(slope + 0.5) <= 0.1,
            fmt("RMSE slope %.3f over M = 16, 64, 256 (%d replicates, 1e4-sample reference; target -0.5 +- 0.1)",
                slope, R)};
}

// ---------------------------------------------------------------- 5

Outcome level_rates() {
    mlmc::Estimator est(mlmc::ProblemSetup{});
    const NodalField z = bump(est.grid(3));
    std::vector<double> h, nq, vp, nu, vv, hc, cost;
    for (int ell = 0; ell <= 3; ++ell) {
        const auto s = est.level_stats(z, 64, ell, 0, 77);
        hc.push_back(est.grid(ell).h());
        cost.push_back(s.mean_cost());
        if (ell == 0) continue;
        h.push_back(est.grid(ell).h());
        nq.push_back(s.norm_mean_p());
        vp.push_back(s.var_p());
        nu.push_back(s.norm_mean_v());
        vv.push_back(s.var_v());
    }
    const double aq = rates::fit_loglinear(h, nq, 1).exponent;
    const double bp = rates::fit_loglinear(h, vp, 1).exponent;
    const double au = rates::fit_loglinear(h, nu, 1).exponent;
    const double bv = rates::fit_loglinear(h, vv, 1).exponent;
    const double gc = rates::fit_loglinear(hc, cost, -1).exponent;
    const bool ok = aq > 0 && bp > 0 && au > 0 && bv > 0 && gc >= 1.8 && gc <= 2.3;
    return {ok, fmt("alpha_q %.3f, beta_p %.3f, alpha_u %.3f, beta_v %.3f, gamma %.3f (64 samples on levels 0..3)",
                    aq, bp, au, bv, gc)};
}

// ---------------------------------------------------------------- 6

Outcome allocation_identity() {
    auto identity_gap = [](const descent::BatchPlan& p, double target) {
        double e = 0.0;
        for (std::size_t l = 0; l < p.M_real.size(); ++l) e += p.variance[l] / p.M_real[l];
        return rel(e, target);
    };
    // hand fixture: V = {1, 1/4}, C = {1, 4}, eps = 0.1, theta = 0.5 -> M = {400, 100}
    std::vector<mlmc::LevelStats> hand;
    for (auto [ell, v, c] : {std::tuple{0, 1.0, 1.0}, std::tuple{1, 0.25, 4.0}}) {
        mlmc::LevelStats s(ell, {ell, 1});
        s.M = 2;
        s.s2_p = v;
        s.sum_cost = 2 * c;
        hand.push_back(s);
    }
    const auto hp = descent::optimal_batch(hand, 0.1, 0.5, 1);
    double worst = identity_gap(hp, 0.5 * 0.01);
    const bool hand_counts = std::abs(hp.M_real[0] - 400.0) < 1e-9 && std::abs(hp.M_real[1] - 100.0) < 1e-9;

    mlmc::Estimator est(mlmc::ProblemSetup{});
    const auto ge = est.multilevel_estimation(bump(est.grid(2)), {{32, 8, 4}}, 0, 5);
    const double eps = 0.9 * mesh::norm_l2(ge.g_hat);
    for (int L : {2, 3})
        for (double theta : {0.25, 0.5, 0.75})
            worst = std::max(worst, identity_gap(descent::optimal_batch(ge.per_level, eps, theta, L), theta * eps * eps));
    return {worst <= 1e-12 && hand_counts,
            fmt("max relative gap %.2e between predicted sampling error and theta eps^2; hand fixture M = {%.6g, %.6g}",
                worst, hp.M_real[0], hp.M_real[1])};
}

// ---------------------------------------------------------------- 7

Outcome budget_compliance() {
    std::string detail;
    bool ok = true;
    for (double T0 : {1e7, 1e8, 1e9}) {
        runner::RunConfig c;
        c.algorithm = runner::Algorithm::bmlsgd;
        c.T0 = T0;
        mlmc::Estimator est(c.problem());
        descent::BudgetedOptions opt;
        opt.T0 = T0;
        opt.step = c.step_rule();
        const mlmc::MultilevelBatch b0{c.batch};
        const auto tr = descent::bmlsgd(est, NodalField(est.grid(b0.finest())), b0, opt, c.hyperparams());
        // replay each launch decision from the previous record's statistics
        int infeasible = 0, mismatched = 0;
        for (std::size_t k = 1; k < tr.records.size(); ++k) {
            const auto& prev = tr.records[k - 1];
            const auto& rec = tr.records[k];
            std::vector<mlmc::LevelStats> stats;
            for (const auto& l : prev.levels) {
                mlmc::LevelStats s(l.ell, est.grid(l.ell));
                s.M = l.M;
                s.s2_p = l.s2_p;
                s.sum_cost = l.mean_cost * static_cast<double>(l.M);
                stats.push_back(s);
            }
            const auto plan = descent::optimal_batch(stats, rec.eps_k, c.theta, rec.L, opt.priors);
            if (plan.predicted_cost() > prev.remaining_T) ++infeasible;
            for (std::size_t l = 0; l < rec.levels.size(); ++l)
                if (plan.batch.M[l] != rec.levels[l].M) ++mismatched;
            if (rec.remaining_T < 0.0) ++infeasible;
        }
        const std::string& why = tr.stop_reason;
        const bool valid_reason = why == descent::stop::time_floor || why == descent::stop::infeasible_time ||
                                  why == descent::stop::infeasible_memory || why == descent::stop::iterations;
        const bool this_ok = tr.total_cost <= T0 && infeasible == 0 && valid_reason && mismatched == 0;
        ok = ok && this_ok;
        detail += fmt("T0 %.0e: charged %.4g (%.1f%%), %zu iterations, stop '%s', infeasible launches %d%s; ", T0,
                      tr.total_cost, 100 * tr.total_cost / T0, tr.records.size(), why.c_str(), infeasible,
                      mismatched ? ", replay mismatch" : "");
    }
    return {ok, detail};
}

// ---------------------------------------------------------------- 8, 9

// Desk analogue of the method comparison. BSGD runs at h = 2^-6 with
// M = 64; BMLSGD starts from the default batch. Both get the same work
// budget and the constant step from kSteps that ends with the smallest
// smoothed gradient norm.
constexpr double kComparisonBudget = 1e10;
constexpr double kSteps[] = {100.0, 200.0, 400.0};
constexpr int kWindow = 5;

struct Comparison {
    double bsgd_step = 0.0, bmlsgd_step = 0.0;
    descent::Trajectory bsgd, bmlsgd;
};

// Geometric mean of the last kWindow gradient norms ending at record k.
double trailing_norm(const descent::Trajectory& tr, std::size_t k) {
    const std::size_t lo = k + 1 >= kWindow ? k + 1 - kWindow : 0;
    double acc = 0.0;
    for (std::size_t i = lo; i <= k; ++i) acc += std::log(tr.records[i].grad_norm);
    return std::exp(acc / static_cast<double>(k + 1 - lo));
}

double final_norm(const descent::Trajectory& tr) { return trailing_norm(tr, tr.records.size() - 1); }

descent::Trajectory run_config(const runner::RunConfig& c) {
    std::ostringstream sink;
    auto r = runner::run(c, sink);
    if (r.exit_code != runner::kOk) throw std::runtime_error("comparison run failed: " + r.error);
    return std::move(r.trajectory);
}

// Runs `base` for every step in kSteps and keeps the best final norm.
std::pair<double, descent::Trajectory> tuned(runner::RunConfig base, const char* name, std::string& log) {
    base.step_kind = descent::StepRule::Kind::constant;
    base.T0 = kComparisonBudget;
    double best_t = 0.0;
    descent::Trajectory best;
    for (double t : kSteps) {
        base.t0 = t;
        auto tr = run_config(base);
        log += fmt("%s t=%g final %.3e; ", name, t, final_norm(tr));
        if (best.records.empty() || final_norm(tr) < final_norm(best)) {
            best_t = t;
            best = std::move(tr);
        }
    }
    return {best_t, std::move(best)};
}

Comparison method_comparison(std::string& log) {
    Comparison out;
    runner::RunConfig b;
    b.algorithm = runner::Algorithm::bsgd;
    b.L = 2;
    b.M = 64;
    b.K = 1000000;
    std::tie(out.bsgd_step, out.bsgd) = tuned(b, "bsgd", log);
    runner::RunConfig m;
    m.algorithm = runner::Algorithm::bmlsgd;
    std::tie(out.bmlsgd_step, out.bmlsgd) = tuned(m, "bmlsgd", log);
    return out;
}

Outcome method_speedup() {
    std::string log;
    const Comparison cmp = method_comparison(log);
    const double threshold = final_norm(cmp.bsgd);
    double reached = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < cmp.bmlsgd.records.size(); ++k)
        if (trailing_norm(cmp.bmlsgd, k) <= threshold) {
            reached = cmp.bmlsgd.records[k].cumulative_cost;
            break;
        }
    const double ratio = reached / cmp.bsgd.total_cost;
    return {ratio <= 1.0 / 3.0,
            log + fmt("threshold %.3e (bsgd t=%g, cost %.3g); bmlsgd (t=%g) reaches it at cost %.3g = %.3f of "
                      "the bsgd work (limit 1/3), final %.3e",
                      threshold, cmp.bsgd_step, cmp.bsgd.total_cost, cmp.bmlsgd_step, reached, ratio,
                      final_norm(cmp.bmlsgd))};
}

Outcome delta_regression() {
    std::string log;
    const Comparison cmp = method_comparison(log);
    const double burn_in = 0.05 * kComparisonBudget;
    const double d_ml = rates::estimate_delta(cmp.bmlsgd.records, burn_in).exponent;
    const double d_b = rates::estimate_delta(cmp.bsgd.records, burn_in).exponent;
    return {d_ml >= 0.35 && d_ml <= 0.65 && d_b < d_ml,
            log + fmt("bmlsgd (t=%g) delta %.3f (target [0.35, 0.65]); bsgd (t=%g) delta %.3f (must be smaller)",
                      cmp.bmlsgd_step, d_ml, cmp.bsgd_step, d_b)};
}

// ---------------------------------------------------------------- 10

Outcome determinism() {
    auto data_rows = [](const runner::RunConfig& c) {
        std::ostringstream out;
        const auto r = runner::run(c, out);
        if (r.exit_code != runner::kOk) throw std::runtime_error("determinism run failed: " + r.error);
        std::string rows;
        std::istringstream in(out.str());
        for (std::string line; std::getline(in, line);)
            if (!line.starts_with("#")) rows += line + '\n';
        return rows;
    };
    runner::RunConfig b;
    b.algorithm = runner::Algorithm::bsgd;
    b.L = 1;
    b.M = 16;
    b.K = 4;
    runner::RunConfig m;
    m.algorithm = runner::Algorithm::mlsgd;
    m.batch = {32, 8, 4};
    m.K = 4;
    runner::RunConfig bm;
    bm.algorithm = runner::Algorithm::bmlsgd;
    bm.T0 = 1e8;
    int differing = 0;
    std::size_t rows = 0;
    for (runner::RunConfig c : {b, m, bm}) {
        std::string first;
        for (unsigned w : {1u, 4u, 8u}) {
            c.workers = w;
            const std::string r = data_rows(c);
            if (w == 1) {
                first = r;
                rows += static_cast<std::size_t>(std::count(r.begin(), r.end(), '\n')) - 1;
            } else if (r != first) {
                ++differing;
            }
        }
    }
    return {differing == 0, fmt("bsgd, mlsgd and bmlsgd logs (%zu data rows) with workers 1, 4, 8: %d differing",
                                rows, differing)};
}

// ---------------------------------------------------------------- 11

Outcome grf_statistics() {
    const auto plan = randfield::build_embedding({1, 4}, {});
    const std::size_t s = plan.level.side();
    const std::size_t lags[] = {1, 2, 3, 5, 8};
    const int N = 500;
    // per-sample spatial average of y(x) y(x + r e_i) over both axes; iid across samples
    std::vector<std::vector<double>> per(5);
    for (int m = 0; m < N; ++m) {
        const NodalField y = randfield::sample_field(plan, seeds::mix(31, 0, 1, m));
        for (std::size_t li = 0; li < 5; ++li) {
            const std::size_t lag = lags[li];
            double acc = 0.0;
            for (std::size_t j = 0; j < s; ++j)
                for (std::size_t i = 0; i + lag < s; ++i) acc += y(i, j) * y(i + lag, j) + y(j, i) * y(j, i + lag);
            per[li].push_back(acc / static_cast<double>(2 * s * (s - lag)));
        }
    }
    bool ok = true;
    std::string detail;
    for (std::size_t li = 0; li < 5; ++li) {
        double mean = 0.0;
        for (double v : per[li]) mean += v;
        mean /= N;
        double ss = 0.0;
        for (double v : per[li]) ss += (v - mean) * (v - mean);
        const double se = std::sqrt(ss / (N - 1) / N);
        const double r = static_cast<double>(lags[li]) * plan.level.h();
        const double expected = randfield::matern_cov(r, {});
        const double z = std::abs(mean - expected) / se;
        ok = ok && z <= 4.0;
        detail += fmt("r=%.4f: %.4f vs %.4f (%.2f SE); ", r, mean, expected, z);
    }
    return {ok, detail};
}

const std::vector<std::pair<const char*, std::function<Outcome()>>> kCriteria = {
    {"adjoint gradient vs central differences", adjoint_gradient},
    {"manufactured solution order", manufactured_solution},
    {"telescoping exactness", telescoping},
    {"Monte Carlo rate", mc_rate},
    {"level rate verification", level_rates},
    {"allocation identity", allocation_identity},
    {"budget compliance", budget_compliance},
    {"method comparison", method_speedup},
    {"delta regression", delta_regression},
    {"determinism across workers", determinism},
    {"random field covariance", grf_statistics},
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> which;
    app.add_option("--criterion", which, "Criterion numbers to run (default: all)")->check(CLI::Range(1, 11));
    CLI11_PARSE(app, argc, argv);
    if (which.empty())
        for (int i = 1; i <= 11; ++i) which.push_back(i);

    int failed = 0;
    for (int id : which) {
        const auto& [name, check] = kCriteria[id - 1];
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("criterion %2d %s: %s (%.1f s) %s\n", id, o.pass ? "PASS" : "FAIL", name, secs, o.detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
