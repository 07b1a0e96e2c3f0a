#pragma once

// Batched (BSGD), multilevel (MLSGD) and budgeted multilevel (BMLSGD)
// stochastic gradient descent on the control z.

#include "mlsgd/mesh.hpp"
#include "mlsgd/mlmc.hpp"
#include "mlsgd/rates.hpp"
#include "mlsgd/record.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mlsgd::descent {

struct StepRule {
    enum class Kind { constant, decay, adaptive };
    Kind kind = Kind::constant;
    double t0 = 100.0;
    double p = 0.5;  // decay exponent

    void validate() const {
        if (!(t0 >= 0.0) || !std::isfinite(t0)) throw std::invalid_argument("StepRule: t0 must be finite and >= 0");
        if (!(p >= 0.0)) throw std::invalid_argument("StepRule: p must be >= 0");
    }
    /// Scheduled step for iteration k; the adaptive kind starts from t0.
    [[nodiscard]] double scheduled(int k) const {
        if (kind == Kind::decay) return t0 * std::pow(static_cast<double>(k + 1), -p);
        return t0;
    }
};

struct Hyperparams {
    double eta = 0.9;
    double theta = 0.5;
    mesh::AdmissibleBox box{};

    void validate() const {
        if (!(eta > 0.0 && eta <= 1.0)) throw std::invalid_argument("Hyperparams: eta must lie in (0, 1]");
        if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("Hyperparams: theta must lie in (0, 1)");
        box.validate();
    }
};

/// g = lambda z - q_hat, z_next = clamp(z - t g).
inline std::pair<mesh::NodalField, mesh::NodalField> gradient_step(const mesh::NodalField& z,
                                                                  const mesh::NodalField& q_hat, double t,
                                                                  double lambda, const mesh::AdmissibleBox& box) {
    z.require_same_level(q_hat, "gradient_step");
    if (!(t >= 0.0)) throw std::invalid_argument("gradient_step: step size must be >= 0");
    mesh::NodalField g = z;
    g *= lambda;
    g -= q_hat;
    mesh::NodalField next = z;
    next.axpy(-t, g);
    return {mesh::project_admissible(std::move(next), box), std::move(g)};
}

struct StepSize {
    double t = 0.0;
    double c_lip = kNaN;
    bool fallback = false;
};

/// t = (||g||^2 - err_sam) / (c_lip ||g||^2) with the Lipschitz estimate
/// c_lip = ||g - g_prev|| / (t_prev ||g_prev||). Falls back to t_prev when the
/// numerator or c_lip is not positive.
inline StepSize adaptive_step_size(const mesh::NodalField& g, const mesh::NodalField& g_prev, double t_prev,
                                   double err_sam) {
    if (!(t_prev > 0.0)) throw std::invalid_argument("adaptive_step_size: t_prev must be > 0");
    const double gp = mesh::norm_l2(g_prev);
    if (!(gp > 0.0)) throw std::invalid_argument("adaptive_step_size: previous gradient has zero norm");
    StepSize out;
    out.c_lip = mesh::norm_l2(g - g_prev) / (t_prev * gp);
    const double gn = mesh::norm_l2(g);
    const double num = gn * gn - (std::isfinite(err_sam) ? err_sam : 0.0);
    if (!(num > 0.0) || !(out.c_lip > 0.0) || !std::isfinite(out.c_lip)) {
        out.t = t_prev;
        out.fallback = true;
        return out;
    }
    out.t = num / (out.c_lip * gn * gn);
    return out;
}

/// Used when the stats do not support a fit of the variance decay or cost growth.
struct RatePriors {
    double beta = 2.0;
    double gamma = 2.0;
};

struct LevelRates {
    double beta = kNaN;   // var(p_ell) ~ h^beta, fitted over ell >= 1
    double gamma = kNaN;  // cost_ell ~ h^-gamma
};

inline LevelRates fit_level_rates(std::span<const mlmc::LevelStats> stats) {
    LevelRates out;
    std::vector<double> hv, var, hc, cost;
    for (const auto& s : stats) {
        const double h = std::ldexp(1.0, -s.ell);
        if (s.ell >= 1 && s.var_p() > 0.0) {
            hv.push_back(h);
            var.push_back(s.var_p());
        }
        if (s.mean_cost() > 0.0) {
            hc.push_back(h);
            cost.push_back(s.mean_cost());
        }
    }
    if (hv.size() >= 2) out.beta = rates::fit_loglinear(hv, var, 1).exponent;
    if (hc.size() >= 2) out.gamma = rates::fit_loglinear(hc, cost, -1).exponent;
    return out;
}

inline constexpr std::size_t kMinSamples = 3;

struct BatchPlan {
    mlmc::MultilevelBatch batch;
    std::vector<double> M_real;     // before ceiling and floor
    std::vector<double> variance;   // s^2 / (M - 1) per level, extrapolated on new levels
    std::vector<double> unit_cost;  // predicted cost per sample

    [[nodiscard]] double predicted_cost() const {
        double c = 0.0;
        for (std::size_t l = 0; l < unit_cost.size(); ++l) c += static_cast<double>(batch.M[l]) * unit_cost[l];
        return c;
    }
    /// sum_ell variance_ell / M_ell evaluated at M_real.
    [[nodiscard]] double predicted_sampling_error() const {
        double e = 0.0;
        for (std::size_t l = 0; l < variance.size(); ++l)
            if (variance[l] > 0.0) e += variance[l] / M_real[l];
        return e;
    }
};

/// M_ell = (theta eps^2)^-1 sqrt(V_ell / C_ell) sum_l sqrt(V_l C_l), floored at
/// kMinSamples. Levels beyond the stats are extrapolated with fitted rates
/// (or the priors when a fit is unavailable).
inline BatchPlan optimal_batch(std::span<const mlmc::LevelStats> stats_prev, double eps, double theta, int L,
                               const RatePriors& priors = {}) {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("optimal_batch: eps must be finite and > 0");
    if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("optimal_batch: theta must lie in (0, 1)");
    if (stats_prev.empty()) throw std::invalid_argument("optimal_batch: no statistics to allocate from");
    if (L < 0) throw std::invalid_argument("optimal_batch: L must be >= 0");
    BatchPlan plan;
    const std::size_t levels = static_cast<std::size_t>(L) + 1;
    for (std::size_t l = 0; l < levels && l < stats_prev.size(); ++l) {
        const auto& s = stats_prev[l];
        if (s.M < 2)
            throw std::invalid_argument("optimal_batch: level " + std::to_string(l) + " has fewer than two samples");
        if (!(s.mean_cost() > 0.0))
            throw std::invalid_argument("optimal_batch: level " + std::to_string(l) + " has no positive cost");
        plan.variance.push_back(s.var_p());
        plan.unit_cost.push_back(s.mean_cost());
    }
    if (levels > stats_prev.size()) {
        const LevelRates fit = fit_level_rates(stats_prev);
        const double beta = fit.beta > 0.0 ? fit.beta : priors.beta;
        const double gamma = fit.gamma > 0.0 ? fit.gamma : priors.gamma;
        while (plan.variance.size() < levels) {
            plan.variance.push_back(plan.variance.back() * std::exp2(-beta));
            plan.unit_cost.push_back(plan.unit_cost.back() * std::exp2(gamma));
        }
    }
    double sum = 0.0;
    for (std::size_t l = 0; l < levels; ++l) sum += std::sqrt(plan.variance[l] * plan.unit_cost[l]);
    const double scale = sum / (theta * eps * eps);
    plan.batch.M.resize(levels);
    plan.M_real.resize(levels);
    for (std::size_t l = 0; l < levels; ++l) {
        plan.M_real[l] = scale * std::sqrt(plan.variance[l] / plan.unit_cost[l]);
        const double m = std::ceil(plan.M_real[l]);
        plan.batch.M[l] = m >= 1e15 ? static_cast<std::size_t>(1e15)
                                    : std::max(kMinSamples, static_cast<std::size_t>(m));
    }
    return plan;
}

/// Number of nodal fields on the finest level held across an iteration
/// (control, gradients, estimates, per-worker state and adjoint solves with
/// their multigrid scratch), in doubles.
inline constexpr double kPersistentFields = 32.0;

inline double memory_footprint(mesh::GridLevel finest) {
    return kPersistentFields * static_cast<double>(finest.node_count()) * sizeof(double);
}

/// Remaining CPU-time and memory budgets. Time is consumed cumulatively;
/// memory is the budget minus the footprint of the current iteration.
class BudgetLedger {
public:
    BudgetLedger(double T0, double Mem0) : T0_(T0), Mem0_(Mem0), T_(T0), Mem_(Mem0) {
        if (!(T0 > 0.0) || !(Mem0 > 0.0)) throw std::invalid_argument("BudgetLedger: budgets must be > 0");
    }

    [[nodiscard]] double T0() const { return T0_; }
    [[nodiscard]] double Mem0() const { return Mem0_; }
    [[nodiscard]] double remaining_time() const { return T_; }
    [[nodiscard]] double remaining_memory() const { return Mem_; }
    [[nodiscard]] double consumed_time() const { return T0_ - T_; }
    [[nodiscard]] const std::vector<std::pair<double, double>>& history() const { return history_; }

    void charge(double cost_ct, double cost_mem) {
        history_.emplace_back(cost_ct, cost_mem);
        T_ -= cost_ct;
        Mem_ = Mem0_ - cost_mem;
    }

private:
    double T0_, Mem0_, T_, Mem_;
    std::vector<std::pair<double, double>> history_;
};

enum class Feasibility { ok, time, memory };

/// Strict guards against the remaining budgets: a batch costing exactly the
/// remaining time is feasible.
inline Feasibility feasibility(double predicted_time, double predicted_memory, const BudgetLedger& ledger) {
    if (predicted_time > ledger.remaining_time()) return Feasibility::time;
    if (predicted_memory > ledger.remaining_memory()) return Feasibility::memory;
    return Feasibility::ok;
}

inline bool not_feasible(const BatchPlan& plan, const BudgetLedger& ledger, int e0) {
    const mesh::GridLevel finest{plan.batch.finest(), e0};
    return feasibility(plan.predicted_cost(), memory_footprint(finest), ledger) != Feasibility::ok;
}

namespace stop {
inline constexpr const char* iterations = "iterations";
inline constexpr const char* budget = "budget";
inline constexpr const char* time_floor = "time-floor";
inline constexpr const char* infeasible_time = "infeasible-time";
inline constexpr const char* infeasible_memory = "infeasible-memory";
}  // namespace stop

struct Trajectory {
    mesh::NodalField z;
    std::vector<IterationRecord> records;
    std::string stop_reason;
    double total_cost = 0.0;
};

using RecordSink = std::function<void(const IterationRecord&)>;

/// Thrown when a sample evaluation fails mid-run; carries the rows so far.
class DescentAborted : public std::runtime_error {
public:
    DescentAborted(const std::string& what, Trajectory partial)
        : std::runtime_error(what), partial(std::move(partial)) {}
    Trajectory partial;
};

namespace detail {

inline std::vector<LevelSummary> summarize(std::span<const mlmc::LevelStats> stats) {
    std::vector<LevelSummary> out;
    for (const auto& s : stats) out.push_back({s.ell, s.M, s.norm_mean_p(), s.s2_p, s.mean_cost()});
    return out;
}

inline void emit(Trajectory& tr, IterationRecord rec, const RecordSink& sink) {
    tr.records.push_back(std::move(rec));
    if (sink) sink(tr.records.back());
}

// Step for iteration k of the fixed-batch methods.
inline StepSize next_step(const StepRule& rule, int k, const mesh::NodalField& g, const mesh::NodalField* g_prev,
                          double t_prev, double err_sam) {
    if (rule.kind != StepRule::Kind::adaptive || g_prev == nullptr || !(mesh::norm_l2(*g_prev) > 0.0))
        return {rule.scheduled(k), kNaN, false};
    return adaptive_step_size(g, *g_prev, t_prev, err_sam);
}

}  // namespace detail

struct FixedRunOptions {
    int K = 100;
    double budget = std::numeric_limits<double>::infinity();  // stop once cumulative cost reaches it
    std::uint64_t root_seed = 0;
};

/// Shared loop for BSGD and MLSGD: the estimate callback returns a
/// GradientEstimate for (z, k).
template <class Estimate>
Trajectory fixed_batch_descent(mlmc::Estimator& est, mesh::NodalField z, const StepRule& rule,
                               const FixedRunOptions& opt, const Hyperparams& hp, const RecordSink& sink,
                               Estimate&& estimate) {
    rule.validate();
    hp.box.validate();
    if (opt.K < 0) throw std::invalid_argument("descent: K must be >= 0");
    Trajectory tr;
    tr.stop_reason = stop::iterations;
    mesh::NodalField g_prev;
    double t_prev = rule.t0;
    const double lambda = est.setup().lambda;
    for (int k = 0; k < opt.K; ++k) {
        if (tr.total_cost >= opt.budget) {
            tr.stop_reason = stop::budget;
            break;
        }
        mlmc::GradientEstimate ge;
        try {
            ge = estimate(z, k);
        } catch (const std::exception& e) {
            tr.z = z;
            throw DescentAborted(e.what(), std::move(tr));
        }
        const StepSize step =
            detail::next_step(rule, k, ge.g_hat, k > 0 ? &g_prev : nullptr, t_prev, ge.err_sam);
        auto [z_next, g] = gradient_step(z, ge.q_hat, step.t, lambda, hp.box);
        tr.total_cost += ge.total_cost;

        IterationRecord rec;
        rec.k = k;
        rec.L = z.level().ell;
        rec.J_hat = ge.J_hat;
        rec.grad_norm = mesh::norm_l2(g);
        rec.t_k = step.t;
        rec.err_sam = ge.err_sam;
        rec.err_num = ge.err_num;
        rec.alpha_hat = ge.alpha_hat;
        rec.step_fallback = step.fallback;
        rec.cumulative_cost = tr.total_cost;
        rec.levels = detail::summarize(ge.per_level);
        detail::emit(tr, std::move(rec), sink);

        z = std::move(z_next);
        g_prev = std::move(g);
        t_prev = step.t;
    }
    tr.z = std::move(z);
    if (!tr.records.empty()) tr.records.back().stop_reason = tr.stop_reason;
    return tr;
}

/// Batched SGD at the level of z0 with M samples per iteration.
inline Trajectory bsgd(mlmc::Estimator& est, const mesh::NodalField& z0, const StepRule& rule, std::size_t M,
                       const FixedRunOptions& opt, const Hyperparams& hp, const RecordSink& sink = {}) {
    const double lambda = est.setup().lambda;
    return fixed_batch_descent(est, z0, rule, opt, hp, sink, [&](const mesh::NodalField& z, int k) {
        mlmc::LevelEstimate le = est.batch_estimation(z, M, k, opt.root_seed);
        mlmc::GradientEstimate ge;
        ge.q_hat = std::move(le.mean);
        ge.g_hat = z;
        ge.g_hat *= lambda;
        ge.g_hat -= ge.q_hat;
        ge.J_hat = le.J;
        ge.total_cost = le.stats.sum_cost;
        ge.per_level.push_back(std::move(le.stats));
        if (M >= 2) ge.err_sam = mlmc::sampling_error(ge.per_level);
        return ge;
    });
}

/// Multilevel SGD with a fixed batch; z0 lives on the finest batch level.
inline Trajectory mlsgd(mlmc::Estimator& est, const mesh::NodalField& z0, const StepRule& rule,
                        const mlmc::MultilevelBatch& batch, const FixedRunOptions& opt, const Hyperparams& hp,
                        const RecordSink& sink = {}) {
    batch.validate();
    return fixed_batch_descent(est, z0, rule, opt, hp, sink, [&](const mesh::NodalField& z, int k) {
        return est.multilevel_estimation(z, batch, k, opt.root_seed);
    });
}

struct BudgetedOptions {
    double T0 = 1e9;
    double Mem0 = 1024.0 * 1024.0 * 1024.0;
    StepRule step{StepRule::Kind::adaptive, 200.0, 0.5};
    double time_floor = 0.05;  // stop once T_k < time_floor * T0
    int max_iterations = 100000;
    int max_level = 12;
    RatePriors priors{};
    std::uint64_t root_seed = 0;
};

/// Budgeted multilevel SGD: one plain step from batch0, then optimal batches
/// with adaptive steps until the time floor or a budget guard stops the run.
inline Trajectory bmlsgd(mlmc::Estimator& est, const mesh::NodalField& z0, const mlmc::MultilevelBatch& batch0,
                         const BudgetedOptions& opt, const Hyperparams& hp, const RecordSink& sink = {}) {
    hp.validate();
    batch0.validate();
    opt.step.validate();
    if (!(opt.step.t0 > 0.0)) throw std::invalid_argument("bmlsgd: t0 must be > 0");
    if (!(opt.time_floor >= 0.0 && opt.time_floor < 1.0))
        throw std::invalid_argument("bmlsgd: time_floor must lie in [0, 1)");
    BudgetLedger ledger(opt.T0, opt.Mem0);
    const int e0 = est.setup().e0;
    const double lambda = est.setup().lambda;
    int L = batch0.finest();
    if (z0.level() != mesh::GridLevel{L, e0})
        throw std::invalid_argument("bmlsgd: z0 must live on the finest level of the initial batch");

    Trajectory tr;
    mesh::NodalField z = z0;
    auto run_estimate = [&](const mlmc::MultilevelBatch& batch, int k) {
        try {
            return est.multilevel_estimation(z, batch, k, opt.root_seed);
        } catch (const std::exception& e) {
            tr.z = z;
            tr.total_cost = ledger.consumed_time();
            throw DescentAborted(e.what(), std::move(tr));
        }
    };
    auto record = [&](int k, const mlmc::GradientEstimate& ge, const mesh::NodalField& g, const StepSize& step,
                      double eps) {
        IterationRecord rec;
        rec.k = k;
        rec.L = L;
        rec.J_hat = ge.J_hat;
        rec.grad_norm = mesh::norm_l2(g);
        rec.t_k = step.t;
        rec.eps_k = eps;
        rec.err_sam = ge.err_sam;
        rec.err_num = ge.err_num;
        rec.alpha_hat = ge.alpha_hat;
        rec.step_fallback = step.fallback;
        rec.cumulative_cost = ledger.consumed_time();
        rec.remaining_T = ledger.remaining_time();
        rec.remaining_Mem = ledger.remaining_memory();
        rec.levels = detail::summarize(ge.per_level);
        detail::emit(tr, std::move(rec), sink);
    };

    // Init
    mlmc::GradientEstimate ge = run_estimate(batch0, 0);
    const double t_init = opt.step.scheduled(0);
    auto [z1, g] = gradient_step(z, ge.q_hat, t_init, lambda, hp.box);
    ledger.charge(ge.total_cost, memory_footprint({L, e0}));
    record(0, ge, g, {t_init, kNaN, false}, kNaN);
    z = std::move(z1);

    double eps = hp.eta * mesh::norm_l2(g);
    double t_prev = t_init;
    mesh::NodalField g_prev = std::move(g);
    std::vector<mlmc::LevelStats> stats_prev = std::move(ge.per_level);
    double err_num_prev = ge.err_num;

    tr.stop_reason = stop::iterations;
    for (int k = 1; k <= opt.max_iterations; ++k) {
        if (ledger.remaining_time() < opt.time_floor * ledger.T0()) {
            tr.stop_reason = stop::time_floor;
            break;
        }
        int L_next = L;
        // NaN (no estimate) never appends; the +inf sentinel always does
        if (err_num_prev >= (1.0 - hp.theta) * eps * eps && L < opt.max_level) L_next = L + 1;

        const BatchPlan plan = optimal_batch(stats_prev, eps, hp.theta, L_next, opt.priors);
        const Feasibility f =
            feasibility(plan.predicted_cost(), memory_footprint({L_next, e0}), ledger);
        if (f != Feasibility::ok) {
            tr.stop_reason = f == Feasibility::time ? stop::infeasible_time : stop::infeasible_memory;
            break;
        }
        if (L_next != L) {
            z = mesh::prolongate(z);
            g_prev = mesh::prolongate(g_prev);
            L = L_next;
        }

        ge = run_estimate(plan.batch, k);
        const StepSize step = detail::next_step(opt.step, k, ge.g_hat, &g_prev, t_prev, ge.err_sam);
        auto [z_next, g_k] = gradient_step(z, ge.q_hat, step.t, lambda, hp.box);
        ledger.charge(ge.total_cost, memory_footprint({L, e0}));
        record(k, ge, g_k, step, eps);

        z = std::move(z_next);
        eps = hp.eta * mesh::norm_l2(g_k);
        t_prev = step.t;
        g_prev = std::move(g_k);
        stats_prev = std::move(ge.per_level);
        err_num_prev = ge.err_num;
    }
    tr.z = std::move(z);
    tr.total_cost = ledger.consumed_time();
    if (!tr.records.empty()) tr.records.back().stop_reason = tr.stop_reason;
    return tr;
}

}  // namespace mlsgd::descent
