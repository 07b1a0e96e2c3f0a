#pragma once

// Monte Carlo and multilevel Monte Carlo estimation of the expected adjoint
// and the objective, plus the sampling and bias error estimators.

#include "mlsgd/mesh.hpp"
#include "mlsgd/parallel.hpp"
#include "mlsgd/pde.hpp"
#include "mlsgd/randfield.hpp"
#include "mlsgd/rates.hpp"
#include "mlsgd/record.hpp"
#include "mlsgd/seeds.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace mlsgd::mlmc {

enum class CostMode { work_units, seconds };

/// per_level: sample m on level ell uses seed mix(root, k, ell, m) and is
/// synthesized on ell. shared: every level uses mix(root, k, tag, m) and the
/// realization is synthesized on the finest level of the batch, so the same
/// index sees the same field on all levels (telescoping checks).
enum class Coupling { per_level, shared };

inline double default_target(double x1, double x2) {
    return std::sin(2.0 * std::numbers::pi * x1) * std::sin(2.0 * std::numbers::pi * x2);
}

struct ProblemSetup {
    int e0 = 4;
    randfield::MaternParams matern{};
    double lambda = 1e-8;
    std::function<double(double, double)> target = default_target;
    pde::SolverOptions solver{};
    bool deterministic_y = false;  // y = 0 for every sample
    CostMode cost_mode = CostMode::work_units;
    Coupling coupling = Coupling::per_level;
    unsigned workers = 1;
    std::size_t padding_factor = 2;

    void validate() const {
        if (e0 < 1) throw std::invalid_argument("ProblemSetup: e0 must be >= 1");
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw std::invalid_argument("ProblemSetup: lambda must be finite and >= 0");
        if (!target) throw std::invalid_argument("ProblemSetup: target is empty");
        if (!(solver.tolerance > 0.0 && solver.tolerance < 1.0))
            throw std::invalid_argument("ProblemSetup: solver tolerance must lie in (0, 1)");
        if (padding_factor < 2) throw std::invalid_argument("ProblemSetup: padding_factor must be >= 2");
        matern.validate();
    }
};

/// One realization evaluated on a level pair (ell, ell-1); on level 0 the
/// coarse contributions are zero.
struct CoupledSample {
    std::uint64_t seed = 0;
    mesh::NodalField p;  // q_ell - P q_{ell-1}
    mesh::NodalField v;  // u_ell - P u_{ell-1}
    double Y = 0.0;      // Q_ell - Q_{ell-1}
    double cost = 0.0;
    int iterations = 0;  // CG iterations summed over all solves
};

/// Streaming per-level statistics. The field mean and second-order sum use
/// Welford's update with the L2 inner product.
struct LevelStats {
    int ell = 0;
    std::size_t M = 0;
    mesh::NodalField mean_p;
    double s2_p = 0.0;
    mesh::NodalField mean_v;
    double s2_v = 0.0;
    double sum_Y = 0.0;
    double mean_Y = 0.0;
    double s2_Y = 0.0;
    double sum_cost = 0.0;

    LevelStats() = default;
    LevelStats(int level, mesh::GridLevel grid) : ell(level), mean_p(grid), mean_v(grid) {}

    void add(const CoupledSample& s) {
        ++M;
        const double inv = 1.0 / static_cast<double>(M);
        s2_p += welford(mean_p, s.p, inv);
        s2_v += welford(mean_v, s.v, inv);
        const double dY = s.Y - mean_Y;
        mean_Y += dY * inv;
        s2_Y += dY * (s.Y - mean_Y);
        sum_Y += s.Y;
        sum_cost += s.cost;
    }

    [[nodiscard]] double norm_mean_p() const { return mesh::norm_l2(mean_p); }
    [[nodiscard]] double norm_mean_v() const { return mesh::norm_l2(mean_v); }
    [[nodiscard]] double mean_cost() const { return M == 0 ? 0.0 : sum_cost / static_cast<double>(M); }
    /// Unbiased variance estimates s^2 / (M - 1).
    [[nodiscard]] double var_p() const { return M < 2 ? kNaN : s2_p / static_cast<double>(M - 1); }
    [[nodiscard]] double var_v() const { return M < 2 ? kNaN : s2_v / static_cast<double>(M - 1); }
    /// J^MC contribution of this level, mean of Y.
    [[nodiscard]] double objective() const { return M == 0 ? 0.0 : sum_Y / static_cast<double>(M); }

private:
    static double welford(mesh::NodalField& mean, const mesh::NodalField& x, double inv) {
        mean.require_same_level(x, "LevelStats::add");
        // <x - mean_old, x - mean_new> with the lumped weights
        const std::size_t s = mean.side();
        const std::size_t last = s - 1;
        double acc = 0.0;
        for (std::size_t j = 0; j < s; ++j)
            for (std::size_t i = 0; i < s; ++i) {
                double& m = mean(i, j);
                const double d_old = x(i, j) - m;
                m += d_old * inv;
                double w = 1.0;
                if (i == 0 || i == last) w *= 0.5;
                if (j == 0 || j == last) w *= 0.5;
                acc += w * d_old * (x(i, j) - m);
            }
        const double h = mean.level().h();
        return h * h * acc;
    }
};

struct MultilevelBatch {
    std::vector<std::size_t> M;  // M[ell] for ell = 0..L

    [[nodiscard]] int finest() const { return static_cast<int>(M.size()) - 1; }

    void validate() const {
        if (M.empty()) throw std::invalid_argument("MultilevelBatch: at least one level is required");
        for (std::size_t ell = 0; ell < M.size(); ++ell)
            if (M[ell] < 1)
                throw std::invalid_argument("MultilevelBatch: M on level " + std::to_string(ell) + " must be >= 1");
    }
};

struct LevelEstimate {
    mesh::NodalField mean;  // E^MC[q] on level 0, E^MC[p_ell] above
    double J = 0.0;         // objective estimate; includes the control term only for batch_estimation
    LevelStats stats;
};

struct BiasEstimate {
    double alpha_hat = kNaN;
    double err_num = kNaN;
    bool no_decay = false;
};

struct GradientEstimate {
    mesh::NodalField q_hat;
    mesh::NodalField g_hat;
    double J_hat = kNaN;
    double err_sam = kNaN;
    double err_num = kNaN;
    double alpha_hat = kNaN;
    bool no_decay = false;
    double total_cost = 0.0;
    std::vector<LevelStats> per_level;
};

class EstimationError : public std::runtime_error {
public:
    EstimationError(const std::string& what, int level, std::size_t index, std::uint64_t seed)
        : std::runtime_error(what), level(level), index(index), seed(seed) {}
    int level;
    std::size_t index;
    std::uint64_t seed;
};

/// sum_ell s2_ell / (M_ell (M_ell - 1))
inline double sampling_error(std::span<const LevelStats> stats) {
    double err = 0.0;
    for (const auto& s : stats) {
        if (s.M < 2)
            throw std::invalid_argument("sampling_error: level " + std::to_string(s.ell) + " has fewer than two samples");
        err += s.s2_p / (static_cast<double>(s.M) * static_cast<double>(s.M - 1));
    }
    return err;
}

/// Fits ||E p_ell|| ~ c 2^(-alpha ell) over ell = 1..L and extrapolates the
/// remaining bias. Non-decaying data yield err_num = +inf with no_decay set.
inline BiasEstimate numerical_error_from_norms(std::span<const double> norms) {
    if (norms.size() < 3) throw std::invalid_argument("numerical_error: need levels 0..L with L >= 2");
    const int L = static_cast<int>(norms.size()) - 1;
    BiasEstimate out;
    std::vector<double> xs, ys;
    for (int ell = 1; ell <= L; ++ell) {
        if (!(norms[ell] > 0.0) || !std::isfinite(norms[ell])) {
            out.no_decay = true;
            out.err_num = std::numeric_limits<double>::infinity();
            return out;
        }
        xs.push_back(std::ldexp(1.0, ell));
        ys.push_back(norms[ell]);
    }
    out.alpha_hat = rates::fit_loglinear(xs, ys, -1).exponent;
    if (!(out.alpha_hat > 0.0)) {
        out.no_decay = true;
        out.err_num = std::numeric_limits<double>::infinity();
        return out;
    }
    const double denom0 = std::exp2(out.alpha_hat) - 1.0;
    double worst = 0.0;
    for (int ell = 1; ell <= L; ++ell) {
        const double e = norms[ell] / (denom0 * std::exp2(out.alpha_hat * (L - ell)));
        worst = std::max(worst, e * e);
    }
    out.err_num = worst;
    return out;
}

inline BiasEstimate numerical_error(std::span<const LevelStats> stats) {
    std::vector<double> norms;
    for (const auto& s : stats) norms.push_back(s.norm_mean_p());
    return numerical_error_from_norms(norms);
}

/// Sample evaluation and level estimators for one problem setup. Embedding
/// plans and targets are built on first use and reused; public methods are
/// not meant to be called concurrently, parallelism lives inside them.
class Estimator {
public:
    explicit Estimator(ProblemSetup setup) : setup_(std::move(setup)) { setup_.validate(); }

    [[nodiscard]] const ProblemSetup& setup() const { return setup_; }
    [[nodiscard]] mesh::GridLevel grid(int ell) const { return {ell, setup_.e0}; }

    const randfield::EmbeddingPlan& plan(int ell) {
        auto it = plans_.find(ell);
        if (it == plans_.end())
            it = plans_.emplace(ell, randfield::build_embedding(grid(ell), setup_.matern, setup_.padding_factor)).first;
        return it->second;
    }

    const mesh::NodalField& target(int ell) {
        auto it = targets_.find(ell);
        if (it == targets_.end()) it = targets_.emplace(ell, mesh::sample_function(grid(ell), setup_.target)).first;
        return it->second;
    }

    [[nodiscard]] std::uint64_t sample_seed(std::uint64_t root, int k, int ell, std::size_t m) const {
        const std::uint64_t tag =
            setup_.coupling == Coupling::shared ? seeds::kSharedLevelTag : static_cast<std::uint64_t>(ell);
        return seeds::mix(root, static_cast<std::uint64_t>(k), tag, m);
    }

    /// Coefficient field y on `ell` for one seed, synthesized on `synth_ell` >= ell.
    mesh::NodalField coefficient(int ell, int synth_ell, std::uint64_t seed) {
        if (setup_.deterministic_y) return mesh::NodalField(grid(ell));
        return mesh::restrict_to(randfield::sample_field(plan(synth_ell), seed), grid(ell));
    }

    /// One coupled sample on (ell, ell-1), or a plain sample on ell when
    /// `pair` is false or ell = 0; z_L lives on a level >= ell.
    /// Thread-safe once plan(synth_ell), target(ell) and target(ell-1) exist.
    CoupledSample evaluate(const mesh::NodalField& z_L, int ell, int synth_ell, std::uint64_t seed,
                           bool pair = true) const {
        const auto start = std::chrono::steady_clock::now();
        CoupledSample s;
        s.seed = seed;
        double work = 0.0;

        mesh::NodalField y_fine(grid(ell));
        if (!setup_.deterministic_y) {
            const randfield::EmbeddingPlan& pl = plans_.at(synth_ell);
            y_fine = mesh::restrict_to(randfield::sample_field(pl, seed), grid(ell));
            work += static_cast<double>(pl.padded_size * pl.padded_size);
        }

        auto solve_level = [&](const mesh::NodalField& y, int lev) {
            const mesh::NodalField z = mesh::restrict_to(z_L, grid(lev));
            const mesh::NodalField& d = targets_.at(lev);
            const pde::EllipticSolver solver(y);
            auto [u, rs] = pde::solve_state(solver, z, setup_.solver);
            auto [q, ra] = pde::solve_adjoint(solver, u, d, setup_.solver);
            work += solver.setup_work() + rs.work_units + ra.work_units;
            s.iterations += rs.iterations + ra.iterations;
            const double Q = pde::misfit(u, d);
            return std::tuple{std::move(u), std::move(q), Q};
        };

        auto [u_f, q_f, Q_f] = solve_level(y_fine, ell);
        if (ell == 0 || !pair) {
            s.p = std::move(q_f);
            s.v = std::move(u_f);
            s.Y = Q_f;
        } else {
            const mesh::NodalField y_coarse = mesh::restrict_to(y_fine, grid(ell - 1));
            auto [u_c, q_c, Q_c] = solve_level(y_coarse, ell - 1);
            s.p = q_f - mesh::prolongate(q_c);
            s.v = u_f - mesh::prolongate(u_c);
            s.Y = Q_f - Q_c;
        }
        if (setup_.cost_mode == CostMode::work_units)
            s.cost = work;
        else
            s.cost = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return s;
    }

    /// Streams M samples on (ell, ell-1), or on ell alone when `pair` is
    /// false, into LevelStats. Samples run on the worker pool in chunks;
    /// reduction is always in index order m = 1..M.
    LevelStats level_stats(const mesh::NodalField& z_L, std::size_t M, int ell, int k, std::uint64_t root,
                           int synth_ell = -1, bool pair = true) {
        if (M < 1) throw std::invalid_argument("level estimation: M must be >= 1");
        if (ell < 0 || ell > z_L.level().ell || z_L.level().e0 != setup_.e0)
            throw std::invalid_argument("level estimation: level " + std::to_string(ell) +
                                        " is not covered by the control's level");
        if (synth_ell < 0) synth_ell = ell;
        if (synth_ell < ell) throw std::invalid_argument("level estimation: synthesis level below sample level");
        if (!setup_.deterministic_y) plan(synth_ell);
        target(ell);
        if (ell > 0 && pair) target(ell - 1);

        const unsigned workers = parallel::resolve_workers(setup_.workers);
        const std::size_t chunk = std::max<std::size_t>(8, 4 * static_cast<std::size_t>(workers));
        LevelStats stats(ell, grid(ell));
        std::vector<std::optional<CoupledSample>> slots;
        for (std::size_t first = 1; first <= M; first += chunk) {
            const std::size_t count = std::min(chunk, M - first + 1);
            slots.assign(count, std::nullopt);
            parallel::parallel_for(count, workers, [&](std::size_t i) {
                const std::size_t m = first + i;
                const std::uint64_t seed = sample_seed(root, k, ell, m);
                try {
                    slots[i] = evaluate(z_L, ell, synth_ell, seed, pair);
                } catch (const std::exception& e) {
                    throw EstimationError("sample m=" + std::to_string(m) + " on level " + std::to_string(ell) +
                                              " (seed " + std::to_string(seed) + ") failed: " + e.what(),
                                          ell, m, seed);
                }
            });
            for (auto& s : slots) stats.add(*s);
        }
        return stats;
    }

    /// Single-level Monte Carlo on the level of z: E^MC[q] and J^MC including
    /// the control term.
    LevelEstimate batch_estimation(const mesh::NodalField& z, std::size_t M, int k, std::uint64_t root) {
        const int ell = z.level().ell;
        LevelStats st = level_stats(z, M, ell, k, root, -1, false);
        LevelEstimate out;
        out.mean = st.mean_p;
        const double zn = mesh::norm_l2(z);
        out.J = st.objective() + 0.5 * setup_.lambda * zn * zn;
        out.stats = std::move(st);
        return out;
    }

    /// Level-pair Monte Carlo: E^MC[p_ell] on level ell and the mean of Y_ell.
    LevelEstimate level_pair_estimation(const mesh::NodalField& z_L, std::size_t M, int ell, int k,
                                        std::uint64_t root, int synth_ell = -1) {
        if (ell < 1) throw std::invalid_argument("level_pair_estimation: ell must be >= 1");
        LevelStats st = level_stats(z_L, M, ell, k, root, synth_ell);
        LevelEstimate out;
        out.mean = st.mean_p;
        out.J = st.objective();
        out.stats = std::move(st);
        return out;
    }

    GradientEstimate multilevel_estimation(const mesh::NodalField& z_L, const MultilevelBatch& batch, int k,
                                           std::uint64_t root) {
        batch.validate();
        const int L = batch.finest();
        if (z_L.level().ell != L)
            throw std::invalid_argument("multilevel_estimation: control lives on level " +
                                        std::to_string(z_L.level().ell) + " but the batch ends at " +
                                        std::to_string(L));
        const int synth = setup_.coupling == Coupling::shared ? L : -1;
        GradientEstimate out;
        out.q_hat = mesh::NodalField(z_L.level());
        double J = 0.0;
        for (int ell = 0; ell <= L; ++ell) {
            LevelStats st = level_stats(z_L, batch.M[ell], ell, k, root, synth);
            out.q_hat += mesh::prolongate_to(st.mean_p, z_L.level());
            J += st.objective();
            out.total_cost += st.sum_cost;
            out.per_level.push_back(std::move(st));
        }
        const double zn = mesh::norm_l2(z_L);
        out.J_hat = J + 0.5 * setup_.lambda * zn * zn;
        out.g_hat = z_L;
        out.g_hat *= setup_.lambda;
        out.g_hat -= out.q_hat;

        bool enough = true;
        for (const auto& s : out.per_level) enough = enough && s.M >= 2;
        if (enough) out.err_sam = sampling_error(out.per_level);
        if (L >= 2) {
            const BiasEstimate b = numerical_error(out.per_level);
            out.alpha_hat = b.alpha_hat;
            out.err_num = b.err_num;
            out.no_decay = b.no_decay;
        }
        return out;
    }

private:
    ProblemSetup setup_;
    std::map<int, randfield::EmbeddingPlan> plans_;
    std::map<int, mesh::NodalField> targets_;
};

}  // namespace mlsgd::mlmc
