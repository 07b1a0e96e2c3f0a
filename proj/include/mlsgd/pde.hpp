#pragma once

// -div(exp(y) grad u) = f on the unit square, u = 0 on the boundary.
// Five-point flux discretization with edge coefficients exp((y_i + y_j) / 2)
// and a lumped-mass right-hand side h^2 w_i f_i. The adjoint system uses the
// same matrix, so lambda z - q is the exact discrete gradient of the
// per-sample objective under the lumped L2 inner product.

#include "mlsgd/mesh.hpp"
#include "mlsgd/multigrid.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mlsgd::pde {

using multigrid::SolveReport;
using multigrid::SolverError;
using multigrid::SolverOptions;

class DiffusionOperator {
public:
    DiffusionOperator() = default;
    DiffusionOperator(mesh::GridLevel level, std::vector<double> horizontal, std::vector<double> vertical)
        : level_(level), horizontal_(std::move(horizontal)), vertical_(std::move(vertical)) {}

    [[nodiscard]] const mesh::GridLevel& level() const { return level_; }
    /// Edge between (i, j) and (i+1, j).
    [[nodiscard]] double horizontal(std::size_t i, std::size_t j) const { return horizontal_[j * level_.cells() + i]; }
    /// Edge between (i, j) and (i, j+1).
    [[nodiscard]] double vertical(std::size_t i, std::size_t j) const { return vertical_[j * level_.side() + i]; }
    [[nodiscard]] const std::vector<double>& horizontal_edges() const { return horizontal_; }
    [[nodiscard]] const std::vector<double>& vertical_edges() const { return vertical_; }

    struct Row {
        double center, west, east, south, north;
    };
    /// Flux stencil of interior node (i, j), including couplings to boundary nodes.
    [[nodiscard]] Row row(std::size_t i, std::size_t j) const {
        const double w = horizontal(i - 1, j);
        const double e = horizontal(i, j);
        const double s = vertical(i, j - 1);
        const double n = vertical(i, j);
        return {w + e + s + n, -w, -e, -s, -n};
    }

    /// A u with identity rows on the boundary.
    [[nodiscard]] mesh::NodalField apply(const mesh::NodalField& u) const {
        if (!(u.level() == level_)) throw std::invalid_argument("DiffusionOperator::apply: level mismatch");
        mesh::NodalField out(level_);
        const std::size_t n = level_.cells();
        for (std::size_t j = 0; j <= n; ++j)
            for (std::size_t i = 0; i <= n; ++i) {
                if (u.is_boundary(i, j)) {
                    out(i, j) = u(i, j);
                    continue;
                }
                const Row r = row(i, j);
                out(i, j) = r.center * u(i, j) + r.west * u(i - 1, j) + r.east * u(i + 1, j) +
                            r.south * u(i, j - 1) + r.north * u(i, j + 1);
            }
        return out;
    }

    /// Interior-only stencil for the multigrid hierarchy; couplings to
    /// boundary nodes are dropped since those unknowns are fixed at zero.
    [[nodiscard]] multigrid::StencilOperator stencil() const {
        multigrid::StencilOperator op;
        const std::size_t n = level_.cells();
        op.cells = n;
        op.rows.assign((n + 1) * (n + 1), {});
        using multigrid::StencilOperator;
        for (std::size_t j = 1; j < n; ++j)
            for (std::size_t i = 1; i < n; ++i) {
                const Row r = row(i, j);
                auto& c = op.rows[op.index(i, j)];
                c[StencilOperator::slot(0, 0)] = r.center;
                if (i > 1) c[StencilOperator::slot(-1, 0)] = r.west;
                if (i + 1 < n) c[StencilOperator::slot(1, 0)] = r.east;
                if (j > 1) c[StencilOperator::slot(0, -1)] = r.south;
                if (j + 1 < n) c[StencilOperator::slot(0, 1)] = r.north;
            }
        return op;
    }

private:
    mesh::GridLevel level_{};
    std::vector<double> horizontal_;
    std::vector<double> vertical_;
};

inline DiffusionOperator assemble(const mesh::NodalField& y) {
    for (double v : y.values())
        if (!std::isfinite(v)) throw std::invalid_argument("assemble: coefficient field has non-finite values");
    const mesh::GridLevel level = y.level();
    const std::size_t n = level.cells();
    std::vector<double> horizontal(n * (n + 1));
    std::vector<double> vertical((n + 1) * n);
    for (std::size_t j = 0; j <= n; ++j)
        for (std::size_t i = 0; i < n; ++i) horizontal[j * n + i] = std::exp(0.5 * (y(i, j) + y(i + 1, j)));
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i <= n; ++i) vertical[j * (n + 1) + i] = std::exp(0.5 * (y(i, j) + y(i, j + 1)));
    return {level, std::move(horizontal), std::move(vertical)};
}

/// h^2 w_i f_i on interior nodes, zero on the boundary.
inline mesh::NodalField mass_weighted(const mesh::NodalField& f) {
    mesh::NodalField rhs(f.level());
    const double h2 = f.level().h() * f.level().h();
    const std::size_t n = f.level().cells();
    for (std::size_t j = 1; j < n; ++j)
        for (std::size_t i = 1; i < n; ++i) rhs(i, j) = h2 * f(i, j);
    return rhs;
}

/// Operator plus its multigrid hierarchy, shared by the state and adjoint
/// solves of one realization.
class EllipticSolver {
public:
    explicit EllipticSolver(DiffusionOperator op) : op_(std::move(op)), hierarchy_(op_.stencil()) {}
    explicit EllipticSolver(const mesh::NodalField& y) : EllipticSolver(assemble(y)) {}

    [[nodiscard]] const DiffusionOperator& op() const { return op_; }
    [[nodiscard]] const multigrid::Hierarchy& hierarchy() const { return hierarchy_; }
    /// Assembly plus Galerkin coarsening, in interior node touches.
    [[nodiscard]] double setup_work() const {
        return static_cast<double>(op_.level().node_count()) + hierarchy_.setup_work();
    }

    /// Solves A u = rhs; rhs must vanish on the boundary.
    [[nodiscard]] std::pair<mesh::NodalField, SolveReport> solve(const mesh::NodalField& rhs,
                                                                 const SolverOptions& opt = {}) const {
        if (!(rhs.level() == op_.level())) throw std::invalid_argument("solve: right-hand side level mismatch");
        if (!(opt.tolerance > 0.0 && opt.tolerance < 1.0))
            throw std::invalid_argument("solve: tolerance must lie in (0, 1)");
        const std::size_t n = op_.level().cells();
        for (std::size_t j = 0; j <= n; ++j)
            for (std::size_t i = 0; i <= n; ++i)
                if (rhs.is_boundary(i, j) && rhs(i, j) != 0.0)
                    throw std::invalid_argument("solve: right-hand side must vanish on the boundary");
        std::vector<double> x;
        SolveReport report = hierarchy_.solve(rhs.values(), x, opt);
        return {mesh::NodalField(op_.level(), std::move(x)), std::move(report)};
    }

private:
    DiffusionOperator op_;
    multigrid::Hierarchy hierarchy_;
};

inline std::pair<mesh::NodalField, SolveReport> solve(const DiffusionOperator& A, const mesh::NodalField& rhs,
                                                      const SolverOptions& opt = {}) {
    return EllipticSolver(A).solve(rhs, opt);
}

/// G[y] u = z.
inline std::pair<mesh::NodalField, SolveReport> solve_state(const EllipticSolver& solver, const mesh::NodalField& z,
                                                            const SolverOptions& opt = {}) {
    return solver.solve(mass_weighted(z), opt);
}

/// G*[y] q = d - u (same matrix by symmetry).
inline std::pair<mesh::NodalField, SolveReport> solve_adjoint(const EllipticSolver& solver, const mesh::NodalField& u,
                                                              const mesh::NodalField& d,
                                                              const SolverOptions& opt = {}) {
    return solver.solve(mass_weighted(d - u), opt);
}

inline std::pair<mesh::NodalField, SolveReport> solve_state(const mesh::NodalField& y, const mesh::NodalField& z,
                                                            const SolverOptions& opt = {}) {
    y.require_same_level(z, "solve_state");
    return solve_state(EllipticSolver(y), z, opt);
}

inline std::pair<mesh::NodalField, SolveReport> solve_adjoint(const mesh::NodalField& y, const mesh::NodalField& u,
                                                              const mesh::NodalField& d,
                                                              const SolverOptions& opt = {}) {
    y.require_same_level(u, "solve_adjoint");
    return solve_adjoint(EllipticSolver(y), u, d, opt);
}

/// Misfit term 1/2 ||u - d||^2 (Q_ell in the level-difference estimator).
inline double misfit(const mesh::NodalField& u, const mesh::NodalField& d) {
    const double r = mesh::norm_l2(u - d);
    return 0.5 * r * r;
}

/// j = 1/2 ||u - d||^2 + lambda/2 ||z||^2
inline double sample_objective(const mesh::NodalField& u, const mesh::NodalField& d, const mesh::NodalField& z,
                               double lambda) {
    const double zn = mesh::norm_l2(z);
    return misfit(u, d) + 0.5 * lambda * zn * zn;
}

}  // namespace mlsgd::pde
