#pragma once

// Geometric multigrid on the dyadic unit-square grid with homogeneous
// Dirichlet boundary. Coarse operators are Galerkin products P^T A P with
// bilinear P, so every level carries a symmetric 9-point stencil. Vectors are
// stored on the full (n+1)^2 node grid with the boundary ring held at zero.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlsgd::multigrid {

/// 9-point stencil operator; offset (dx, dy) in [-1, 1]^2 is stored at
/// (dx + 1) + 3 (dy + 1).
struct StencilOperator {
    std::size_t cells = 0;                    // n; interior nodes are 1..n-1
    std::vector<std::array<double, 9>> rows;  // (n+1)^2, boundary rows unused

    [[nodiscard]] std::size_t side() const { return cells + 1; }
    [[nodiscard]] std::size_t interior_count() const { return (cells - 1) * (cells - 1); }
    [[nodiscard]] std::size_t index(std::size_t i, std::size_t j) const { return j * side() + i; }

    static constexpr std::size_t slot(int dx, int dy) { return static_cast<std::size_t>((dx + 1) + 3 * (dy + 1)); }

    void apply(const std::vector<double>& x, std::vector<double>& y) const {
        const std::size_t s = side();
        for (std::size_t j = 1; j < cells; ++j)
            for (std::size_t i = 1; i < cells; ++i) {
                const std::size_t k = j * s + i;
                const auto& c = rows[k];
                y[k] = c[0] * x[k - s - 1] + c[1] * x[k - s] + c[2] * x[k - s + 1] + c[3] * x[k - 1] +
                       c[4] * x[k] + c[5] * x[k + 1] + c[6] * x[k + s - 1] + c[7] * x[k + s] +
                       c[8] * x[k + s + 1];
            }
    }
};

namespace detail {

// Bilinear prolongation weights and the coarse nodes a fine index touches.
struct Parent {
    std::size_t index;
    double weight;
};
inline int parents(std::size_t fine, Parent out[2]) {
    if (fine % 2 == 0) {
        out[0] = {fine / 2, 1.0};
        return 1;
    }
    out[0] = {(fine - 1) / 2, 0.5};
    out[1] = {(fine + 1) / 2, 0.5};
    return 2;
}
inline double hat(int a) { return a == 0 ? 1.0 : 0.5; }

}  // namespace detail

/// Galerkin coarse operator P^T A P.
inline StencilOperator galerkin_coarsen(const StencilOperator& fine) {
    if (fine.cells < 4 || fine.cells % 2 != 0)
        throw std::invalid_argument("galerkin_coarsen: fine grid must have an even cell count >= 4");
    StencilOperator coarse;
    coarse.cells = fine.cells / 2;
    coarse.rows.assign(coarse.side() * coarse.side(), {});
    const std::size_t mc = coarse.cells - 1;
    const std::size_t nf = fine.cells;

    for (std::size_t J = 1; J <= mc; ++J)
        for (std::size_t I = 1; I <= mc; ++I) {
            std::array<double, 9> acc{};
            for (int b = -1; b <= 1; ++b)
                for (int a = -1; a <= 1; ++a) {
                    const std::size_t fi = 2 * I + a;
                    const std::size_t fj = 2 * J + b;
                    const double wi = detail::hat(a) * detail::hat(b);
                    const auto& st = fine.rows[fine.index(fi, fj)];
                    for (int d = -1; d <= 1; ++d)
                        for (int c = -1; c <= 1; ++c) {
                            const double coef = st[StencilOperator::slot(c, d)];
                            if (coef == 0.0) continue;
                            const std::size_t gx = fi + c;
                            const std::size_t gy = fj + d;
                            if (gx == 0 || gy == 0 || gx == nf || gy == nf) continue;
                            detail::Parent px[2], py[2];
                            const int nx = detail::parents(gx, px);
                            const int ny = detail::parents(gy, py);
                            for (int q = 0; q < ny; ++q)
                                for (int p = 0; p < nx; ++p) {
                                    const std::size_t K = px[p].index;
                                    const std::size_t L = py[q].index;
                                    if (K == 0 || L == 0 || K > mc || L > mc) continue;
                                    const int dx = static_cast<int>(K) - static_cast<int>(I);
                                    const int dy = static_cast<int>(L) - static_cast<int>(J);
                                    acc[StencilOperator::slot(dx, dy)] += wi * coef * px[p].weight * py[q].weight;
                                }
                        }
                }
            coarse.rows[coarse.index(I, J)] = acc;
        }
    return coarse;
}

class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, std::vector<double> history)
        : std::runtime_error(what), residual_history(std::move(history)) {}
    std::vector<double> residual_history;
};

struct SolveReport {
    int iterations = 0;
    double relative_residual = 0.0;
    double work_units = 0.0;
    std::vector<double> residual_history;
};

struct SolverOptions {
    double tolerance = 1e-8;
    int max_iterations = 500;
    double jacobi_weight = 0.8;
};

/// Operator hierarchy, finest first, down to a single interior unknown.
class Hierarchy {
public:
    explicit Hierarchy(StencilOperator finest) {
        levels_.push_back(std::move(finest));
        setup_work_ = static_cast<double>(levels_.back().interior_count());
        while (levels_.back().cells > 2) {
            levels_.push_back(galerkin_coarsen(levels_.back()));
            setup_work_ += static_cast<double>(levels_.back().interior_count());
        }
    }

    [[nodiscard]] const StencilOperator& finest() const { return levels_.front(); }
    [[nodiscard]] std::size_t depth() const { return levels_.size(); }
    [[nodiscard]] const StencilOperator& level(std::size_t k) const { return levels_[k]; }
    /// Interior nodes touched while building the hierarchy.
    [[nodiscard]] double setup_work() const { return setup_work_; }

    /// Preconditioned CG on A x = b; b must vanish on the boundary ring.
    SolveReport solve(const std::vector<double>& b, std::vector<double>& x, const SolverOptions& opt) const {
        const StencilOperator& A = finest();
        const std::size_t N = A.side() * A.side();
        if (b.size() != N) throw std::invalid_argument("multigrid solve: right-hand side has the wrong size");
        x.assign(N, 0.0);
        SolveReport report;
        const double m = static_cast<double>(A.interior_count());

        std::vector<double> r = b;
        if (dot(r, r) == 0.0) return report;

        Scratch scratch(*this);
        std::vector<double> z(N, 0.0), p(N, 0.0), Ap(N, 0.0);
        vcycle(0, r, z, opt, scratch, report.work_units);
        double rz = dot(r, z);
        const double rz0 = rz;
        p = z;
        for (int it = 1; it <= opt.max_iterations; ++it) {
            A.apply(p, Ap);
            report.work_units += m;
            const double pAp = dot(p, Ap);
            if (!(pAp > 0.0))
                throw SolverError("multigrid solve: operator is not positive definite along the search direction",
                                  report.residual_history);
            const double alpha = rz / pAp;
            for (std::size_t k = 0; k < N; ++k) {
                x[k] += alpha * p[k];
                r[k] -= alpha * Ap[k];
            }
            vcycle(0, r, z, opt, scratch, report.work_units);
            const double rz_new = dot(r, z);
            const double rel = std::sqrt(std::abs(rz_new / rz0));
            report.residual_history.push_back(rel);
            report.iterations = it;
            report.relative_residual = rel;
            if (rel <= opt.tolerance) return report;
            const double beta = rz_new / rz;
            for (std::size_t k = 0; k < N; ++k) p[k] = z[k] + beta * p[k];
            rz = rz_new;
        }
        throw SolverError("multigrid solve: no convergence after " + std::to_string(opt.max_iterations) +
                              " iterations (relative residual " + std::to_string(report.relative_residual) + ")",
                          report.residual_history);
    }

private:
    struct Scratch {
        std::vector<std::vector<double>> rhs, sol, tmp;
        explicit Scratch(const Hierarchy& H) {
            for (const auto& L : H.levels_) {
                const std::size_t N = L.side() * L.side();
                rhs.emplace_back(N, 0.0);
                sol.emplace_back(N, 0.0);
                tmp.emplace_back(N, 0.0);
            }
        }
    };

    static double dot(const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
        return s;
    }

    // Symmetric V(1,1): damped Jacobi from a zero guess, coarse correction,
    // damped Jacobi; x approximates A^-1 b.
    void vcycle(std::size_t lev, const std::vector<double>& b, std::vector<double>& x, const SolverOptions& opt,
                Scratch& s, double& work) const {
        const StencilOperator& A = levels_[lev];
        const std::size_t side = A.side();
        const std::size_t n = A.cells;
        const double m = static_cast<double>(A.interior_count());
        const std::size_t center = StencilOperator::slot(0, 0);

        std::fill(x.begin(), x.end(), 0.0);
        if (lev + 1 == levels_.size()) {
            for (std::size_t j = 1; j < n; ++j)
                for (std::size_t i = 1; i < n; ++i) {
                    const std::size_t k = j * side + i;
                    x[k] = b[k] / A.rows[k][center];
                }
            work += m;
            return;
        }

        const double w = opt.jacobi_weight;
        for (std::size_t j = 1; j < n; ++j)
            for (std::size_t i = 1; i < n; ++i) {
                const std::size_t k = j * side + i;
                x[k] = w * b[k] / A.rows[k][center];
            }
        work += m;

        std::vector<double>& r = s.tmp[lev];
        A.apply(x, r);
        for (std::size_t k = 0; k < r.size(); ++k) r[k] = b[k] - r[k];
        work += m;

        // full-weighting restriction P^T r
        const StencilOperator& C = levels_[lev + 1];
        std::vector<double>& bc = s.rhs[lev + 1];
        std::vector<double>& xc = s.sol[lev + 1];
        const std::size_t cs = C.side();
        for (std::size_t J = 1; J < C.cells; ++J)
            for (std::size_t I = 1; I < C.cells; ++I) {
                double acc = 0.0;
                for (int bb = -1; bb <= 1; ++bb)
                    for (int aa = -1; aa <= 1; ++aa)
                        acc += detail::hat(aa) * detail::hat(bb) * r[(2 * J + bb) * side + (2 * I + aa)];
                bc[J * cs + I] = acc;
            }
        vcycle(lev + 1, bc, xc, opt, s, work);

        // bilinear prolongation of the correction
        for (std::size_t j = 1; j < n; ++j)
            for (std::size_t i = 1; i < n; ++i) {
                detail::Parent px[2], py[2];
                const int nx = detail::parents(i, px);
                const int ny = detail::parents(j, py);
                double e = 0.0;
                for (int q = 0; q < ny; ++q)
                    for (int p = 0; p < nx; ++p) e += px[p].weight * py[q].weight * xc[py[q].index * cs + px[p].index];
                x[j * side + i] += e;
            }

        A.apply(x, r);
        for (std::size_t j = 1; j < n; ++j)
            for (std::size_t i = 1; i < n; ++i) {
                const std::size_t k = j * side + i;
                x[k] += w * (b[k] - r[k]) / A.rows[k][center];
            }
        work += m;
    }

    std::vector<StencilOperator> levels_;
    double setup_work_ = 0.0;
};

}  // namespace mlsgd::multigrid
