#pragma once

// Uniform grid hierarchy on the unit square, nodal fields and the transfer
// operators between nested levels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlsgd::mesh {

/// One level of the dyadic hierarchy. The mesh width is h = 2^-(e0 + ell),
/// so level 0 has h0 = 2^-e0.
struct GridLevel {
    int ell = 0;
    int e0 = 4;

    [[nodiscard]] int exponent() const { return e0 + ell; }
    [[nodiscard]] std::size_t cells() const { return std::size_t{1} << exponent(); }
    [[nodiscard]] std::size_t side() const { return cells() + 1; }
    [[nodiscard]] std::size_t node_count() const { return side() * side(); }
    [[nodiscard]] double h() const { return std::ldexp(1.0, -exponent()); }

    [[nodiscard]] GridLevel finer() const { return {ell + 1, e0}; }
    [[nodiscard]] GridLevel coarser() const {
        if (ell == 0) throw std::invalid_argument("GridLevel: level 0 has no coarser level");
        return {ell - 1, e0};
    }

    friend bool operator==(const GridLevel&, const GridLevel&) = default;
};

// 2^(2*30) nodes already exceeds what a 64-bit double array can address
// comfortably; keep the exponent well inside size_t.
inline constexpr int kMaxExponent = 24;

inline std::vector<GridLevel> build_hierarchy(int e0, int L) {
    if (e0 < 1) throw std::invalid_argument("build_hierarchy: e0 must be >= 1");
    if (L < 0) throw std::invalid_argument("build_hierarchy: L must be >= 0");
    if (e0 + L > kMaxExponent)
        throw std::overflow_error("build_hierarchy: e0 + L = " + std::to_string(e0 + L) +
                                  " overflows the node index range (max " +
                                  std::to_string(kMaxExponent) + ")");
    std::vector<GridLevel> levels;
    levels.reserve(static_cast<std::size_t>(L) + 1);
    for (int ell = 0; ell <= L; ++ell) levels.push_back({ell, e0});
    return levels;
}

/// Real values on the nodes of one grid level, row-major with x1 running
/// fastest: value(i, j) sits at (i h, j h).
class NodalField {
public:
    NodalField() = default;
    explicit NodalField(GridLevel level, double fill = 0.0)
        : level_(level), values_(level.node_count(), fill) {}
    NodalField(GridLevel level, std::vector<double> values) : level_(level), values_(std::move(values)) {
        if (values_.size() != level_.node_count())
            throw std::invalid_argument("NodalField: value count does not match the level");
    }

    [[nodiscard]] const GridLevel& level() const { return level_; }
    [[nodiscard]] std::size_t side() const { return level_.side(); }
    [[nodiscard]] std::size_t size() const { return values_.size(); }

    [[nodiscard]] double& operator()(std::size_t i, std::size_t j) { return values_[j * side() + i]; }
    [[nodiscard]] double operator()(std::size_t i, std::size_t j) const { return values_[j * side() + i]; }
    [[nodiscard]] double& operator[](std::size_t k) { return values_[k]; }
    [[nodiscard]] double operator[](std::size_t k) const { return values_[k]; }

    [[nodiscard]] std::vector<double>& values() { return values_; }
    [[nodiscard]] const std::vector<double>& values() const { return values_; }

    [[nodiscard]] bool is_boundary(std::size_t i, std::size_t j) const {
        const std::size_t last = side() - 1;
        return i == 0 || j == 0 || i == last || j == last;
    }

    NodalField& operator+=(const NodalField& other) {
        require_same_level(other, "operator+=");
        for (std::size_t k = 0; k < values_.size(); ++k) values_[k] += other.values_[k];
        return *this;
    }
    NodalField& operator-=(const NodalField& other) {
        require_same_level(other, "operator-=");
        for (std::size_t k = 0; k < values_.size(); ++k) values_[k] -= other.values_[k];
        return *this;
    }
    NodalField& operator*=(double s) {
        for (double& v : values_) v *= s;
        return *this;
    }
    /// this += a * x
    NodalField& axpy(double a, const NodalField& x) {
        require_same_level(x, "axpy");
        for (std::size_t k = 0; k < values_.size(); ++k) values_[k] += a * x.values_[k];
        return *this;
    }

    friend NodalField operator+(NodalField a, const NodalField& b) { return a += b; }
    friend NodalField operator-(NodalField a, const NodalField& b) { return a -= b; }
    friend NodalField operator*(double s, NodalField a) { return a *= s; }

    friend bool operator==(const NodalField&, const NodalField&) = default;

    void require_same_level(const NodalField& other, const char* what) const {
        if (!(level_ == other.level_))
            throw std::invalid_argument(std::string(what) + ": level mismatch (" +
                                        std::to_string(level_.exponent()) + " vs " +
                                        std::to_string(other.level_.exponent()) + ")");
    }

private:
    GridLevel level_{};
    std::vector<double> values_;
};

/// Samples f(x1, x2) at the nodes of a level.
inline NodalField sample_function(GridLevel level, const std::function<double(double, double)>& f) {
    NodalField out(level);
    const double h = level.h();
    for (std::size_t j = 0; j < out.side(); ++j)
        for (std::size_t i = 0; i < out.side(); ++i)
            out(i, j) = f(static_cast<double>(i) * h, static_cast<double>(j) * h);
    return out;
}

/// Bilinear interpolation from level ell-1 to level ell.
inline NodalField prolongate(const NodalField& coarse) {
    const GridLevel fine_level = coarse.level().finer();
    NodalField fine(fine_level);
    const std::size_t cs = coarse.side();
    for (std::size_t J = 0; J < cs; ++J)
        for (std::size_t I = 0; I < cs; ++I) fine(2 * I, 2 * J) = coarse(I, J);
    const std::size_t fs = fine.side();
    // edge midpoints along x1
    for (std::size_t j = 0; j < fs; j += 2)
        for (std::size_t i = 1; i < fs; i += 2) fine(i, j) = 0.5 * (fine(i - 1, j) + fine(i + 1, j));
    // edge midpoints along x2
    for (std::size_t j = 1; j < fs; j += 2)
        for (std::size_t i = 0; i < fs; i += 2) fine(i, j) = 0.5 * (fine(i, j - 1) + fine(i, j + 1));
    // cell centres
    for (std::size_t j = 1; j < fs; j += 2)
        for (std::size_t i = 1; i < fs; i += 2)
            fine(i, j) = 0.25 * (fine(i - 1, j - 1) + fine(i + 1, j - 1) + fine(i - 1, j + 1) +
                                 fine(i + 1, j + 1));
    return fine;
}

/// Repeated prolongation up to `target` (P_ell^L).
inline NodalField prolongate_to(NodalField field, GridLevel target) {
    if (field.level().e0 != target.e0 || field.level().ell > target.ell)
        throw std::invalid_argument("prolongate_to: target level is not finer than the field");
    while (field.level().ell < target.ell) field = prolongate(field);
    return field;
}

/// Injection onto a coarser (or the same) level of the hierarchy.
inline NodalField restrict_to(const NodalField& fine, GridLevel target) {
    const GridLevel& from = fine.level();
    if (from.e0 != target.e0 || target.ell > from.ell || target.ell < 0)
        throw std::invalid_argument("restrict_to: target level is not coarser than the field");
    if (target == from) return fine;
    const std::size_t stride = std::size_t{1} << (from.ell - target.ell);
    NodalField out(target);
    for (std::size_t J = 0; J < out.side(); ++J)
        for (std::size_t I = 0; I < out.side(); ++I) out(I, J) = fine(I * stride, J * stride);
    return out;
}

/// Trapezoidal (mass-lumped) weight of node (i, j): 1 inside, 1/2 on edges,
/// 1/4 at corners.
inline double lumped_weight(std::size_t i, std::size_t j, std::size_t side) {
    const std::size_t last = side - 1;
    double w = 1.0;
    if (i == 0 || i == last) w *= 0.5;
    if (j == 0 || j == last) w *= 0.5;
    return w;
}

inline double inner_l2(const NodalField& a, const NodalField& b) {
    a.require_same_level(b, "inner_l2");
    const std::size_t s = a.side();
    const std::size_t last = s - 1;
    double interior = 0.0;
    double edges = 0.0;
    double corners = 0.0;
    for (std::size_t j = 0; j < s; ++j) {
        const bool jb = (j == 0 || j == last);
        for (std::size_t i = 0; i < s; ++i) {
            const bool ib = (i == 0 || i == last);
            const double ab = a(i, j) * b(i, j);
            if (ib && jb)
                corners += ab;
            else if (ib || jb)
                edges += ab;
            else
                interior += ab;
        }
    }
    const double h = a.level().h();
    return h * h * (interior + 0.5 * edges + 0.25 * corners);
}

inline double norm_l2(const NodalField& a) { return std::sqrt(inner_l2(a, a)); }

struct AdmissibleBox {
    double z_low = -1000.0;
    double z_up = 1000.0;

    void validate() const {
        if (!(z_low <= z_up)) throw std::invalid_argument("AdmissibleBox: z_low must not exceed z_up");
    }
    [[nodiscard]] bool contains(const NodalField& z) const {
        return std::all_of(z.values().begin(), z.values().end(),
                           [&](double v) { return v >= z_low && v <= z_up; });
    }
};

/// Nodewise clamp, the L2 projection onto a constant box under lumped mass.
inline NodalField project_admissible(NodalField z, const AdmissibleBox& box) {
    box.validate();
    for (double& v : z.values()) v = std::clamp(v, box.z_low, box.z_up);
    return z;
}

}  // namespace mlsgd::mesh
