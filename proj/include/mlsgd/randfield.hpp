#pragma once

// Matern covariance and Gaussian random field sampling by circulant
// embedding. A realization is synthesized on the fine grid of a level pair
// and injected onto the coarse grid, so both levels see the same draw.

#include "mlsgd/fft.hpp"
#include "mlsgd/mesh.hpp"
#include "mlsgd/seeds.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlsgd::randfield {

struct MaternParams {
    double sigma2 = 1.5;
    double nu = 1.0;
    double lambda_kappa = 0.1;

    [[nodiscard]] double kappa() const { return std::sqrt(2.0 * nu) / lambda_kappa; }

    void validate() const {
        if (!(sigma2 > 0.0) || !(nu > 0.0) || !(lambda_kappa > 0.0))
            throw std::invalid_argument("MaternParams: sigma2, nu and lambda_kappa must be positive");
    }
};

/// sigma^2 / (2^(nu-1) Gamma(nu)) (kappa r)^nu K_nu(kappa r)
inline double matern_cov(double r, const MaternParams& p) {
    if (!std::isfinite(r) || r < 0.0) throw std::invalid_argument("matern_cov: distance must be finite and >= 0");
    const double x = p.kappa() * r;
    if (x == 0.0) return p.sigma2;
    // K_nu underflows long before the product matters
    if (x > 700.0) return 0.0;
    const double log_scale = (1.0 - p.nu) * std::log(2.0) - std::lgamma(p.nu);
    const double value = std::exp(log_scale + p.nu * std::log(x)) * std::cyl_bessel_k(p.nu, x);
    return p.sigma2 * value;
}

class EmbeddingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Spectrum of the periodic padded_size x padded_size circulant that embeds
/// the covariance of the (n+1) x (n+1) node grid.
struct EmbeddingPlan {
    mesh::GridLevel level;
    std::size_t padded_size = 0;
    std::vector<double> spectrum;  // eigenvalues after clipping, length padded_size^2
    double clipped_mass = 0.0;     // sum of |negative eigenvalues| that were clipped
    std::vector<double> amplitude;  // sqrt(spectrum / padded_size^2)
    std::shared_ptr<const fft::Plan2d> transform;

    [[nodiscard]] double spectrum_mass() const { return std::accumulate(spectrum.begin(), spectrum.end(), 0.0); }
};

inline constexpr double kClippedMassGate = 1e-3;

inline std::size_t next_pow2(std::size_t v) {
    std::size_t p = 1;
    while (p < v) p <<= 1;
    return p;
}

/// Builds the embedding on a torus of exactly `padded_size` points per side.
/// Throws EmbeddingError when the clipped negative mass exceeds the gate.
inline EmbeddingPlan build_embedding_with_size(mesh::GridLevel level, const MaternParams& p, std::size_t padded_size) {
    p.validate();
    const std::size_t n = level.cells();
    if (padded_size < 2 * n || (padded_size & (padded_size - 1)) != 0)
        throw std::invalid_argument("build_embedding: padded_size must be a power of two >= 2n");

    const std::size_t P = padded_size;
    const double h = level.h();
    auto transform = std::make_shared<const fft::Plan2d>(P, FFTW_FORWARD);

    fft::Buffer base(P * P);
    for (std::size_t j = 0; j < P; ++j) {
        const double dy = static_cast<double>(std::min(j, P - j)) * h;
        for (std::size_t i = 0; i < P; ++i) {
            const double dx = static_cast<double>(std::min(i, P - i)) * h;
            base[j * P + i] = {matern_cov(std::hypot(dx, dy), p), 0.0};
        }
    }
    transform->execute(base);

    EmbeddingPlan plan;
    plan.level = level;
    plan.padded_size = P;
    plan.spectrum.resize(P * P);
    plan.amplitude.resize(P * P);
    for (std::size_t k = 0; k < P * P; ++k) {
        const double lambda = base[k].real();
        if (lambda < 0.0) {
            plan.clipped_mass += -lambda;
            plan.spectrum[k] = 0.0;
        } else {
            plan.spectrum[k] = lambda;
        }
        plan.amplitude[k] = std::sqrt(plan.spectrum[k] / static_cast<double>(P * P));
    }
    plan.transform = std::move(transform);

    const double mass = plan.spectrum_mass();
    if (plan.clipped_mass > kClippedMassGate * mass)
        throw EmbeddingError("build_embedding: clipped negative mass " + std::to_string(plan.clipped_mass) +
                             " exceeds " + std::to_string(kClippedMassGate) + " of the spectrum (" +
                             std::to_string(mass) + ") at padded_size " + std::to_string(P) +
                             "; increase the padding");
    return plan;
}

/// Padding starts at `padding_factor` x n and doubles on gate failure up to 8 x n.
inline EmbeddingPlan build_embedding(mesh::GridLevel level, const MaternParams& p, std::size_t padding_factor = 2) {
    const std::size_t n = level.cells();
    std::size_t factor = std::max<std::size_t>(2, padding_factor);
    for (;;) {
        try {
            return build_embedding_with_size(level, p, next_pow2(factor * n));
        } catch (const EmbeddingError&) {
            if (factor >= 8) throw;
            factor *= 2;
        }
    }
}

/// One realization on plan.level; a pure function of (plan, seed).
inline mesh::NodalField sample_field(const EmbeddingPlan& plan, std::uint64_t seed) {
    const std::size_t P = plan.padded_size;
    fft::Buffer work(P * P);
    for (std::size_t k = 0; k < P * P; ++k) {
        const auto [a, b] = seeds::normal_pair(seed, k);
        work[k] = {plan.amplitude[k] * a, plan.amplitude[k] * b};
    }
    plan.transform->execute(work);
    mesh::NodalField y(plan.level);
    const std::size_t s = y.side();
    for (std::size_t j = 0; j < s; ++j)
        for (std::size_t i = 0; i < s; ++i) y(i, j) = work[j * P + i].real();
    return y;
}

struct CoupledFields {
    mesh::NodalField fine;
    std::optional<mesh::NodalField> coarse;  // empty on level 0
};

inline CoupledFields sample_pair(const EmbeddingPlan& plan_fine, std::uint64_t seed) {
    CoupledFields out{sample_field(plan_fine, seed), std::nullopt};
    if (plan_fine.level.ell >= 1) out.coarse = mesh::restrict_to(out.fine, plan_fine.level.coarser());
    return out;
}

}  // namespace mlsgd::randfield
