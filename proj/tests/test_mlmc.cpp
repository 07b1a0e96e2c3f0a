#include "mlsgd/mlmc.hpp"
#include "mlsgd/pde.hpp"
#include "mlsgd/randfield.hpp"
#include "mlsgd/seeds.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace mlsgd;
using mesh::GridLevel;
using mesh::NodalField;

namespace {

mlmc::ProblemSetup small_setup(int e0 = 3) {
    mlmc::ProblemSetup ps;
    ps.e0 = e0;
    return ps;
}

NodalField smooth_control(GridLevel g) {
    return mesh::sample_function(g, [](double a, double b) { return 40.0 * a * (1 - a) * b * (1 - b); });
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

double rel_field(const NodalField& a, const NodalField& b) { return mesh::norm_l2(a - b) / mesh::norm_l2(b); }

// Independent per-sample evaluation from the building blocks.
struct DirectSample {
    NodalField u, q;
    double Q;
};

DirectSample direct(const mlmc::ProblemSetup& ps, GridLevel g, const NodalField& z, std::uint64_t seed) {
    const NodalField y = randfield::sample_field(randfield::build_embedding(g, ps.matern), seed);
    const NodalField d = mesh::sample_function(g, ps.target);
    auto u = pde::solve_state(y, z, ps.solver).first;
    auto q = pde::solve_adjoint(y, u, d, ps.solver).first;
    const double Q = pde::misfit(u, d);
    return {std::move(u), std::move(q), Q};
}

mlmc::CoupledSample constant_sample(GridLevel g, double p, double Y) {
    mlmc::CoupledSample s;
    s.p = NodalField(g, p);
    s.v = NodalField(g, 0.0);
    s.Y = Y;
    s.cost = 1.0;
    return s;
}

}  // namespace

TEST(BatchEstimation, SingleSampleIsThatSample) {
    const auto ps = small_setup();
    mlmc::Estimator est(ps);
    const GridLevel g{1, 3};
    const NodalField z = smooth_control(g);
    const auto le = est.batch_estimation(z, 1, 0, 5);
    const auto ref = direct(ps, g, z, seeds::mix(5, 0, 1, 1));
    EXPECT_EQ(le.mean, ref.q);
    EXPECT_EQ(le.stats.M, 1u);
    const double zn = mesh::norm_l2(z);
    EXPECT_DOUBLE_EQ(le.J, ref.Q + 0.5 * ps.lambda * zn * zn);
}

TEST(BatchEstimation, MatchesBruteForceAverage) {
    const auto ps = small_setup();
    mlmc::Estimator est(ps);
    const GridLevel g{1, 3};
    const NodalField z = smooth_control(g);
    const auto le = est.batch_estimation(z, 4, 3, 11);
    NodalField sum(g);
    double Qsum = 0.0;
    std::vector<NodalField> qs;
    for (std::size_t m = 1; m <= 4; ++m) {
        auto s = direct(ps, g, z, seeds::mix(11, 3, 1, m));
        sum += s.q;
        Qsum += s.Q;
        qs.push_back(s.q);
    }
    sum *= 0.25;
    EXPECT_LT(rel_field(le.mean, sum), 1e-14);
    EXPECT_LT(rel(le.stats.objective(), Qsum / 4), 1e-14);
    // two-pass second-order sum
    double s2 = 0.0;
    for (const auto& q : qs) {
        const double n = mesh::norm_l2(q - sum);
        s2 += n * n;
    }
    EXPECT_LT(rel(le.stats.s2_p, s2), 1e-10);
}

TEST(BatchEstimation, DeterministicAcrossCallsAndWorkers) {
    auto ps = small_setup();
    ps.workers = 1;
    mlmc::Estimator serial(ps);
    ps.workers = 4;
    mlmc::Estimator threaded(ps);
    const NodalField z = smooth_control({1, 3});
    const auto a = serial.batch_estimation(z, 21, 2, 9);
    const auto b = serial.batch_estimation(z, 21, 2, 9);
    const auto c = threaded.batch_estimation(z, 21, 2, 9);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.mean, c.mean);
    EXPECT_EQ(a.J, c.J);
    EXPECT_EQ(a.stats.s2_p, c.stats.s2_p);
    EXPECT_EQ(a.stats.sum_cost, c.stats.sum_cost);
}

TEST(BatchEstimation, FailureNamesTheSeed) {
    auto ps = small_setup();
    ps.solver = {1e-14, 1, 0.8};
    mlmc::Estimator est(ps);
    try {
        static_cast<void>(est.batch_estimation(smooth_control({1, 3}), 3, 0, 4));
        FAIL() << "expected EstimationError";
    } catch (const mlmc::EstimationError& e) {
        EXPECT_EQ(e.index, 1u);
        EXPECT_EQ(e.seed, seeds::mix(4, 0, 1, 1));
        EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
    }
}

TEST(LevelPair, DeterministicCoefficientHasNoVariance) {
    auto ps = small_setup();
    ps.deterministic_y = true;
    mlmc::Estimator est(ps);
    const auto le = est.level_pair_estimation(smooth_control({2, 3}), 6, 2, 0, 1);
    EXPECT_LT(le.stats.s2_p, 1e-16 * std::max(1.0, le.stats.norm_mean_p()));
    EXPECT_GT(le.stats.norm_mean_p(), 0.0);
}

TEST(LevelPair, DifferenceOfCoupledSolves) {
    const auto ps = small_setup();
    mlmc::Estimator est(ps);
    const GridLevel fine{2, 3}, coarse{1, 3};
    const NodalField z = smooth_control(fine);
    const auto le = est.level_pair_estimation(z, 1, 2, 0, 3);
    const std::uint64_t seed = seeds::mix(3, 0, 2, 1);
    const NodalField y = randfield::sample_field(randfield::build_embedding(fine, ps.matern), seed);
    const NodalField yc = mesh::restrict_to(y, coarse);
    auto solve = [&](const NodalField& yy, GridLevel g) {
        const NodalField d = mesh::sample_function(g, ps.target);
        auto u = pde::solve_state(yy, mesh::restrict_to(z, g), ps.solver).first;
        auto q = pde::solve_adjoint(yy, u, d, ps.solver).first;
        return std::pair{q, pde::misfit(u, d)};
    };
    auto [qf, Qf] = solve(y, fine);
    auto [qc, Qc] = solve(yc, coarse);
    EXPECT_EQ(le.mean, qf - mesh::prolongate(qc));
    EXPECT_DOUBLE_EQ(le.J, Qf - Qc);
    EXPECT_THROW(est.level_pair_estimation(z, 1, 0, 0, 3), std::invalid_argument);
}

TEST(LevelPair, SameSeedsBitwise) {
    mlmc::Estimator est(small_setup());
    const NodalField z = smooth_control({2, 3});
    const auto a = est.level_pair_estimation(z, 5, 1, 7, 2);
    const auto b = est.level_pair_estimation(z, 5, 1, 7, 2);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.J, b.J);
}

TEST(Multilevel, SingleLevelEqualsBatchPlusControlTerm) {
    mlmc::Estimator est(small_setup());
    const NodalField z = smooth_control({0, 3});
    const auto ge = est.multilevel_estimation(z, {{6}}, 1, 8);
    const auto le = est.batch_estimation(z, 6, 1, 8);
    EXPECT_EQ(ge.q_hat, le.mean);
    EXPECT_DOUBLE_EQ(ge.J_hat, le.J);
    EXPECT_TRUE(std::isnan(ge.err_num));
    EXPECT_FALSE(std::isnan(ge.err_sam));
}

TEST(Multilevel, TelescopesUnderSharedSeeds) {
    auto ps = small_setup();
    ps.coupling = mlmc::Coupling::shared;
    mlmc::Estimator est(ps);
    const GridLevel finest{3, 3};
    const NodalField z = smooth_control(finest);
    const std::size_t M = 5;
    const auto ge = est.multilevel_estimation(z, {{M, M, M, M}}, 0, 13);
    const auto fine = est.batch_estimation(z, M, 0, 13);
    EXPECT_LT(rel_field(ge.q_hat, fine.mean), 1e-12);
    EXPECT_LT(rel(ge.J_hat, fine.J), 1e-12);
    double sumY = 0.0;
    for (const auto& s : ge.per_level) sumY += s.objective();
    EXPECT_LT(rel(sumY, fine.stats.objective()), 1e-12);
    const NodalField g_expected = ps.lambda * z - ge.q_hat;
    EXPECT_EQ(ge.g_hat, g_expected);
}

TEST(Multilevel, FillsErrorEstimates) {
    mlmc::Estimator est(small_setup());
    const auto ge = est.multilevel_estimation(smooth_control({2, 3}), {{8, 6, 4}}, 0, 1);
    ASSERT_EQ(ge.per_level.size(), 3u);
    EXPECT_NEAR(ge.err_sam, mlmc::sampling_error(ge.per_level), 0.0);
    EXPECT_GE(ge.err_sam, 0.0);
    EXPECT_TRUE(ge.err_num >= 0.0);
    double cost = 0.0;
    for (const auto& s : ge.per_level) cost += s.sum_cost;
    EXPECT_DOUBLE_EQ(ge.total_cost, cost);
    EXPECT_THROW(est.multilevel_estimation(smooth_control({1, 3}), {{8, 6, 4}}, 0, 1), std::invalid_argument);
}

TEST(Multilevel, LevelDifferencesDecay) {
    mlmc::Estimator est(mlmc::ProblemSetup{});
    const auto ge = est.multilevel_estimation(smooth_control({2, 4}), {{16, 16, 16}}, 0, 3);
    EXPECT_GT(ge.per_level[1].norm_mean_p(), ge.per_level[2].norm_mean_p());
    EXPECT_GT(ge.alpha_hat, 0.0);
    EXPECT_FALSE(ge.no_decay);
}

TEST(SamplingError, HandFixture) {
    mlmc::LevelStats s(0, {0, 2});
    s.add(constant_sample({0, 2}, 1.0, 0.0));
    s.add(constant_sample({0, 2}, -1.0, 0.0));
    EXPECT_NEAR(s.s2_p, 2.0, 1e-14);
    const std::vector<mlmc::LevelStats> v{s};
    EXPECT_NEAR(mlmc::sampling_error(v), 1.0, 1e-14);
}

TEST(SamplingError, ZeroAndScaling) {
    mlmc::LevelStats a(0, {0, 2}), b(1, {1, 2});
    a.M = 4;
    a.s2_p = 0.0;
    b.M = 5;
    b.s2_p = 0.0;
    EXPECT_EQ(mlmc::sampling_error(std::vector{a, b}), 0.0);
    // s2 grows with M at fixed variance, so the estimate scales like 1/M
    a.s2_p = 3.0 * (a.M - 1);
    b.s2_p = 0.5 * (b.M - 1);
    const double e1 = mlmc::sampling_error(std::vector{a, b});
    a.M *= 2;
    b.M *= 2;
    a.s2_p = 3.0 * (a.M - 1);
    b.s2_p = 0.5 * (b.M - 1);
    EXPECT_NEAR(mlmc::sampling_error(std::vector{a, b}), e1 / 2, 1e-15);
}

TEST(SamplingError, RejectsSingleSample) {
    mlmc::LevelStats s(0, {0, 2});
    s.add(constant_sample({0, 2}, 1.0, 0.0));
    EXPECT_THROW(mlmc::sampling_error(std::vector{s}), std::invalid_argument);
}

TEST(SamplingError, StreamingMatchesTwoPass) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(1e3, 1.0);  // large mean stresses cancellation
    const GridLevel g{0, 3};
    mlmc::LevelStats s(0, g);
    std::vector<NodalField> xs;
    for (int m = 0; m < 50; ++m) {
        mlmc::CoupledSample c;
        c.p = NodalField(g);
        for (double& v : c.p.values()) v = n(rng);
        c.v = NodalField(g);
        xs.push_back(c.p);
        s.add(c);
    }
    NodalField mean(g);
    for (const auto& x : xs) mean += x;
    mean *= 1.0 / 50;
    double s2 = 0.0;
    for (const auto& x : xs) {
        const double d = mesh::norm_l2(x - mean);
        s2 += d * d;
    }
    EXPECT_LT(rel(s.s2_p, s2), 1e-10);
}

TEST(SamplingError, UnbiasedForVarianceSum) {
    auto ps = small_setup(2);
    mlmc::Estimator est(ps);
    const NodalField z = smooth_control({0, 2});
    const auto truth = est.batch_estimation(z, 10000, 0, 1000);
    const double V = truth.stats.var_p();
    const int reps = 200;
    const std::size_t M = 4;
    std::vector<double> errs;
    for (int r = 0; r < reps; ++r) {
        const auto le = est.batch_estimation(z, M, r + 1, 77);
        errs.push_back(mlmc::sampling_error(std::vector{le.stats}) * static_cast<double>(M));
    }
    double mean = 0.0;
    for (double e : errs) mean += e;
    mean /= reps;
    double ss = 0.0;
    for (double e : errs) ss += (e - mean) * (e - mean);
    const double se = std::sqrt(ss / (reps - 1) / reps);
    EXPECT_NEAR(mean, V, 3.0 * se);
}

TEST(NumericalError, ExactGeometricData) {
    const std::vector<double> norms{1.0, 0.5, 0.25, 0.125};
    const auto b = mlmc::numerical_error_from_norms(norms);
    EXPECT_NEAR(b.alpha_hat, 1.0, 1e-12);
    EXPECT_NEAR(b.err_num, 0.015625, 1e-14);
    EXPECT_FALSE(b.no_decay);
}

TEST(NumericalError, ClosedFormRateTwo) {
    const double c = 0.37;
    std::vector<double> norms;
    for (int l = 0; l <= 4; ++l) norms.push_back(c * std::exp2(-2.0 * l));
    const auto b = mlmc::numerical_error_from_norms(norms);
    EXPECT_NEAR(b.alpha_hat, 2.0, 1e-12);
    const double expected = std::pow(c * std::exp2(-8.0) / 3.0, 2);
    EXPECT_NEAR(b.err_num / expected, 1.0, 1e-10);
}

TEST(NumericalError, NoisyData) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 0.01);
    for (double alpha : {0.8, 1.5, 2.2}) {
        std::vector<double> norms;
        for (int l = 0; l <= 6; ++l) norms.push_back(std::exp2(-alpha * l) * (1.0 + n(rng)));
        EXPECT_NEAR(mlmc::numerical_error_from_norms(norms).alpha_hat, alpha, 0.1);
    }
}

TEST(NumericalError, NoDecaySentinel) {
    const auto b = mlmc::numerical_error_from_norms(std::vector<double>{1.0, 0.2, 0.4, 0.8});
    EXPECT_TRUE(b.no_decay);
    EXPECT_TRUE(std::isinf(b.err_num));
    EXPECT_THROW(mlmc::numerical_error_from_norms(std::vector<double>{1.0, 0.5}), std::invalid_argument);
}
