#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

namespace mlsgd {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Per-level columns of one optimization step.
struct LevelSummary {
    int ell = 0;
    std::size_t M = 0;
    double norm_mean_p = kNaN;
    double s2_p = kNaN;
    double mean_cost = kNaN;
};

/// One row of the run log.
struct IterationRecord {
    int k = 0;
    int L = 0;  // finest level of the step
    double J_hat = kNaN;
    double grad_norm = kNaN;
    double t_k = kNaN;
    double eps_k = kNaN;
    double err_sam = kNaN;
    double err_num = kNaN;
    double alpha_hat = kNaN;
    bool step_fallback = false;
    double cumulative_cost = 0.0;
    double remaining_T = kNaN;
    double remaining_Mem = kNaN;
    std::vector<LevelSummary> levels;
    std::string stop_reason;  // final row only
};

}  // namespace mlsgd
