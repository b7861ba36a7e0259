#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

/// Wilcoxon signed-rank test and percentile bootstrap intervals.
namespace cultura::stats {

enum class TestMethod { exact, normal_approx };

std::string_view to_string(TestMethod m) noexcept;

struct TestResult {
  /// W+: sum of the (average) ranks of the positive differences.
  double statistic = 0.0;
  /// Two-sided.
  double p_value = 1.0;
  std::size_t n_effective = 0;
  TestMethod method = TestMethod::exact;
  /// Standardized statistic; 0 for the exact method.
  double z = 0.0;
};

/// Largest effective sample size tested with the exact null distribution.
inline constexpr std::size_t kExactMaxN = 25;

/// Drops exact zeros, ranks |d| with average ranks for ties, and returns the
/// two-sided p-value min(1, 2 * min(P(W+ <= w), P(W+ >= w))). Up to
/// kExactMaxN differences the null distribution is exact (all 2^n sign
/// assignments, counted by dynamic programming over doubled rank sums);
/// beyond that a normal approximation with tie and continuity corrections.
/// Throws DegenerateSample when every difference is zero, InvalidArgument on
/// an empty or non-finite sample.
TestResult wilcoxon_signed_rank(std::span<const double> diffs);

/// Average ranks (1-based) of |x| for the non-zero entries, in input order.
std::vector<double> signed_rank_ranks(std::span<const double> nonzero_diffs);

struct ConfidenceInterval {
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.95;
  std::size_t resamples = 10000;
  std::uint64_t seed = 0;
  /// Mean of the original sample.
  double estimate = 0.0;
};

struct BootstrapOptions {
  double level = 0.95;
  std::size_t resamples = 10000;
  std::uint64_t seed = 0;
  /// Worker threads. Each resample draws from its own stream derived from
  /// (seed, resample index), so results do not depend on this.
  std::size_t threads = 1;
};

/// Percentile interval of the resampled mean (linear interpolation between
/// order statistics). Throws InvalidArgument for empty input, a level
/// outside (0, 1), or zero resamples.
ConfidenceInterval bootstrap_ci(std::span<const double> values, BootstrapOptions options = {});

/// Linear-interpolation quantile of sorted data (Hyndman-Fan type 7).
double quantile_sorted(std::span<const double> sorted, double q);

}  // namespace cultura::stats
