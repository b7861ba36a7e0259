#include "cultura/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/random.hpp"

namespace cultura::stats {

std::string_view to_string(TestMethod m) noexcept { return m == TestMethod::exact ? "exact" : "normal_approx"; }

std::vector<double> signed_rank_ranks(std::span<const double> nonzero_diffs) {
  const std::size_t n = nonzero_diffs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(nonzero_diffs[a]) < std::abs(nonzero_diffs[b]);
  });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(nonzero_diffs[order[j + 1]]) == std::abs(nonzero_diffs[order[i]])) ++j;
    const double r = static_cast<double>(i + j) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

// Exact two-sided p-value. Average ranks are multiples of 1/2, so doubled
// ranks are integers and the null distribution of 2W+ is a subset-sum count.
double exact_p_value(std::span<const double> ranks, double w_plus) {
  std::vector<long> doubled;
  long total = 0;
  for (double r : ranks) {
    doubled.push_back(std::lround(2.0 * r));
    total += doubled.back();
  }
  std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
  counts[0] = 1.0;
  long reach = 0;
  for (long r : doubled) {
    for (long s = reach; s >= 0; --s) {
      if (counts[static_cast<std::size_t>(s)] != 0.0) counts[static_cast<std::size_t>(s + r)] += counts[static_cast<std::size_t>(s)];
    }
    reach += r;
  }
  const long w2 = std::lround(2.0 * w_plus);
  double le = 0.0;
  double ge = 0.0;
  for (long s = 0; s <= total; ++s) {
    if (s <= w2) le += counts[static_cast<std::size_t>(s)];
    if (s >= w2) ge += counts[static_cast<std::size_t>(s)];
  }
  const double all = std::ldexp(1.0, static_cast<int>(ranks.size()));
  return std::min(1.0, 2.0 * std::min(le, ge) / all);
}

}  // namespace

TestResult wilcoxon_signed_rank(std::span<const double> diffs) {
  if (diffs.empty()) throw InvalidArgument("Wilcoxon test on an empty sample");
  std::vector<double> nz;
  for (double d : diffs) {
    if (!std::isfinite(d)) throw InvalidArgument("Wilcoxon test on a non-finite difference");
    if (d != 0.0) nz.push_back(d);
  }
  if (nz.empty()) throw DegenerateSample("every paired difference is zero");

  const auto ranks = signed_rank_ranks(nz);
  TestResult result;
  result.n_effective = nz.size();
  for (std::size_t i = 0; i < nz.size(); ++i) {
    if (nz[i] > 0) result.statistic += ranks[i];
  }

  const double n = static_cast<double>(nz.size());
  if (nz.size() <= kExactMaxN) {
    result.method = TestMethod::exact;
    result.p_value = exact_p_value(ranks, result.statistic);
    return result;
  }

  result.method = TestMethod::normal_approx;
  double tie_term = 0.0;
  {
    std::vector<double> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie_term += t * t * t - t;
      i = j + 1;
    }
  }
  const double mean = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
  const double dev = result.statistic - mean;
  const double corrected = std::abs(dev) <= 0.5 ? 0.0 : dev - std::copysign(0.5, dev);
  result.z = var > 0.0 ? corrected / std::sqrt(var) : 0.0;
  result.p_value = std::min(1.0, std::erfc(std::abs(result.z) / std::sqrt(2.0)));
  return result;
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw InvalidArgument("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(q, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

ConfidenceInterval bootstrap_ci(std::span<const double> values, BootstrapOptions options) {
  if (values.empty()) throw InvalidArgument("bootstrap of an empty sample");
  if (!(options.level > 0.0 && options.level < 1.0)) throw InvalidArgument("confidence level must lie in (0, 1)");
  if (options.resamples == 0) throw InvalidArgument("bootstrap needs at least one resample");

  const std::size_t n = values.size();
  std::vector<double> means(options.resamples);
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; ++b) {
      Rng rng(io::mix_seed(options.seed, b));
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += values[static_cast<std::size_t>(rng.uniform_index(n))];
      means[b] = s / static_cast<double>(n);
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(options.threads, 1, options.resamples);
  {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (options.resamples + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
      pool.emplace_back(run, std::min(w * chunk, options.resamples), std::min((w + 1) * chunk, options.resamples));
    }
    run(0, std::min(chunk, options.resamples));
  }
  std::sort(means.begin(), means.end());

  ConfidenceInterval ci;
  ci.level = options.level;
  ci.resamples = options.resamples;
  ci.seed = options.seed;
  const double alpha = 1.0 - options.level;
  ci.lower = quantile_sorted(means, alpha / 2.0);
  ci.upper = quantile_sorted(means, 1.0 - alpha / 2.0);
  ci.estimate = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  return ci;
}

}  // namespace cultura::stats
