#pragma once

#include "protoadapt/common.hpp"
#include "protoadapt/parallel.hpp"

#include <cstdint>
#include <span>
#include <vector>

// Resampling core shared by the Fisher energy test, coverage certificates,
// support-size bands and Storey CIs.
namespace protoadapt::bootstrap {

enum class PlanKind {
  Random,      // n_boot draws, replicate b seeded by derive_seed(seed, b)
  Exhaustive,  // every index tuple of pool^sample in lexicographic order
};

struct ResamplePlan {
  PlanKind kind = PlanKind::Random;
  std::size_t n_boot = 1000;
  std::uint64_t seed = 0;

  static ResamplePlan random(std::size_t n_boot, std::uint64_t seed) { return {PlanKind::Random, n_boot, seed}; }
  static ResamplePlan exhaustive() { return {PlanKind::Exhaustive, 0, 0}; }
};

/// Largest pool^sample accepted by an exhaustive plan.
inline constexpr std::size_t kMaxExhaustive = 50'000'000;

/// Number of replicates the plan produces for the given pool and sample sizes.
std::size_t replicate_count(const ResamplePlan& plan, std::size_t pool, std::size_t sample);

/// Writes replicate b's indices (values in [0, pool)) into idx.
void resample_indices(const ResamplePlan& plan, std::size_t b, std::size_t pool, std::span<std::size_t> idx);

/// Evaluates stat(indices) for every replicate of the plan.
template <class Stat>
std::vector<double> replicates(const ResamplePlan& plan, std::size_t pool, std::size_t sample, Stat&& stat,
                               Exec exec = Exec::Parallel) {
  const std::size_t n = replicate_count(plan, pool, sample);
  std::vector<double> out(n);
  for_each_index(exec, n, [&](std::size_t b) {
    std::vector<std::size_t> idx(sample);
    resample_indices(plan, b, pool, idx);
    out[b] = stat(std::span<const std::size_t>(idx));
  });
  return out;
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Equal-tailed percentile interval at the given coverage (e.g. 0.90 -> 5th/95th).
Interval percentile_interval(std::span<const double> reps, double level);

/// Leave-one-out values of stat over a sample of size n.
template <class Stat>
std::vector<double> jackknife(std::size_t n, Stat&& stat) {
  std::vector<double> out(n);
  std::vector<std::size_t> idx(n > 0 ? n - 1 : 0);
  for (std::size_t leave = 0; leave < n; ++leave) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (i != leave) idx[k++] = i;
    out[leave] = stat(std::span<const std::size_t>(idx));
  }
  return out;
}

/// Bias-corrected and accelerated interval. The bias correction uses the
/// tie-adjusted proportion of replicates below the estimate; the acceleration
/// comes from jackknife skewness. Degenerate inputs (all replicates equal, or a
/// proportion of 0 or 1) fall back to the percentile interval.
Interval bca_interval(double estimate, std::span<const double> reps, std::span<const double> jack, double level);

}  // namespace protoadapt::bootstrap
