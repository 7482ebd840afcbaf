#include "protoadapt/bootstrap.hpp"

#include "protoadapt/stats.hpp"

#include <algorithm>
#include <cmath>

namespace protoadapt::bootstrap {

namespace {
// (1 - level) / 2 snapped to 1e-9 so that level 0.90 yields exactly 0.05 and 0.95.
double tail_mass(double level) { return std::nearbyint(0.5 * (1.0 - level) * 1e9) / 1e9; }
}  // namespace

std::size_t replicate_count(const ResamplePlan& plan, std::size_t pool, std::size_t sample) {
  if (pool == 0) throw ValidationError("bootstrap: empty pool");
  if (plan.kind == PlanKind::Random) {
    if (plan.n_boot == 0) throw ValidationError("bootstrap: n_boot must be positive");
    return plan.n_boot;
  }
  std::size_t total = 1;
  for (std::size_t i = 0; i < sample; ++i) {
    if (total > kMaxExhaustive / pool) throw ValidationError("bootstrap: exhaustive plan too large");
    total *= pool;
  }
  return total;
}

void resample_indices(const ResamplePlan& plan, std::size_t b, std::size_t pool, std::span<std::size_t> idx) {
  if (plan.kind == PlanKind::Random) {
    Rng rng = make_rng(plan.seed, b);
    for (auto& i : idx) i = uniform_index(rng, pool);
    return;
  }
  // Base-`pool` digits of b, most significant first.
  for (std::size_t k = idx.size(); k-- > 0;) {
    idx[k] = b % pool;
    b /= pool;
  }
}

Interval percentile_interval(std::span<const double> reps, double level) {
  if (reps.empty()) throw ValidationError("percentile interval of no replicates");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("interval level outside (0, 1)");
  std::vector<double> s(reps.begin(), reps.end());
  std::sort(s.begin(), s.end());
  const double tail = tail_mass(level);
  return {stats::quantile_sorted(s, tail), stats::quantile_sorted(s, 1.0 - tail)};
}

Interval bca_interval(double estimate, std::span<const double> reps, std::span<const double> jack, double level) {
  if (reps.empty()) throw ValidationError("BCa interval of no replicates");
  std::vector<double> s(reps.begin(), reps.end());
  std::sort(s.begin(), s.end());
  if (s.front() == s.back()) return {s.front(), s.back()};

  double below = 0.0;
  for (double v : s) {
    if (v < estimate)
      below += 1.0;
    else if (v == estimate)
      below += 0.5;
  }
  const double prop = below / static_cast<double>(s.size());
  if (prop <= 0.0 || prop >= 1.0) return percentile_interval(reps, level);
  const double z0 = stats::normal_quantile(prop);

  double accel = 0.0;
  if (jack.size() >= 2) {
    const double jm = stats::mean(jack);
    double num = 0.0, den = 0.0;
    for (double v : jack) {
      const double d = jm - v;
      num += d * d * d;
      den += d * d;
    }
    if (den > 0.0) accel = num / (6.0 * std::pow(den, 1.5));
  }

  const double tail = tail_mass(level);
  auto adjusted = [&](double alpha) {
    const double z = stats::normal_quantile(alpha);
    const double denom = 1.0 - accel * (z0 + z);
    return stats::normal_cdf(z0 + (z0 + z) / denom);
  };
  const double a1 = std::clamp(adjusted(tail), 0.0, 1.0);
  const double a2 = std::clamp(adjusted(1.0 - tail), 0.0, 1.0);
  return {stats::quantile_sorted(s, a1), stats::quantile_sorted(s, a2)};
}

}  // namespace protoadapt::bootstrap
