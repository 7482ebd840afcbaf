#include "protoadapt/bootstrap.hpp"
#include "protoadapt/stats.hpp"

#include <doctest.h>

#include <algorithm>
#include <functional>
#include <map>
#include <vector>

using namespace protoadapt;

namespace {

double median_of(const std::vector<double>& data, std::span<const std::size_t> idx) {
  std::vector<double> v;
  for (std::size_t i : idx) v.push_back(data[i]);
  return stats::median(v);
}

// Independent route to the full bootstrap distribution: walk multisets of
// indices (non-decreasing tuples) and weight each by its multinomial count.
std::vector<double> multiset_distribution(const std::vector<double>& data) {
  const std::size_t n = data.size();
  std::vector<double> out;
  std::vector<std::size_t> tuple(n, 0);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t pos, std::size_t start) {
    if (pos == n) {
      std::map<std::size_t, int> counts;
      for (std::size_t i : tuple) ++counts[i];
      double weight = 1;  // n! / prod(c!)
      for (std::size_t k = 2; k <= n; ++k) weight *= static_cast<double>(k);
      for (auto [_, c] : counts)
        for (int k = 2; k <= c; ++k) weight /= k;
      const double stat = median_of(data, tuple);
      for (int w = 0; w < static_cast<int>(weight + 0.5); ++w) out.push_back(stat);
      return;
    }
    for (std::size_t i = start; i < n; ++i) {
      tuple[pos] = i;
      rec(pos + 1, i);
    }
  };
  rec(0, 0);
  return out;
}

}  // namespace

TEST_CASE("exhaustive plan enumerates every tuple once") {
  const auto plan = bootstrap::ResamplePlan::exhaustive();
  CHECK(bootstrap::replicate_count(plan, 4, 4) == 256);
  std::vector<std::size_t> idx(3);
  bootstrap::resample_indices(plan, 0, 3, idx);
  CHECK(idx == std::vector<std::size_t>{0, 0, 0});
  bootstrap::resample_indices(plan, 5, 3, idx);
  CHECK(idx == std::vector<std::size_t>{0, 1, 2});
  bootstrap::resample_indices(plan, 26, 3, idx);
  CHECK(idx == std::vector<std::size_t>{2, 2, 2});
}

TEST_CASE("percentile endpoints match multiset enumeration exactly") {
  for (const std::vector<double> data : {std::vector<double>{0.3, 1.7, 0.2, 5.0, 2.2}, std::vector<double>{1, 2, 3, 4},
                                         std::vector<double>{2.5, 2.5, 9.0}}) {
    const auto reps = bootstrap::replicates(bootstrap::ResamplePlan::exhaustive(), data.size(), data.size(),
                                            [&](std::span<const std::size_t> idx) { return median_of(data, idx); });
    auto oracle = multiset_distribution(data);
    REQUIRE(oracle.size() == reps.size());
    std::sort(oracle.begin(), oracle.end());
    const auto iv = bootstrap::percentile_interval(reps, 0.90);
    CHECK(iv.lo == stats::quantile_sorted(oracle, 0.05));
    CHECK(iv.hi == stats::quantile_sorted(oracle, 0.95));
  }
}

TEST_CASE("random replicates are identical serial and parallel") {
  std::vector<double> data(50);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::sin(static_cast<double>(i));
  const auto plan = bootstrap::ResamplePlan::random(2000, 9);
  auto stat = [&](std::span<const std::size_t> idx) { return median_of(data, idx); };
  CHECK(bootstrap::replicates(plan, 50, 50, stat, Exec::Serial) == bootstrap::replicates(plan, 50, 50, stat, Exec::Parallel));
}

TEST_CASE("bca reduces to percentile without bias or skew") {
  // Symmetric replicates around the estimate and a symmetric jackknife.
  std::vector<double> reps;
  for (int i = -50; i <= 50; ++i) reps.push_back(0.01 * i);
  const std::vector<double> jack{-1.0, 0.0, 1.0};
  const auto pct = bootstrap::percentile_interval(reps, 0.9);
  const auto bca = bootstrap::bca_interval(0.0, reps, jack, 0.9);
  CHECK(bca.lo == doctest::Approx(pct.lo).epsilon(1e-9));
  CHECK(bca.hi == doctest::Approx(pct.hi).epsilon(1e-9));
}

TEST_CASE("bca degenerate replicates give a point interval") {
  const std::vector<double> reps(100, 0.4);
  const auto iv = bootstrap::bca_interval(0.4, reps, std::vector<double>{0.4, 0.4}, 0.9);
  CHECK(iv.lo == 0.4);
  CHECK(iv.hi == 0.4);
}

TEST_CASE("jackknife leaves one out in order") {
  const std::vector<double> data{1, 2, 3};
  const auto j = bootstrap::jackknife(3, [&](std::span<const std::size_t> idx) {
    double s = 0;
    for (auto i : idx) s += data[i];
    return s;
  });
  CHECK(j == std::vector<double>{5, 4, 3});
}
