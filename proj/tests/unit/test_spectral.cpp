#include "protoadapt/spectral.hpp"
#include "protoadapt/stats.hpp"

#include <doctest.h>

#include <algorithm>

using namespace protoadapt;
using namespace protoadapt::spectral;

TEST_CASE("pca_rank on simple spectra") {
  Mat a = Mat::Zero(3, 3);
  a(0, 0) = 1.0;
  for (double rho : {0.1, 0.5, 0.99}) CHECK(pca_rank(a, rho).r == 1);
  CHECK(pca_rank(Mat::Identity(4, 4), 0.5).r == 2);
  CHECK_THROWS_AS(pca_rank(Mat::Zero(3, 3), 0.9), ValidationError);
  CHECK_THROWS_AS(pca_rank(Mat::Identity(3, 3), 1.0), ValidationError);
}

TEST_CASE("pca_rank recovers the planted rank and is monotone in rho") {
  synth::GeneratorConfig cfg;
  cfg.n_tasks = 200;
  cfg.n_query = 10;
  const auto tasks = synth::generate_corpus(cfg);
  Mat theta(200, cfg.d_theta);
  for (int i = 0; i < 200; ++i) theta.row(i) = tasks[static_cast<std::size_t>(i)].theta_true->transpose();
  CHECK(pca_rank(theta, 0.99).r == 2);
  Rng rng = make_rng(4, 0);
  const Mat noisy = normal_matrix(rng, 40, 6) * Vec::LinSpaced(6, 5.0, 0.2).asDiagonal();
  int prev = 0;
  for (double rho : {0.2, 0.5, 0.8, 0.9, 0.95, 0.99}) {
    const int r = pca_rank(noisy, rho).r;
    CHECK(r >= prev);
    prev = r;
  }
  const auto curve = rank_curve(theta, 0.99, {10, 50, 200}, 1);
  CHECK(curve.back().r == 2);
}

TEST_CASE("fisher spectrum special cases") {
  const auto zero = fisher_from_gradients(Mat::Zero(5, 4), 0.1);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(zero.eigenvalues[i] == doctest::Approx(0.1));
  Mat g(1, 3);
  g << 1, 2, 2;
  const auto one = fisher_from_gradients(g, 0.0);
  CHECK(one.eigenvalues[0] == doctest::Approx(9.0));
  CHECK(std::abs(one.eigenvalues[1]) < 1e-12);
  Mat bad = g;
  bad(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(fisher_from_gradients(bad, 0.0), NumericalError);
}

TEST_CASE("fisher eigenvalues match squared singular values of G / sqrt(n)") {
  Rng rng = make_rng(5, 0);
  const Mat g = normal_matrix(rng, 50, 6);
  const auto s = fisher_from_gradients(g, 0.0);
  Eigen::JacobiSVD<Mat> svd(g / std::sqrt(50.0));
  for (Eigen::Index i = 0; i < 6; ++i) CHECK(std::abs(s.eigenvalues[i] - svd.singularValues()[i] * svd.singularValues()[i]) < 1e-8);
  CHECK(default_fisher_reg(g) == doctest::Approx(1e-6 * g.squaredNorm() / 50.0 / 6.0));
}

TEST_CASE("energy test: full mass in the top r gives the minimal p") {
  FisherSpectrum s;
  s.eigenvalues = Vec(4);
  s.eigenvalues << 3, 2, 0, 0;
  FisherTestConfig cfg;
  cfg.n_boot = 1000;
  cfg.seed = 3;
  const auto rep = fisher_energy_test(s, 4, cfg);
  const auto& last = rep.candidates.back();
  CHECK(last.r_cand == 4);
  CHECK(last.zeta_emp == 1.0);
  CHECK(last.p_raw == doctest::Approx(1.0 / 1001.0));
  CHECK(last.reject);
}

TEST_CASE("energy test matches enumeration of all 4^4 resamples") {
  FisherSpectrum s;
  s.eigenvalues = Vec(4);
  s.eigenvalues << 10.0, 1.0, 0.3, 0.1;
  FisherTestConfig cfg;
  cfg.plan = bootstrap::PlanKind::Exhaustive;
  const auto rep = fisher_energy_test(s, 2, cfg);
  for (const auto& c : rep.candidates) {
    int below = 0, total = 0;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        for (int cc = 0; cc < 4; ++cc)
          for (int d = 0; d < 4; ++d) {
            std::vector<double> v{s.eigenvalues[a], s.eigenvalues[b], s.eigenvalues[cc], s.eigenvalues[d]};
            std::sort(v.rbegin(), v.rend());
            double top = 0, all = 0;
            for (int k = 0; k < 4; ++k) {
              all += v[k];
              if (k < c.r_cand) top += v[k];
            }
            below += top / all <= 0.95;
            ++total;
          }
    CHECK(c.p_raw == doctest::Approx((1.0 + below) / (total + 1.0)).epsilon(1e-15));
  }
}

TEST_CASE("energy test is scale invariant and alpha-monotone") {
  Rng rng = make_rng(6, 0);
  const Mat g = normal_matrix(rng, 30, 5) * Vec::LinSpaced(5, 3.0, 0.1).asDiagonal();
  FisherTestConfig cfg;
  cfg.seed = 8;
  const auto a = fisher_energy_test_gradients(g, 0.0, 3, cfg);
  const auto b = fisher_energy_test_gradients(7.5 * g, 0.0, 3, cfg);
  for (std::size_t i = 0; i < a.candidates.size(); ++i) {
    CHECK(a.candidates[i].p_raw == b.candidates[i].p_raw);
    CHECK(a.candidates[i].reject == b.candidates[i].reject);
    CHECK(a.candidates[i].zeta_emp == doctest::Approx(b.candidates[i].zeta_emp).epsilon(1e-12));
    CHECK(a.candidates[i].p_adj >= a.candidates[i].p_raw);
  }
  cfg.alpha = 0.05;
  const auto loose = fisher_energy_test_gradients(g, 0.0, 3, cfg);
  for (std::size_t i = 0; i < a.candidates.size(); ++i)
    if (a.candidates[i].reject) CHECK(loose.candidates[i].reject);
  cfg.exec = Exec::Serial;
  const auto serial = fisher_energy_test_gradients(g, 0.0, 3, cfg);
  for (std::size_t i = 0; i < a.candidates.size(); ++i) CHECK(serial.candidates[i].p_raw == loose.candidates[i].p_raw);
}

TEST_CASE("reported candidate arithmetic") {
  const auto rep = replay_reported({{18, 0.942, 0.366, false}, {19, 0.949, 0.089, false}}, 0.01);
  CHECK(rep.candidates[0].p_adj == 1.0);
  CHECK(rep.candidates[1].p_adj == doctest::Approx(0.445));
  CHECK_FALSE(rep.selected_r.has_value());
  const auto flagged = replay_reported({{20, 0.951, 0.006, true}}, 0.01);
  CHECK(flagged.candidates[0].flagged);
  CHECK_FALSE(flagged.candidates[0].reject);
}

TEST_CASE("candidate ranks are clipped to valid indices") {
  CHECK(candidate_ranks(2, 8) == std::vector<int>{1, 2, 3, 4});
  CHECK(candidate_ranks(7, 8) == std::vector<int>{5, 6, 7, 8});
  FisherSpectrum z;
  z.eigenvalues = Vec::Zero(3);
  CHECK_THROWS_AS(fisher_energy_test(z, 1, FisherTestConfig{}), NumericalError);
}

TEST_CASE("support-size bands") {
  Mat same(6, 3);
  for (int i = 0; i < 6; ++i) same.row(i) << 1, 2, 0;
  for (const auto& row : fisher_ci_vs_support(same, {2, 4, 6}, 2, bootstrap::ResamplePlan::random(200, 1), 0.0))
    CHECK(row.width == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng = make_rng(9, 0);
  const Mat two = normal_matrix(rng, 2, 3);
  const auto rows = fisher_ci_vs_support(two, {2}, 1, bootstrap::ResamplePlan::exhaustive(), 0.0);
  std::vector<double> lead;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const Mat f = (two.row(a).transpose() * two.row(a) + two.row(b).transpose() * two.row(b)) / 2.0;
      lead.push_back(Eigen::SelfAdjointEigenSolver<Mat>(f).eigenvalues().maxCoeff());
    }
  CHECK(rows[0].p5 == doctest::Approx(stats::quantile(lead, 0.05)).epsilon(1e-12));
  CHECK(rows[0].p95 == doctest::Approx(stats::quantile(lead, 0.95)).epsilon(1e-12));
  const auto full = fisher_ci_vs_support(normal_matrix(rng, 10, 3), {10}, 1, bootstrap::ResamplePlan::random(300, 2));
  CHECK(full[0].width > 0.0);
  CHECK_THROWS_AS(fisher_ci_vs_support(two, {3}, 1, bootstrap::ResamplePlan::random(10, 1)), ValidationError);
}

TEST_CASE("JL outside energy") {
  const int d = 5;
  Rng rng = make_rng(10, 0);
  // Adapters and Fisher mass inside span(e1, e2).
  Mat theta = Mat::Zero(20, d);
  theta.leftCols(2) = normal_matrix(rng, 20, 2);
  Mat f = Mat::Zero(d, d);
  f.topLeftCorner(2, 2) << 2.0, 0.3, 0.3, 1.0;
  JlConfig cfg;
  cfg.s = d;
  cfg.kind = MapKind::Orthogonal;
  cfg.n_boot = 200;
  const auto inside = jl_outside_energy(theta, {f}, 2, cfg);
  CHECK(inside.upper95 < 1e-12);
  CHECK(inside.accepted);

  const Mat iso_theta = normal_matrix(rng, 30, d);
  const auto iso = jl_outside_energy(iso_theta, {Mat::Identity(d, d)}, d - 1, cfg);
  CHECK(iso.mean == doctest::Approx(1.0 / d).epsilon(1e-10));

  // Gaussian maps: Monte-Carlo mean of tr((I - PP^T) R R^T) / tr(R R^T).
  cfg.kind = MapKind::Gaussian;
  cfg.s = d - 1;
  cfg.n_maps = 400;
  const auto g = jl_outside_energy(iso_theta, {Mat::Identity(d, d)}, d - 2, cfg);
  CHECK(g.mean > 0.0);
  CHECK(g.mean < 0.5);

  cfg.s = 2;
  CHECK_THROWS_AS(jl_outside_energy(theta, {f}, 2, cfg), ValidationError);
  cfg.s = d;
  cfg.threshold = 0.2;
  CHECK_THROWS_AS(jl_outside_energy(theta, {f}, 2, cfg), ValidationError);
}

TEST_CASE("JL threshold interpretation") {
  // An upper bound of 0.03 passes at 0.05 and fails at 0.01.
  for (double thr : {0.05, 0.01}) {
    JlReport r;
    r.upper95 = 0.03;
    r.accepted = r.upper95 <= thr;
    CHECK(r.accepted == (thr == 0.05));
  }
}

TEST_CASE("sequential selection on exact rank-2 data") {
  Rng rng = make_rng(12, 0);
  const Mat theta = normal_matrix(rng, 40, 2) * normal_matrix(rng, 2, 6);
  const auto res = sequential_r_selection(theta, 2, 500, 1);
  CHECK(res.selected_r == 2);
  CHECK(res.steps.front().reject);
  CHECK(res.steps.back().p_value == 1.0);
  CHECK_THROWS_AS(sequential_r_selection(theta.topRows(2), 2, 100, 1), ValidationError);
}

TEST_CASE("degenerate improvements give p = 1") {
  const std::vector<double> zeros(10, 0.0);
  CHECK(paired_bootstrap_p(zeros, 100, 1, 0.0) == 1.0);
  Mat dup(10, 3);
  Rng rng = make_rng(13, 0);
  const Vec c = normal_vector(rng, 10);
  dup << c, c, c;
  const Vec e1 = heldout_reconstruction_errors(dup, 1);
  const Vec e2 = heldout_reconstruction_errors(dup, 2);
  const Vec diff = e1 - e2;
  CHECK(paired_bootstrap_p(to_std(diff), 200, 1, 1e-12 * dup.squaredNorm()) == 1.0);
}

TEST_CASE("paired bootstrap matches an independent implementation on the same seed stream") {
  Rng rng = make_rng(14, 0);
  std::vector<double> diffs(20);
  for (auto& d : diffs) d = 0.05 + standard_normal(rng) * 0.2;
  const std::size_t B = 999;
  const double p = paired_bootstrap_p(diffs, B, 77, 0.0);
  std::size_t count = 0;
  for (std::size_t b = 0; b < B; ++b) {
    Rng r = make_rng(77, b);
    double s = 0;
    for (std::size_t i = 0; i < diffs.size(); ++i) s += diffs[uniform_index(r, diffs.size())];
    count += s / diffs.size() <= 0.0;
  }
  CHECK(p == doctest::Approx((1.0 + count) / (B + 1.0)).epsilon(1e-15));
}
