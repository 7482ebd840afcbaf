#include "protoadapt/prototypes.hpp"
#include "protoadapt/stats.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>

using namespace protoadapt;
using namespace protoadapt::proto;

namespace {

Mat rank_r_data(std::uint64_t seed, int n, int r, int d) {
  Rng rng = make_rng(seed, 0);
  return normal_matrix(rng, n, r) * normal_matrix(rng, r, d);
}

// Least squares on a fixed support through the SVD, independent of the library path.
double ls_residual(const Vec& u, const Mat& m, const std::vector<int>& sup) {
  Mat a(u.size(), static_cast<Eigen::Index>(sup.size()));
  for (std::size_t c = 0; c < sup.size(); ++c) a.col(static_cast<Eigen::Index>(c)) = m.row(sup[c]).transpose();
  const Vec coef = a.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(u);
  return (u - a * coef).norm();
}

}  // namespace

TEST_CASE("projector bases are orthonormal and span the same subspace") {
  const Mat theta = rank_r_data(1, 30, 2, 6);
  for (bool canon : {true, false}) {
    const auto p = fit_projector(theta, 2, canon);
    CHECK((p.q.transpose() * p.q - Mat::Identity(2, 2)).norm() < 1e-10);
    CHECK((p.pca_basis.transpose() * p.pca_basis - Mat::Identity(2, 2)).norm() < 1e-10);
    for (int i = 0; i < 30; ++i) {
      const Vec t = theta.row(i).transpose();
      CHECK((p.embed(p.project(t)) - t).norm() < 1e-9);
      CHECK((p.lift(p.coords(t)) - t).norm() < 1e-9);
    }
  }
}

TEST_CASE("K = N reproduces every adapter with zero SSE") {
  const Mat theta = rank_r_data(2, 12, 2, 5);
  const auto p = fit_projector(theta, 2);
  const auto res = cluster_prototypes(theta, p, 12, 3, 5);
  CHECK(res.sse < 1e-20);
  for (int i = 0; i < 12; ++i) {
    double best = 1e300;
    for (int k = 0; k < 12; ++k) best = std::min(best, (res.memory.M().row(k) - theta.row(i)).norm());
    CHECK(best < 1e-9);
  }
  CHECK_THROWS_AS(cluster_prototypes(theta, p, 13, 1, 5), ValidationError);
}

TEST_CASE("two separated blobs give their means") {
  Mat pts(8, 2);
  pts << 10.1, 0, 9.9, 0, 10, 0.1, 10, -0.1, -10.1, 0, -9.9, 0, -10, 0.1, -10, -0.1;
  const auto km = kmeans(pts, 2, 5, 3);
  std::vector<Vec> c{km.centroids.row(0).transpose(), km.centroids.row(1).transpose()};
  std::sort(c.begin(), c.end(), [](const Vec& a, const Vec& b) { return a[0] < b[0]; });
  CHECK((c[0] - Vec::Unit(2, 0) * -10.0).norm() < 1e-6);
  CHECK((c[1] - Vec::Unit(2, 0) * 10.0).norm() < 1e-6);
  CHECK(km.stability == doctest::Approx(1.0));
  CHECK(kmeans(pts, 2, 4, 3, 100, Exec::Serial).labels == km.labels);
}

TEST_CASE("adjusted rand index") {
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 1, 0, 1}) < 0.0);
}

TEST_CASE("l0_fit trivial cases") {
  Rng rng = make_rng(3, 0);
  const Mat m = normal_matrix(rng, 5, 3);
  const Vec u = 2.5 * m.row(3).transpose();
  for (L0Mode mode : {L0Mode::Omp, L0Mode::Exact}) {
    const auto f = l0_fit(u, m, 1, mode);
    CHECK(f.residual < 1e-12);
    CHECK(f.w[3] == doctest::Approx(2.5));
    CHECK(f.w.cwiseAbs().sum() == doctest::Approx(2.5));
  }
  Mat ortho = Mat::Zero(2, 3);
  ortho(0, 0) = 1.0;
  ortho(1, 1) = 1.0;
  const Vec e3 = Vec::Unit(3, 2) * 4.0;
  for (L0Mode mode : {L0Mode::Omp, L0Mode::Exact}) {
    const auto f = l0_fit(e3, ortho, 2, mode);
    CHECK(f.residual == doctest::Approx(4.0));
    CHECK(f.w.isZero());
  }
  Mat zero_row = m;
  zero_row.row(1).setZero();
  CHECK_THROWS_AS(l0_fit(u, zero_row, 1), NumericalError);
  CHECK_THROWS_AS(l0_fit(u, m, 4), ValidationError);
}

TEST_CASE("exact mode equals support enumeration and bounds OMP") {
  Rng rng = make_rng(4, 0);
  for (int inst = 0; inst < 30; ++inst) {
    const Mat m = normal_matrix(rng, 6, 3);
    const Vec u = normal_vector(rng, 3);
    double best = u.norm();
    for (int a = 0; a < 6; ++a)
      for (int b = a + 1; b < 6; ++b) best = std::min(best, ls_residual(u, m, {a, b}));
    const auto exact = l0_fit(u, m, 2, L0Mode::Exact);
    const auto omp = l0_fit(u, m, 2, L0Mode::Omp);
    CHECK(exact.residual == doctest::Approx(best).epsilon(1e-10));
    CHECK(omp.residual >= exact.residual - 1e-12);
    CHECK((u - m.transpose() * exact.w).norm() == doctest::Approx(exact.residual).epsilon(1e-10));
    double prev = u.norm();
    for (int s = 1; s <= 3; ++s) {
      const double r = l0_fit(u, m, s).residual;
      CHECK(r <= prev + 1e-12);
      prev = r;
    }
  }
}

TEST_CASE("diagnostics") {
  const Mat eye = Mat::Identity(3, 3);
  const auto d = diagnostics(eye);
  CHECK(d.kappa == doctest::Approx(1.0));
  CHECK(d.mu == doctest::Approx(0.0));
  Mat dup(3, 3);
  dup << 1, 2, 3, 1, 2, 3, 0, 1, 0;
  CHECK(diagnostics(dup).mu == doctest::Approx(1.0));

  Rng rng = make_rng(5, 0);
  const Mat m = normal_matrix(rng, 5, 3);
  Eigen::SelfAdjointEigenSolver<Mat> es(m.transpose() * m);
  const double kappa = std::sqrt(es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff());
  const Mat gram = m * m.transpose();
  double mu = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      if (i != j) mu = std::max(mu, std::abs(gram(i, j)) / std::sqrt(gram(i, i) * gram(j, j)));
  const auto dm = diagnostics(m);
  CHECK(std::abs(dm.kappa - kappa) < 1e-10 * kappa);
  CHECK(std::abs(dm.mu - mu) < 1e-10);

  Mat perm = m;
  perm.row(0).swap(perm.row(4));
  perm.row(2) *= 3.0;
  CHECK(diagnostics(perm).mu == doctest::Approx(dm.mu).epsilon(1e-12));
  Mat sing(3, 3);
  sing << 1, 0, 0, 0, 1, 0, 1, 1, 0;
  CHECK(std::isinf(diagnostics(sing).kappa));
}

TEST_CASE("freezing is one-way") {
  const Mat theta = rank_r_data(6, 10, 2, 4);
  auto res = cluster_prototypes(theta, fit_projector(theta, 2), 3, 2, 1);
  auto& mem = res.memory;
  CHECK_THROWS_AS(mem.set_certificate(CoverageCertificate{}), ValidationError);
  mem.freeze();
  CHECK_THROWS_AS(mem.set_rows(Mat::Zero(2, 4)), FrozenError);
  CHECK_THROWS_AS(merge_prototypes(mem, MergeConfig{}), FrozenError);
  mem.set_certificate(CoverageCertificate{});
  CHECK_THROWS_AS(mem.set_certificate(CoverageCertificate{}), FrozenError);
}

TEST_CASE("coverage certificate limiting cases") {
  const Mat theta = rank_r_data(7, 8, 2, 4);
  const auto p = fit_projector(theta, 2);
  PrototypeMemory mem(theta.topRows(2), p);
  CHECK_THROWS_AS(coverage_certificate(mem, theta, 2, bootstrap::ResamplePlan::random(100, 1)), ValidationError);
  mem.freeze();
  const auto c = coverage_certificate(mem, theta, 2, bootstrap::ResamplePlan::random(1000, 1));
  CHECK(c.eps_hat < 1e-10);
  CHECK(c.pct90.hi < 1e-10);
  CHECK(c.bca90.hi < 1e-10);
  CHECK(c.n_boot == 1000);

  const auto single = certificate_from_residuals({0.7}, bootstrap::ResamplePlan::random(200, 1));
  CHECK(single.pct90.lo == single.pct90.hi);
  CHECK(single.bca90.lo == single.bca90.hi);
}

TEST_CASE("certificate percentile endpoints match 5^5 enumeration") {
  const std::vector<double> res{0.4, 0.1, 0.9, 0.3, 0.6};
  const auto c = certificate_from_residuals(res, bootstrap::ResamplePlan::exhaustive());
  std::vector<double> meds;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b)
      for (int cc = 0; cc < 5; ++cc)
        for (int d = 0; d < 5; ++d)
          for (int e = 0; e < 5; ++e) meds.push_back(stats::median(std::vector<double>{res[a], res[b], res[cc], res[d], res[e]}));
  std::sort(meds.begin(), meds.end());
  CHECK(c.n_boot == 3125);
  CHECK(c.pct90.lo == stats::quantile_sorted(meds, 0.05));
  CHECK(c.pct90.hi == stats::quantile_sorted(meds, 0.95));
  CHECK(c.eps_hat == 0.4);
  CHECK(c.pct90.hi >= c.replicate_min);
  CHECK(c.pct90.lo <= c.pct90.hi);
  CHECK(c.bca90.lo <= c.bca90.hi);
}

TEST_CASE("merging") {
  const Mat theta = rank_r_data(8, 10, 3, 3);
  const auto p = fit_projector(theta, 3);
  Mat m(3, 3);
  m << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  MergeConfig none;
  none.mu_threshold = 1.0;
  Mat dup = m;
  dup.row(2) = dup.row(0);
  CHECK(merge_prototypes(PrototypeMemory(dup, p), none).K() == 3);

  MergeConfig c99;
  c99.mu_threshold = 0.99;
  const auto merged = merge_prototypes(PrototypeMemory(dup, p), c99);
  CHECK(merged.K() == 2);
  CHECK((merged.M().row(0) - m.row(0)).norm() < 1e-12);
  CHECK(merged.merge_log.size() == 1);

  // Three unit rows at pairwise cosine 0.97.
  const double c = 0.97;
  Mat g = Mat::Constant(3, 3, c);
  g.diagonal().setOnes();
  const Mat rows = Eigen::LLT<Mat>(g).matrixL();
  MergeConfig c95;
  c95.mu_threshold = 0.95;
  c95.r_sparse = 1;
  const auto out = merge_prototypes(PrototypeMemory(rows, p), c95, &theta);
  if (out.K() >= 2) CHECK(diagnostics(out.M()).mu <= 0.95);
  CHECK(out.K() < 3);
  CHECK(out.merge_log.front().find("coverage") != std::string::npos);
}

TEST_CASE("memory persistence round trip") {
  const Mat theta = rank_r_data(9, 20, 2, 5);
  auto res = cluster_prototypes(theta, fit_projector(theta, 2), 4, 2, 1);
  res.memory.freeze();
  res.memory.set_certificate(coverage_certificate(res.memory, theta, 1, bootstrap::ResamplePlan::random(100, 2)));
  const auto dir = (std::filesystem::temp_directory_path() / "protoadapt_mem_test").string();
  write_memory(dir, res.memory);
  const auto back = read_memory(dir);
  CHECK(back.M() == res.memory.M());
  CHECK(back.frozen());
  CHECK(back.eps_upper() == res.memory.eps_upper());
  CHECK(back.projector().q == res.memory.projector().q);
  std::filesystem::remove_all(dir);
}
