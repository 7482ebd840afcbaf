#include "protoadapt/node.hpp"

#include <doctest.h>

#include <complex>

using namespace protoadapt;
using namespace protoadapt::node;

namespace {

// exp(A t) through the eigendecomposition, independent of the integrators.
Mat expm_eig(const Mat& a, double t) {
  Eigen::EigenSolver<Mat> es(a);
  const Eigen::MatrixXcd v = es.eigenvectors();
  Eigen::VectorXcd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = std::exp(ev[i] * t);
  return (v * ev.asDiagonal() * v.inverse()).real();
}

SolveConfig tight() {
  SolveConfig c;
  c.rtol = 1e-11;
  c.atol = 1e-12;
  return c;
}

}  // namespace

TEST_CASE("zero field leaves the state unchanged") {
  auto f = VectorField::make(3, 4, false, 1);
  f.params.setZero();
  Vec z0(3);
  z0 << 0.3, -1, 2;
  for (Method m : {Method::RK4, Method::RK45}) {
    SolveConfig c;
    c.method = m;
    CHECK(integrate(f, z0, c).z1 == z0);
  }
}

TEST_CASE("linear flows match the matrix exponential") {
  Vec z0(2);
  z0 << 1.5, -0.5;
  const auto id = VectorField::linear(Mat::Identity(2, 2));
  CHECK((integrate(id, z0, SolveConfig{}).z1 - std::exp(1.0) * z0).norm() < 1e-6);

  Mat a(2, 2);
  a << -0.3, 1.2, -0.8, 0.1;
  const auto lin = VectorField::linear(a);
  SolveConfig c;
  c.t1 = 2.0;
  const Vec expect = expm_eig(a, 2.0) * z0;
  CHECK((integrate(lin, z0, c).z1 - expect).norm() < 1e-6);
  c.method = Method::RK4;
  c.rk4_steps = 200;
  CHECK((integrate(lin, z0, c).z1 - expect).norm() < 1e-6);
}

TEST_CASE("tighter tolerances never increase the error on a linear field") {
  // Asymptotic regime. At rtol >= 1e-4 the whole solve is 3-4 steps and the
  // realized error is not monotone in the tolerance.
  Mat a(3, 3);
  a << -0.5, 1, 0, -1, -0.2, 0.3, 0.1, 0, -0.7;
  const auto lin = VectorField::linear(a);
  Vec z0(3);
  z0 << 1, 2, -1;
  const Vec expect = expm_eig(a, 1.0) * z0;
  double prev = 1e300;
  SolveConfig c;
  c.rtol = 6.25e-5;
  c.atol = 6.25e-6;
  for (int i = 0; i < 16; ++i) {
    const double err = (integrate(lin, z0, c).z1 - expect).norm();
    CHECK(err <= prev);
    prev = err;
    c.rtol *= 0.5;
    c.atol *= 0.5;
  }
}

TEST_CASE("forward then negated field returns to the start") {
  const auto f = VectorField::make(4, 6, true, 2);
  Rng rng = make_rng(2, 1);
  const Vec z0 = normal_vector(rng, 4);
  SolveConfig c;
  c.rtol = 1e-9;
  c.atol = 1e-10;
  const Vec z1 = integrate(f, z0, c).z1;
  // Reversed time through the negated field: g(z, s) = -f(z, 1 - s).
  const auto g = f.negated();
  const Vec back = integrate_rhs([&](double s, const Vec& z) { return g.eval(z, 1.0 - s); }, z1, 0.0, 1.0, c, nullptr);
  CHECK((back - z0).norm() < 10 * c.rtol * (1 + z0.norm()) * 10);
}

TEST_CASE("adjoint: zero loss gradient and the linear closed form") {
  const auto f = VectorField::make(3, 4, false, 3);
  Vec z0(3);
  z0 << 0.1, 0.2, 0.3;
  const auto zero = adjoint_gradient(f, z0, tight(), [](const Vec& z) { return Vec::Zero(z.size()); });
  CHECK(zero.grad_z0.norm() == 0.0);
  CHECK(zero.grad_params.norm() == 0.0);

  Mat a(2, 2);
  a << 0.2, -0.9, 0.6, -0.4;
  const auto lin = VectorField::linear(a);
  Vec y0(2);
  y0 << 1, -2;
  // L = 1/2 ||z1||^2, z1 = E z0 => dL/dz0 = E^T E z0.
  const Mat e = expm_eig(a, 1.0);
  const auto adj = adjoint_gradient(lin, y0, tight(), [](const Vec& z) { return z; });
  CHECK((adj.grad_z0 - e.transpose() * e * y0).norm() < 1e-5);
}

TEST_CASE("adjoint gradients match central finite differences") {
  for (bool ln : {false, true}) {
    auto f = VectorField::make(3, 4, ln, 7 + ln, 0.9);
    Rng rng = make_rng(5, ln);
    f.params.head(9) = normal_vector(rng, 9, 0.3);  // non-zero linear part
    const Vec z0 = normal_vector(rng, 3), target = normal_vector(rng, 3);
    REQUIRE(f.n_params() <= 60);
    auto loss = [&](const VectorField& g, const Vec& z) {
      return 0.5 * (integrate(g, z, tight()).z1 - target).squaredNorm();
    };
    const auto adj = adjoint_gradient(f, z0, tight(), [&](const Vec& z) { return Vec(z - target); });
    const double h = 1e-5;
    for (int i = 0; i < 3; ++i) {
      Vec a = z0, b = z0;
      a[i] += h;
      b[i] -= h;
      const double fd = (loss(f, a) - loss(f, b)) / (2 * h);
      CHECK(std::abs(fd - adj.grad_z0[i]) <= 1e-4 * std::max(1e-2, std::abs(fd)));
    }
    for (Eigen::Index p = 0; p < f.n_params(); ++p) {
      auto a = f, b = f;
      a.params[p] += h;
      b.params[p] -= h;
      const double fd = (loss(a, z0) - loss(b, z0)) / (2 * h);
      CHECK(std::abs(fd - adj.grad_params[p]) <= 1e-4 * std::max(1e-2, std::abs(fd)));
    }
  }
}

TEST_CASE("stiff problems are flagged and blow-ups abort") {
  Mat a = Mat::Zero(2, 2);
  a(0, 0) = -2e4;
  a(1, 1) = -1;
  SolveConfig c;
  c.rtol = 1e-6;
  c.atol = 1e-8;
  Vec z0(2);
  z0 << 1, 1;
  const auto r = integrate(VectorField::linear(a), z0, c);
  CHECK(r.stats.stiff);
  CHECK(r.stats.rejected > 0);
  CHECK(std::abs(r.z1[1] - std::exp(-1.0)) < 1e-5);

  Vec y0(1);
  y0 << 1.0;
  CHECK_THROWS_AS(integrate_rhs([](double, const Vec& y) { return Vec(y.cwiseProduct(y)); }, y0, 0.0, 2.0, c, nullptr),
                  NumericalError);
}

TEST_CASE("config validation, batch policy agreement, serialization") {
  const auto f = VectorField::make(3, 5, true, 9);
  SolveConfig c;
  c.t1 = 0.0;
  CHECK_THROWS_AS(integrate(f, Vec::Zero(3), c), ValidationError);
  c = SolveConfig{};
  c.rtol = 0;
  CHECK_THROWS_AS(integrate(f, Vec::Zero(3), c), ValidationError);
  CHECK_THROWS_AS(integrate(f, Vec::Zero(2), SolveConfig{}), ValidationError);

  Rng rng = make_rng(9, 0);
  const Mat z0 = normal_matrix(rng, 20, 3);
  CHECK(integrate_batch(f, z0, SolveConfig{}, Exec::Serial) == integrate_batch(f, z0, SolveConfig{}, Exec::Parallel));
  const auto back = VectorField::from_json(f.to_json());
  CHECK(back.params == f.params);
  CHECK(back.eval(z0.row(0).transpose(), 0.3) == f.eval(z0.row(0).transpose(), 0.3));
  SolveConfig s;
  s.max_step = 0.25;
  const SolveConfig s2 = nlohmann::json(s).get<SolveConfig>();
  CHECK(s2.max_step == 0.25);
}
