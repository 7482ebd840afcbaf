#include "protoadapt/riskbound.hpp"

#include <doctest.h>

#include <cmath>

using namespace protoadapt;
using namespace protoadapt::risk;

namespace {

struct Fixture {
  synth::GeneratorConfig gen;
  synth::SyntheticWorld world;
  std::vector<synth::EpisodeTask> tasks;
  proto::PrototypeMemory memory;

  explicit Fixture(double noise = 0.05) {
    gen.n_tasks = 120;
    gen.n_query = 60;
    gen.noise_sigma = noise;
    gen.seed = 7;
    world = synth::make_world(gen);
    tasks = synth::generate_corpus(gen);
    Mat theta(60, gen.d_theta);
    for (int i = 0; i < 60; ++i) theta.row(i) = tasks[static_cast<std::size_t>(i)].theta_true->transpose();
    const auto proj = proto::fit_projector(theta, gen.r_true);
    memory = proto::cluster_prototypes(theta, proj, 8, 4, 3).memory;
    memory.freeze();
    memory.set_certificate(proto::coverage_certificate(memory, theta, 1, bootstrap::ResamplePlan::random(300, 1),
                                                       proto::L0Mode::Exact));
  }

  [[nodiscard]] std::vector<const synth::EpisodeTask*> held_out(std::size_t n) const {
    std::vector<const synth::EpisodeTask*> out;
    for (std::size_t i = 60; i < 60 + n; ++i) out.push_back(&tasks[i]);
    return out;
  }
};

}  // namespace

TEST_CASE("Lipschitz constant: trivial values and a Monte Carlo supremum check") {
  CHECK(lipschitz_constant(1.0) == 1.0);
  Rng rng = make_rng(3, 0);
  Mat x = normal_matrix(rng, 200, 5);
  CHECK(lipschitz_constant(domain_radius(3.0 * x)) == doctest::Approx(3.0 * domain_radius(x)));
  CHECK_THROWS_AS(lipschitz_constant(std::numeric_limits<double>::infinity()), ValidationError);
  Mat bad = x;
  bad(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(domain_radius(bad), ValidationError);

  const double L = lipschitz_constant(domain_radius(x));
  double worst = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const Vec a = normal_vector(rng, 5, 2.0), b = normal_vector(rng, 5, 2.0);
    const auto i = static_cast<Eigen::Index>(uniform_index(rng, 200));
    const int y = static_cast<int>(uniform_index(rng, 2));
    const double diff = std::abs(logistic_loss(x.row(i).dot(a), y) - logistic_loss(x.row(i).dot(b), y));
    worst = std::max(worst, diff / (L * (a - b).norm()));
  }
  CHECK(worst <= 1.0);

  // log(1 + e^m) at the extreme margin.
  CHECK(loss_bound(2.0, 1.5) == doctest::Approx(std::log(1 + std::exp(3.0))));
}

TEST_CASE("capacity term arithmetic and monotonicity") {
  CHECK(sparsity_capacity_term(1, std::exp(1.0), 2, std::exp(-1.0)) == doctest::Approx(1.0));
  const double base = sparsity_capacity_term(3, 50, 100, 0.1);
  CHECK(sparsity_capacity_term(3, 50, 200, 0.1) == doctest::Approx(base / std::sqrt(2.0)));
  CHECK(sparsity_capacity_term(4, 50, 100, 0.1) > base);
  CHECK(sparsity_capacity_term(3, 80, 100, 0.1) > base);
  CHECK(sparsity_capacity_term(3, 50, 150, 0.1) < base);
  CHECK(sparsity_capacity_term(3, 50, 100, 0.2) < base);
  CHECK_THROWS_AS(sparsity_capacity_term(3, 50, 100, 1.0), ValidationError);
}

TEST_CASE("a task whose adapter is a prototype has every term zero") {
  Fixture f;
  synth::EpisodeTask t = f.tasks[70];
  t.theta_true = f.memory.M().row(2).transpose();
  const auto r = check_bound(t, f.memory, f.world.feature_map, t.query, BoundConfig{});
  CHECK(r.eps_app < 1e-12);
  CHECK(r.eps_task < 1e-12);
  CHECK(r.approx_dist < 1e-12);
  CHECK(r.emp_gap < 1e-12);
  CHECK(r.bound_task < 1e-10);
  CHECK(r.satisfied_task);
}

TEST_CASE("an in-subspace adapter off the dictionary carries only the coverage term") {
  Fixture f;
  synth::EpisodeTask t = f.tasks[71];
  const Mat& q = f.memory.projector().q;
  Vec u(2);
  u << 3.1, -2.4;
  t.theta_true = q * u;
  const auto r = check_bound(t, f.memory, f.world.feature_map, t.query, BoundConfig{});
  CHECK(r.eps_app < 1e-12);
  CHECK(r.eps_task > 1e-3);
  CHECK(r.bound_task == doctest::Approx(r.L * (r.eps_task + r.off_subspace)));
  // One atom: the residual is the distance from u to the best line through a prototype.
  const Mat lifted = f.memory.lifted();
  double best = 1e300;
  for (int k = 0; k < lifted.rows(); ++k) {
    const Vec m = lifted.row(k).transpose();
    best = std::min(best, (u - m * (m.dot(u) / m.squaredNorm())).norm());
  }
  CHECK(r.eps_task == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("triangle identity and per-task bound hold on every synthetic task") {
  Fixture f;
  const auto tasks = f.held_out(50);
  const auto reports = check_bounds(tasks, f.memory, f.world.feature_map, BoundConfig{});
  const auto s = summarize(reports);
  CHECK(s.n_tasks == 50);
  CHECK(s.triangle_rate == 1.0);
  CHECK(s.max_triangle_slack <= 1e-9);
  CHECK(s.task_rate == 1.0);
  CHECK(s.cert_rate >= 0.9);
  for (const auto& r : reports) {
    // Direct recomputation of the per-task terms.
    CHECK(r.emp_gap == doctest::Approx(std::abs(r.emp_risk_mem - r.emp_risk_oracle)));
    CHECK(r.eps_app >= 0.0);
  }
  CHECK(check_bounds(tasks, f.memory, f.world.feature_map, BoundConfig{}, Exec::Serial)[7].emp_gap ==
        reports[7].emp_gap);
}

TEST_CASE("preconditions") {
  Fixture f;
  synth::EpisodeTask t = f.tasks[80];
  t.theta_true.reset();
  CHECK_THROWS_AS(check_bound(t, f.memory, f.world.feature_map, t.query, BoundConfig{}), ValidationError);
  proto::PrototypeMemory open(f.memory.M(), f.memory.projector());
  CHECK_THROWS_AS(check_bound(f.tasks[80], open, f.world.feature_map, f.tasks[80].query, BoundConfig{}),
                  ValidationError);
}

TEST_CASE("generalization gap decays like 1/sqrt(n)") {
  Fixture f;
  const auto g = gap_scaling(f.world, f.held_out(20), f.memory, BoundConfig{}, {50, 100, 200, 400}, 20000, 30, 5);
  CHECK(g.within_2x);
  CHECK(g.loglog_slope < -0.3);
  CHECK(g.loglog_slope > -0.7);
  for (std::size_t k = 1; k < g.points.size(); ++k) CHECK(g.points[k].mean_gap < g.points[k - 1].mean_gap);
}
