#include "protoadapt/synthdata.hpp"

#include <doctest.h>

#include <set>

using namespace protoadapt;
using namespace protoadapt::synth;

namespace {

GeneratorConfig small_cfg() {
  GeneratorConfig c;
  c.n_tasks = 200;
  c.n_support = 10;
  c.n_query = 20;
  return c;
}

bool same_corpus(const std::vector<EpisodeTask>& a, const std::vector<EpisodeTask>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id || a[i].support.y != b[i].support.y || a[i].query.y != b[i].query.y) return false;
    if (a[i].support.x != b[i].support.x || a[i].query.x != b[i].query.x) return false;
    if (*a[i].theta_true != *b[i].theta_true) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  GeneratorConfig c;
  c.r_true = 9;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = GeneratorConfig{};
  c.n_support = 1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = GeneratorConfig{};
  c.n_tasks = 0;
  CHECK_THROWS_AS(generate_corpus(c), ValidationError);
  CHECK_NOTHROW(GeneratorConfig{}.validate());
}

TEST_CASE("generation is a pure function of the seed") {
  const auto cfg = small_cfg();
  CHECK(same_corpus(generate_corpus(cfg), generate_corpus(cfg)));
  auto other = cfg;
  other.seed = 7;
  CHECK_FALSE(same_corpus(generate_corpus(cfg), generate_corpus(other)));
}

TEST_CASE("zero-noise adapters lie in the planted subspace") {
  const auto cfg = small_cfg();
  const auto world = make_world(cfg);
  const auto tasks = generate_corpus(cfg);
  Mat theta(static_cast<Eigen::Index>(tasks.size()), cfg.d_theta);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Vec t = *tasks[i].theta_true;
    CHECK((t - world.subspace * (world.subspace.transpose() * t)).norm() < 1e-12);
    theta.row(static_cast<Eigen::Index>(i)) = t.transpose();
  }
  // Energy oracle on the sample covariance.
  const Mat centered = theta.rowwise() - theta.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Mat> es(centered.transpose() * centered / (theta.rows() - 1.0));
  const Vec ev = es.eigenvalues().reverse();
  CHECK(ev.head(2).sum() / ev.sum() >= 0.99);
}

TEST_CASE("full-rank planted subspace contains every adapter") {
  auto cfg = small_cfg();
  cfg.r_true = cfg.d_theta;
  const auto world = make_world(cfg);
  for (const auto& t : generate_corpus(cfg))
    CHECK((*t.theta_true - world.subspace * (world.subspace.transpose() * *t.theta_true)).norm() < 1e-12);
}

TEST_CASE("off-subspace noise has the requested scale") {
  auto cfg = small_cfg();
  cfg.noise_sigma = 0.1;
  const auto world = make_world(cfg);
  double acc = 0.0;
  const auto tasks = generate_corpus(cfg);
  for (const auto& t : tasks) acc += (world.complement.transpose() * *t.theta_true).squaredNorm();
  // E||noise||^2 = sigma^2 (d - r)
  CHECK(acc / tasks.size() == doctest::Approx(0.01 * 6).epsilon(0.15));
}

TEST_CASE("supports are two-class and truncation keeps both classes") {
  const auto tasks = generate_corpus(small_cfg());
  for (const auto& t : tasks) {
    CHECK(t.support.has_both_classes());
    const auto tr = truncate_support(t, 2);
    CHECK(tr.support.size() == 2);
    CHECK(tr.support.has_both_classes());
  }
  CHECK_THROWS_AS(truncate_support(tasks[0], 11), ValidationError);
}

TEST_CASE("partition sizes, disjointness and reproducibility") {
  const auto tasks = generate_corpus(small_cfg());
  const AdapterOf of = [](const EpisodeTask& t) { return *t.theta_true; };
  PartitionConfig pc;
  const auto a = partition_tasks(tasks, of, pc);
  const auto b = partition_tasks(tasks, of, pc);
  CHECK(a.tags == b.tags);
  CHECK(a.cluster == b.cluster);
  CHECK(a.count(Partition::PreSeed) == 80);
  CHECK(a.count(Partition::PreRest) == 20);
  CHECK(a.count(Partition::RetTrain) + a.count(Partition::RetVal) + a.count(Partition::RetTest) == 100);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    CHECK(a.tags[i] != Partition::Unassigned);
    if (is_retrieval(a.tags[i])) CHECK(a.cluster[i] == -1);
    if (a.tags[i] == Partition::PreSeed) CHECK(a.cluster[i] >= 0);
  }
}

TEST_CASE("tau_sim = -1 never blocks assignment") {
  const auto tasks = generate_corpus(small_cfg());
  PartitionConfig pc;
  pc.tau_sim = -1.0;
  const auto a = partition_tasks(tasks, [](const EpisodeTask& t) { return *t.theta_true; }, pc);
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (a.tags[i] == Partition::PreRest) CHECK(a.cluster[i] >= 0);
}

TEST_CASE("two well-separated directions form exactly two seed clusters") {
  auto cfg = small_cfg();
  cfg.n_tasks = 24;  // 12 pretraining tasks, 10 of them seed
  const auto tasks = generate_corpus(cfg);
  // Direction by task index parity, with a small deterministic wobble.
  const AdapterOf of = [](const EpisodeTask& t) {
    const int i = std::stoi(t.id.substr(5));
    Vec v = Vec::Zero(3);
    v[i % 2] = 1.0;
    v[2] = 0.05 * (i % 3);
    return v;
  };
  PartitionConfig pc;
  const auto a = partition_tasks(tasks, of, pc);
  std::vector<Vec> seeds;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (a.tags[i] == Partition::PreSeed) seeds.push_back(of(tasks[i]));
  REQUIRE(seeds.size() == 10);
  // Oracle: connected components of the pairwise cosine >= 0.8 graph.
  std::vector<int> comp(seeds.size(), -1);
  int ncomp = 0;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    if (comp[s] >= 0) continue;
    std::vector<std::size_t> stack{s};
    comp[s] = ncomp;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (std::size_t v = 0; v < seeds.size(); ++v)
        if (comp[v] < 0 && seeds[u].dot(seeds[v]) / (seeds[u].norm() * seeds[v].norm()) >= 0.8) {
          comp[v] = ncomp;
          stack.push_back(v);
        }
    }
    ++ncomp;
  }
  CHECK(ncomp == 2);
  CHECK(a.cluster_directions.rows() == 2);
}

TEST_CASE("empty partitions are rejected") {
  auto cfg = small_cfg();
  cfg.n_tasks = 3;
  const auto tasks = generate_corpus(cfg);
  CHECK_THROWS_AS(partition_tasks(tasks, [](const EpisodeTask& t) { return *t.theta_true; }, PartitionConfig{}),
                  ValidationError);
  PartitionConfig bad;
  bad.frac_pre = 1.0;
  CHECK_THROWS_AS(partition_tasks(tasks, [](const EpisodeTask& t) { return *t.theta_true; }, bad), ValidationError);
}

TEST_CASE("partition tags are one-shot") {
  auto tasks = generate_corpus(small_cfg());
  const auto a = partition_tasks(tasks, [](const EpisodeTask& t) { return *t.theta_true; }, PartitionConfig{});
  apply_partition(tasks, a);
  CHECK_THROWS_AS(tasks[0].assign_partition(Partition::RetTest), FrozenError);
  CHECK_THROWS_AS(apply_partition(tasks, a), FrozenError);
}

TEST_CASE("config json round trip") {
  auto cfg = small_cfg();
  cfg.noise_sigma = 0.25;
  cfg.seed = 2023;
  nlohmann::json j = cfg;
  const auto back = j.get<GeneratorConfig>();
  CHECK(back.noise_sigma == 0.25);
  CHECK(back.seed == 2023);
  CHECK(back.n_query == cfg.n_query);
}
