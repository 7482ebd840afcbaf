// Serial reference against the OpenMP path for each parallel kernel.
// Argument 0 runs Exec::Serial, 1 runs Exec::Parallel.

#include "protoadapt/bootstrap.hpp"
#include "protoadapt/motifs.hpp"
#include "protoadapt/node.hpp"
#include "protoadapt/prototypes.hpp"
#include "protoadapt/retrieval.hpp"
#include "protoadapt/spectral.hpp"
#include "protoadapt/stats.hpp"

#include <benchmark/benchmark.h>

using namespace protoadapt;

namespace {

Exec policy(const benchmark::State& st) { return st.range(0) ? Exec::Parallel : Exec::Serial; }

void label(benchmark::State& st) { st.SetLabel(st.range(0) ? "parallel" : "serial"); }

void BM_BootstrapMedian(benchmark::State& st) {
  Rng rng = make_rng(1, 0);
  const Vec x = normal_vector(rng, 400);
  const auto plan = bootstrap::ResamplePlan::random(2000, 11);
  for (auto _ : st) {
    auto reps = bootstrap::replicates(
        plan, 400, 400,
        [&](std::span<const std::size_t> idx) {
          std::vector<double> s;
          s.reserve(idx.size());
          for (std::size_t i : idx) s.push_back(x[static_cast<Eigen::Index>(i)]);
          return stats::median(s);
        },
        policy(st));
    benchmark::DoNotOptimize(reps.data());
  }
  label(st);
}

void BM_RetrieveBatch(benchmark::State& st) {
  Rng rng = make_rng(2, 0);
  const Mat m = normal_matrix(rng, 50, 16);
  const Mat thetas = normal_matrix(rng, 500, 16);
  const Mat logits = normal_matrix(rng, 500, 50);
  retr::ProximalConfig cfg;
  cfg.max_iter = 200;
  for (auto _ : st) {
    auto sols = retr::retrieve_batch(thetas, m, logits, cfg, 10, policy(st));
    benchmark::DoNotOptimize(sols.data());
  }
  label(st);
}

void BM_IntegrateBatch(benchmark::State& st) {
  const auto field = node::VectorField::make(8, 16, false, 3, 0.5);
  Rng rng = make_rng(3, 0);
  const Mat z0 = normal_matrix(rng, 256, 8);
  for (auto _ : st) {
    Mat z1 = node::integrate_batch(field, z0, node::SolveConfig{}, policy(st));
    benchmark::DoNotOptimize(z1.data());
  }
  label(st);
}

void BM_CoverageResiduals(benchmark::State& st) {
  Rng rng = make_rng(4, 0);
  const Mat theta = normal_matrix(rng, 400, 3) * normal_matrix(rng, 3, 16);
  const auto proj = proto::fit_projector(theta, 3);
  const auto memory = proto::cluster_prototypes(theta, proj, 40, 2, 5).memory;
  for (auto _ : st) {
    auto res = proto::coverage_residuals(memory, theta, 2, proto::L0Mode::Exact, policy(st));
    benchmark::DoNotOptimize(res.data());
  }
  label(st);
}

void BM_MotifActivations(benchmark::State& st) {
  Rng rng = make_rng(5, 0);
  const std::string aa(motif::kAminoAcids);
  auto random_seq = [&](std::size_t len) {
    std::string s;
    for (std::size_t i = 0; i < len; ++i) s.push_back(aa[uniform_index(rng, aa.size())]);
    return s;
  };
  std::vector<motif::Repertoire> reps(60);
  for (auto& r : reps)
    for (int i = 0; i < 50; ++i) r.sequences.push_back(random_seq(14));
  std::vector<std::string> motifs;
  for (int i = 0; i < 100; ++i) motifs.push_back(random_seq(4));
  for (auto _ : st) {
    Mat a = motif::activation_matrix(reps, motifs, policy(st));
    benchmark::DoNotOptimize(a.data());
  }
  label(st);
}

void BM_FisherEnergyTest(benchmark::State& st) {
  Rng rng = make_rng(6, 0);
  const Mat g = normal_matrix(rng, 200, 4) * normal_matrix(rng, 4, 24);
  spectral::FisherTestConfig cfg;
  cfg.n_boot = 500;
  cfg.exec = policy(st);
  for (auto _ : st) {
    auto rep = spectral::fisher_energy_test_gradients(g, 1e-6, 4, cfg);
    benchmark::DoNotOptimize(rep.candidates.data());
  }
  label(st);
}

}  // namespace

BENCHMARK(BM_BootstrapMedian)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RetrieveBatch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_IntegrateBatch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CoverageResiduals)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MotifActivations)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FisherEnergyTest)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
