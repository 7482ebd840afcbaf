// One PASS/FAIL line per acceptance criterion, each under its own wall-clock limit.
// Oracles here are independent of the library code paths they check.

#include "protoadapt/bootstrap.hpp"
#include "protoadapt/node.hpp"
#include "protoadapt/pipeline.hpp"
#include "protoadapt/prototypes.hpp"
#include "protoadapt/retrieval.hpp"
#include "protoadapt/riskbound.hpp"
#include "protoadapt/stats.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

using namespace protoadapt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double limit_s;  // <= 0: no runtime limit
  std::function<Outcome()> run;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protoadapt_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// --- dimension-test arithmetic ---------------------------------------------------

Outcome fisher_arithmetic() {
  const auto rep = pipe::dim_test_replay();
  // Published p_adj column and reject decisions, in row order r = 18..22.
  const std::vector<double> p_adj{1.000, 0.445, 0.030, 0.010, 0.004};
  const std::vector<bool> published{false, false, true, true, true};
  if (rep.candidates.size() != 5) return {false, "expected 5 rows"};
  bool ok = true;
  std::string flagged;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& c = rep.candidates[i];
    const double bonf = std::min(1.0, 5.0 * c.p_raw);
    const bool rule = bonf <= 0.01;
    ok = ok && std::abs(c.p_adj - p_adj[i]) < 5e-4 && c.p_adj == bonf && c.reject == rule;
    ok = ok && c.flagged == (rule != published[i]);
    if (c.flagged) flagged += std::to_string(c.r_cand) + " ";
  }
  ok = ok && flagged == "20 ";
  return {ok, "flagged rows: " + (flagged.empty() ? std::string("none") : flagged)};
}

// --- threshold t statistics ------------------------------------------------------

Outcome tau_t_column() {
  const std::vector<double> published{1.63, 1.89, 0.87, 0.09, 1.04};
  const auto rows = pipe::tau_replay();
  if (rows.size() != 5) return {false, "expected 5 rows"};
  double worst = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    // Three within-cohort folds: t = (tau_bar - 0.5) / (SE / sqrt(3)).
    const double t_hand = std::abs(rows[i].tau_bar - 0.5) / (rows[i].se / std::sqrt(3.0));
    worst = std::max({worst, std::abs(std::abs(rows[i].t) - published[i]), std::abs(std::abs(rows[i].t) - t_hand)});
  }
  return {worst <= 0.01, "max |t - published| = " + fmt(worst, 3)};
}

// --- proximal solver ---------------------------------------------------------------

double qp_objective(const Mat& m, const Vec& theta, const Vec& pi, double lambda, double gamma, const Vec& w) {
  return 0.5 * (m.transpose() * w - theta).squaredNorm() + lambda * w.sum() + gamma * (w - pi).squaredNorm();
}

// Projected gradient on w >= 0 with a fixed 1/L step, run to stagnation.
double projected_gradient_oracle(const Mat& m, const Vec& theta, const Vec& pi, double lambda, double gamma) {
  const Eigen::Index K = m.rows();
  const Mat H = m * m.transpose() + 2.0 * gamma * Mat::Identity(K, K);
  const Vec b = m * theta - Vec::Constant(K, lambda) + 2.0 * gamma * pi;
  const double L = Eigen::SelfAdjointEigenSolver<Mat>(H).eigenvalues().maxCoeff();
  Vec w = Vec::Zero(K);
  for (int it = 0; it < 400000; ++it) {
    const Vec next = (w - (H * w - b) / L).cwiseMax(0.0);
    const double move = (next - w).norm();
    w = next;
    if (move < 1e-15) break;
  }
  return qp_objective(m, theta, pi, lambda, gamma, w);
}

Outcome proximal_vs_oracle() {
  int within = 0, monotone = 0;
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    Rng rng = make_rng(9000 + inst, 0);
    const int K = 2 + inst % 5, d = 1 + inst % 4;
    const Mat m = normal_matrix(rng, K, d);
    const Vec theta = normal_vector(rng, d, 2.0);
    const Vec v = normal_vector(rng, K);
    retr::ProximalConfig cfg;
    cfg.lambda = (inst % 3) * 0.05;
    cfg.gamma = (inst % 4) * 0.1;
    cfg.max_iter = 50000;
    cfg.tol = 1e-13;
    const auto sol = retr::solve_proximal(theta, m, v, cfg);
    Vec pi = (v.array() - v.maxCoeff()).exp();
    pi /= pi.sum();
    const double oracle = projected_gradient_oracle(m, theta, pi, cfg.lambda, cfg.gamma);
    const double gap = sol.objective_trace.back() - oracle;
    worst = std::max(worst, gap);
    within += gap <= 1e-6;
    bool mono = true;
    for (std::size_t k = 1; k < sol.objective_trace.size(); ++k) mono = mono && sol.objective_trace[k] <= sol.objective_trace[k - 1];
    monotone += mono;
  }
  return {within == 100 && monotone == 100, std::to_string(within) + "/100 within 1e-6 (max gap " + fmt(worst, 3) +
                                                "), " + std::to_string(monotone) + "/100 monotone traces"};
}

// --- l0 coverage fit ---------------------------------------------------------------

double support_residual(const Vec& u, const Mat& m, const std::vector<int>& sup) {
  Mat a(u.size(), static_cast<Eigen::Index>(sup.size()));
  for (std::size_t c = 0; c < sup.size(); ++c) a.col(static_cast<Eigen::Index>(c)) = m.row(sup[c]).transpose();
  return (u - a * a.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(u)).norm();
}

Outcome l0_vs_bruteforce() {
  int exact_ok = 0, omp_ok = 0;
  for (int inst = 0; inst < 100; ++inst) {
    Rng rng = make_rng(7000 + inst, 0);
    const int K = 3 + inst % 6, d = 3 + inst % 3, r = 1 + inst % 3;  // r <= min(K, d)
    const Mat m = normal_matrix(rng, K, d);
    const Vec u = normal_vector(rng, d);
    double best = u.norm();
    std::vector<int> sel(static_cast<std::size_t>(K), 0);
    std::fill(sel.end() - std::min(r, K), sel.end(), 1);
    do {  // every size-r support
      std::vector<int> sup;
      for (int j = 0; j < K; ++j)
        if (sel[static_cast<std::size_t>(j)]) sup.push_back(j);
      best = std::min(best, support_residual(u, m, sup));
    } while (std::next_permutation(sel.begin(), sel.end()));
    const auto exact = proto::l0_fit(u, m, r, proto::L0Mode::Exact);
    const auto omp = proto::l0_fit(u, m, r, proto::L0Mode::Omp);
    exact_ok += std::abs(exact.residual - best) <= 1e-10 * (1.0 + best);
    omp_ok += omp.residual >= exact.residual - 1e-12;
  }
  return {exact_ok == 100 && omp_ok == 100,
          "exact==enumeration " + std::to_string(exact_ok) + "/100, omp>=exact " + std::to_string(omp_ok) + "/100"};
}

// --- adjoint gradients ---------------------------------------------------------------

Mat expm_eig(const Mat& a, double t) {
  Eigen::EigenSolver<Mat> es(a);
  const Eigen::MatrixXcd v = es.eigenvectors();
  Eigen::VectorXcd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = std::exp(ev[i] * t);
  return (v * ev.asDiagonal() * v.inverse()).real();
}

Outcome adjoint_vs_fd() {
  node::SolveConfig tight;
  tight.rtol = 1e-11;
  tight.atol = 1e-12;
  double worst = 0.0;
  for (int f_i = 0; f_i < 20; ++f_i) {
    const int m = 1 + f_i % 5;
    auto f = node::VectorField::make(m, 3, f_i % 2 == 1, 100 + f_i, 0.7);
    Rng rng = make_rng(300 + f_i, 0);
    f.params.head(m * m) = normal_vector(rng, m * m, 0.3);
    const Vec z0 = normal_vector(rng, m), target = normal_vector(rng, m);
    auto loss = [&](const node::VectorField& g, const Vec& z) {
      return 0.5 * (node::integrate(g, z, tight).z1 - target).squaredNorm();
    };
    const auto adj = node::adjoint_gradient(f, z0, tight, [&](const Vec& z) { return Vec(z - target); });
    const double h = 1e-5;
    auto rel = [](double fd, double g) { return std::abs(fd - g) / std::max(1e-2, std::abs(fd)); };
    for (int i = 0; i < m; ++i) {
      Vec a = z0, b = z0;
      a[i] += h;
      b[i] -= h;
      worst = std::max(worst, rel((loss(f, a) - loss(f, b)) / (2 * h), adj.grad_z0[i]));
    }
    for (Eigen::Index p = 0; p < f.n_params(); ++p) {
      auto a = f, b = f;
      a.params[p] += h;
      b.params[p] -= h;
      worst = std::max(worst, rel((loss(a, z0) - loss(b, z0)) / (2 * h), adj.grad_params[p]));
    }
  }
  double flow_err = 0.0;
  for (int i = 0; i < 10; ++i) {
    Rng rng = make_rng(500 + i, 0);
    const int m = 2 + i % 4;
    const Mat a = normal_matrix(rng, m, m) * 0.5;
    const Vec z0 = normal_vector(rng, m);
    node::SolveConfig c;
    flow_err = std::max(flow_err, (node::integrate(node::VectorField::linear(a), z0, c).z1 - expm_eig(a, c.t1) * z0).norm());
  }
  return {worst < 1e-4 && flow_err < 1e-6,
          "max rel grad err " + fmt(worst, 3) + ", linear flow err " + fmt(flow_err, 3)};
}

// --- planted rank ---------------------------------------------------------------------

Outcome planted_rank() {
  pipe::RunConfig cfg;
  cfg.gen.noise_sigma = 0.0;
  cfg.gen.r_true = 2;
  std::string detail;
  bool ok = true;
  for (std::uint64_t seed : {42ULL, 2023ULL, 777ULL}) {
    const auto corpus = pipe::build_corpus(cfg, seed);
    pipe::RunLog log;
    const auto p1 = pipe::run_phase1(cfg, corpus, seed, log);
    const int fisher = p1.dim_test.selected_r.value_or(-1);
    ok = ok && p1.pca.r == 2 && fisher == 2;
    detail += "seed " + std::to_string(seed) + ": pca " + std::to_string(p1.pca.r) + " fisher " + std::to_string(fisher) + "; ";
  }
  return {ok, detail};
}

// --- bootstrap percentile endpoints ------------------------------------------------------

// Full bootstrap distribution from multisets weighted by multinomial counts.
std::vector<double> multiset_distribution(const std::vector<double>& data,
                                          const std::function<double(const std::vector<double>&)>& stat) {
  const std::size_t n = data.size();
  std::vector<double> out;
  std::vector<std::size_t> tuple(n, 0);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t pos, std::size_t start) {
    if (pos == n) {
      std::map<std::size_t, int> counts;
      for (std::size_t i : tuple) ++counts[i];
      double weight = 1;
      for (std::size_t k = 2; k <= n; ++k) weight *= static_cast<double>(k);
      for (auto [_, c] : counts)
        for (int k = 2; k <= c; ++k) weight /= k;
      std::vector<double> sample;
      for (std::size_t i : tuple) sample.push_back(data[i]);
      std::sort(sample.begin(), sample.end());
      const double s = stat(sample);
      out.insert(out.end(), static_cast<std::size_t>(weight + 0.5), s);
      return;
    }
    for (std::size_t i = start; i < n; ++i) {
      tuple[pos] = i;
      rec(pos + 1, i);
    }
  };
  rec(0, 0);
  std::sort(out.begin(), out.end());
  return out;
}

// Linear-interpolation quantile on sorted data, written out here.
double quantile_ref(const std::vector<double>& s, double q) {
  const double h = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

Outcome bootstrap_exact() {
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  int checked = 0, matched = 0;
  for (const std::vector<double> data : {std::vector<double>{0.3, 1.7, 0.2, 5.0, 2.2}, std::vector<double>{1, 2, 3, 4},
                                         std::vector<double>{2.5, 2.5, 9.0}, std::vector<double>{-1.0, 4.0}}) {
    for (int which = 0; which < 2; ++which) {
      const std::function<double(const std::vector<double>&)> stat =
          which == 0 ? std::function<double(const std::vector<double>&)>(mean) : median;
      const auto reps = bootstrap::replicates(bootstrap::ResamplePlan::exhaustive(), data.size(), data.size(),
                                              [&](std::span<const std::size_t> idx) {
                                                std::vector<double> s;
                                                for (std::size_t i : idx) s.push_back(data[i]);
                                                std::sort(s.begin(), s.end());  // same summation order as the oracle
                                                return stat(s);
                                              });
      const auto oracle = multiset_distribution(data, stat);
      // Nominal tails as decimal literals: a 90% interval cuts exactly 0.05 on each side.
      for (const auto [level, a] : {std::pair{0.8, 0.1}, std::pair{0.9, 0.05}, std::pair{0.95, 0.025}}) {
        ++checked;
        const auto iv = bootstrap::percentile_interval(reps, level);
        matched += reps.size() == oracle.size() && iv.lo == quantile_ref(oracle, a) &&
                   iv.hi == quantile_ref(oracle, 1.0 - a);
      }
    }
  }
  return {matched == checked, std::to_string(matched) + "/" + std::to_string(checked) + " endpoint pairs exact"};
}

// --- motif null calibration ------------------------------------------------------------

Outcome motif_null() {
  const pipe::RunConfig cfg;
  const auto n = pipe::motif_null_calibration(500, cfg.motifs, 42);
  const bool ok = n.fpr_at_q <= 0.1 + 0.03 && n.pi0 >= 0.8 && n.pi0 <= 1.0;
  return {ok, "fpr at q<=" + fmt(n.q_threshold, 2) + " = " + fmt(n.fpr_at_q) + ", pi0 = " + fmt(n.pi0)};
}

// --- risk bound ---------------------------------------------------------------------------

Outcome risk_identity() {
  const pipe::RunConfig cfg;
  const auto corpus = pipe::build_corpus(cfg, 42);
  pipe::RunLog log;
  const auto p1 = pipe::run_phase1(cfg, corpus, 42, log);
  std::vector<const synth::EpisodeTask*> all;
  for (const auto& t : corpus.tasks) all.push_back(&t);
  risk::BoundConfig bc;
  bc.r_sparse = cfg.r_sparse;
  bc.mode = cfg.r_sparse <= 2 ? proto::L0Mode::Exact : proto::L0Mode::Omp;
  const auto reports = risk::check_bounds(all, p1.memory, corpus.world.feature_map, bc);
  std::size_t tri = 0, task = 0;
  double slack = -1e300;
  for (const auto& r : reports) {
    // Triangle inequality recomputed from the emitted terms.
    const double lhs = r.approx_dist;
    const double rhs = r.eps_app + r.eps_task + r.off_subspace;
    slack = std::max(slack, lhs - rhs);
    tri += lhs <= rhs + 1e-9;
    task += r.emp_gap <= r.bound_task + 1e-12;
  }
  const bool ok = tri == reports.size() && task == reports.size() && !reports.empty();
  return {ok, std::to_string(tri) + "/" + std::to_string(reports.size()) + " triangle (max slack " + fmt(slack, 3) +
                  "), " + std::to_string(task) + "/" + std::to_string(reports.size()) + " per-task bound"};
}

// --- few-shot scaling and seed stability ------------------------------------------------------

pipe::SeedRun seed42_sweep;  // shared with the stability check

Outcome few_shot_scaling() {
  pipe::RunConfig cfg;
  cfg.out_dir = scratch("fewshot").string();
  pipe::RunLog log;
  seed42_sweep = pipe::run_seed(cfg, 42, log, true, false);
  const auto& sw = seed42_sweep.sweep;
  if (sw.size() != 4) return {false, "expected 4 support sizes"};
  bool mono = true;
  std::string curve;
  for (std::size_t i = 0; i < sw.size(); ++i) {
    curve += "n=" + std::to_string(sw[i].n_support) + ":" + fmt(sw[i].eval.metrics.mean_task_auc) + " ";
    if (i > 0) mono = mono && sw[i].eval.metrics.mean_task_auc >= sw[i - 1].eval.metrics.mean_task_auc;
  }
  const double ratio = sw[0].eval.metrics.mean_task_auc / sw[0].oracle_ridge_auc;
  return {mono && ratio >= 0.95, curve + "oracle " + fmt(sw[0].oracle_ridge_auc) + " ratio@5 " + fmt(ratio)};
}

Outcome seed_stability() {
  pipe::RunConfig cfg;
  cfg.out_dir = scratch("stability").string();
  pipe::RunLog log;
  std::vector<double> auc;
  for (std::uint64_t seed : {42ULL, 2023ULL, 777ULL}) {
    const pipe::SeedRun run =
        seed == 42 && !seed42_sweep.sweep.empty() ? seed42_sweep : pipe::run_seed(cfg, seed, log, false, false);
    for (const auto& p2 : run.sweep)
      if (p2.n_support == cfg.eval_support) auc.push_back(p2.eval.metrics.mean_task_auc);
  }
  if (auc.size() != 3) return {false, "missing evaluation at the headline support size"};
  const double mu = (auc[0] + auc[1] + auc[2]) / 3.0;
  double ss = 0.0;
  for (double a : auc) ss += (a - mu) * (a - mu);
  const double sd = std::sqrt(ss / 2.0);
  return {sd <= 0.02, "auc " + fmt(auc[0]) + " " + fmt(auc[1]) + " " + fmt(auc[2]) + ", sample std " + fmt(sd, 3)};
}

// --- determinism ---------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  for (const auto& dir : {a, b}) {
    pipe::RunConfig cfg;
    cfg.out_dir = dir.string();
    cfg.gen.n_tasks = 300;
    cfg.support_sizes = {5, 10};
    cfg.train.max_epochs = 30;
    cfg.search_epochs = 8;
    cfg.seeds = {42};
    cfg.motifs.n_motifs = 60;
    cfg.motifs.power_reps = 4;
    pipe::RunLog log;
    pipe::ReportBundle bundle{cfg, {}, {}, std::nullopt};
    bundle.seeds.push_back(pipe::run_seed(cfg, 42, log, true, true));
    bundle.motifs = pipe::run_motif_stage(cfg, 42, log);
    pipe::emit_report(bundle, log);
  }
  std::size_t n = 0, same = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.path().extension() != ".csv") continue;
    ++n;
    const fs::path other = b / fs::relative(e.path(), a);
    same += fs::exists(other) && slurp(e.path()) == slurp(other);
  }
  return {n > 0 && same == n, std::to_string(same) + "/" + std::to_string(n) + " CSV files byte-identical"};
}

}  // namespace

// Optional arguments pick criteria by number, e.g. `acceptance 4 7`.
int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"dimension-test arithmetic", 1, fisher_arithmetic},
      {"threshold t statistics", 1, tau_t_column},
      {"proximal solver vs oracle", 30, proximal_vs_oracle},
      {"l0 coverage fit vs brute force", 30, l0_vs_bruteforce},
      {"adjoint gradients", 60, adjoint_vs_fd},
      {"planted-rank recovery", 60, planted_rank},
      {"bootstrap percentile endpoints", 0, bootstrap_exact},
      {"motif null calibration", 180, motif_null},
      {"risk-bound identity", 30, risk_identity},
      {"few-shot scaling shape", 600, few_shot_scaling},
      {"seed stability", 0, seed_stability},
      {"determinism", 0, determinism},
  };
  std::vector<bool> wanted(criteria.size(), argc <= 1);
  for (int a = 1; a < argc; ++a) {
    const int k = std::atoi(argv[a]);
    if (k >= 1 && k <= static_cast<int>(criteria.size())) wanted[static_cast<std::size_t>(k - 1)] = true;
  }
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!wanted[i]) continue;
    ++ran;
    const auto& c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s <= 0 || secs < c.limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("%s [%2zu] %-32s %8.2fs", pass ? "PASS" : "FAIL", i + 1, c.name.c_str(), secs);
    if (c.limit_s > 0) std::printf(" (limit %gs%s)", c.limit_s, in_time ? "" : ", exceeded");
    std::printf("  %s\n", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
