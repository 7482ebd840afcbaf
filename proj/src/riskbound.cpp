#include "protoadapt/riskbound.hpp"

#include "protoadapt/io.hpp"
#include "protoadapt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace protoadapt::risk {

double lipschitz_constant(double r_x) {
  if (!std::isfinite(r_x) || r_x < 0.0) throw ValidationError("lipschitz_constant: domain radius must be finite and >= 0");
  return r_x;
}

double domain_radius(const Mat& features) {
  if (features.rows() == 0) throw ValidationError("domain_radius: empty feature block");
  const double r = features.rowwise().norm().maxCoeff();
  if (!std::isfinite(r)) throw ValidationError("domain_radius: unbounded (non-finite) features");
  return r;
}

double loss_bound(double r_x, double r_theta) {
  if (!std::isfinite(r_x) || !std::isfinite(r_theta) || r_x < 0 || r_theta < 0)
    throw ValidationError("loss_bound: radii must be finite and >= 0");
  const double m = r_x * r_theta;
  return m + std::log1p(std::exp(-m));  // log(1 + e^m), stable
}

double sparsity_capacity_term(int r, double K, int n_q, double delta) {
  if (r < 1 || !(K >= 1.0) || n_q < 1 || !(delta > 0.0 && delta < 1.0))
    throw ValidationError("sparsity_capacity_term: need r, K, n_q >= 1 and delta in (0, 1)");
  return std::sqrt((r * std::log(K) + std::log(1.0 / delta)) / n_q);
}

namespace {

struct Approximant {
  Vec theta_mem;
  double eps_app, eps_task, off_subspace;
};

Approximant approximate(const Vec& theta, const proto::PrototypeMemory& memory, const Mat& lifted, const BoundConfig& cfg) {
  const Mat& q = memory.projector().q;
  const Vec u = q.transpose() * theta;
  const auto fit = proto::l0_fit(u, lifted, cfg.r_sparse, cfg.mode);
  Approximant a;
  a.theta_mem = memory.M().transpose() * fit.w;
  a.eps_app = (theta - q * u).norm();
  a.eps_task = fit.residual;
  a.off_subspace = (a.theta_mem - q * (lifted.transpose() * fit.w)).norm();
  return a;
}

void require_ready(const proto::PrototypeMemory& memory) {
  if (!memory.frozen()) throw ValidationError("risk bound needs a frozen memory");
  if (!memory.certificate()) throw ValidationError("risk bound needs a coverage certificate");
}

}  // namespace

BoundReport check_bound(const synth::EpisodeTask& task, const proto::PrototypeMemory& memory, const FeatureMap& fm,
                        const SampleSet& query, const BoundConfig& cfg, const SampleSet* fresh) {
  require_ready(memory);
  if (!task.theta_true) throw ValidationError("check_bound: task " + task.id + " has no ground-truth adapter");
  if (query.size() == 0) throw ValidationError("check_bound: empty query sample");
  const Vec& theta = *task.theta_true;
  const auto a = approximate(theta, memory, memory.lifted(), cfg);

  BoundReport r;
  r.task_id = task.id;
  r.eps_app = a.eps_app;
  r.eps_task = a.eps_task;
  r.off_subspace = a.off_subspace;
  r.eps_M_upper = memory.eps_upper();
  r.approx_dist = (theta - a.theta_mem).norm();
  r.triangle_ok = r.approx_dist <= r.eps_app + r.eps_task + r.off_subspace + cfg.tolerance;

  const Mat phi = fm.apply_rows(query.x);
  r.L = lipschitz_constant(domain_radius(phi));
  r.emp_risk_mem = mean_logistic_loss(a.theta_mem, phi, query.y);
  r.emp_risk_oracle = mean_logistic_loss(theta, phi, query.y);
  r.emp_gap = std::abs(r.emp_risk_mem - r.emp_risk_oracle);
  r.bound_task = r.L * (r.eps_app + r.eps_task + r.off_subspace);
  r.bound_cert = r.L * (r.eps_app + r.eps_M_upper + r.off_subspace);
  r.satisfied_task = r.emp_gap <= r.bound_task + cfg.tolerance;
  r.satisfied_cert = r.emp_gap <= r.bound_cert + cfg.tolerance;

  if (fresh) {
    const Mat f = fm.apply_rows(fresh->x);
    r.gen_gap_mem = std::abs(r.emp_risk_mem - mean_logistic_loss(a.theta_mem, f, fresh->y));
    r.gen_gap_oracle = std::abs(r.emp_risk_oracle - mean_logistic_loss(theta, f, fresh->y));
  }
  return r;
}

std::vector<BoundReport> check_bounds(const std::vector<const synth::EpisodeTask*>& tasks,
                                      const proto::PrototypeMemory& memory, const FeatureMap& fm,
                                      const BoundConfig& cfg, Exec exec) {
  require_ready(memory);
  std::vector<BoundReport> out(tasks.size());
  for_each_index(exec, tasks.size(), [&](std::size_t i) {
    out[i] = check_bound(*tasks[i], memory, fm, tasks[i]->query, cfg);
  });
  return out;
}

BoundSummary summarize(const std::vector<BoundReport>& reports) {
  if (reports.empty()) throw ValidationError("summarize: no bound reports");
  BoundSummary s;
  s.n_tasks = reports.size();
  s.max_triangle_slack = -std::numeric_limits<double>::infinity();
  std::vector<double> eps;
  std::size_t tri = 0, task = 0, cert = 0;
  for (const auto& r : reports) {
    tri += r.triangle_ok;
    task += r.satisfied_task;
    cert += r.satisfied_cert;
    s.max_triangle_slack = std::max(s.max_triangle_slack, r.approx_dist - (r.eps_app + r.eps_task + r.off_subspace));
    eps.push_back(r.eps_task);
  }
  const double n = static_cast<double>(reports.size());
  s.triangle_rate = tri / n;
  s.task_rate = task / n;
  s.cert_rate = cert / n;
  s.eps_M_upper = reports.front().eps_M_upper;
  s.median_eps_task = stats::median(eps);
  return s;
}

GapScaling gap_scaling(const synth::SyntheticWorld& world, const std::vector<const synth::EpisodeTask*>& tasks,
                       const proto::PrototypeMemory& memory, const BoundConfig& cfg, const std::vector<int>& n_qs,
                       int n_pop, int n_draws, std::uint64_t seed, double delta, Exec exec) {
  require_ready(memory);
  if (tasks.empty() || n_qs.size() < 2) throw ValidationError("gap_scaling: need tasks and at least two n_q values");
  if (n_pop < 1 || n_draws < 1) throw ValidationError("gap_scaling: n_pop and n_draws must be >= 1");
  for (int n : n_qs)
    if (n < 1) throw ValidationError("gap_scaling: n_q must be >= 1");

  const Mat lifted = memory.lifted();
  const FeatureMap& fm = world.feature_map;
  // gaps(t, k): mean over draws of |R_hat - R| for task t at n_qs[k]
  Mat gaps(static_cast<Eigen::Index>(tasks.size()), static_cast<Eigen::Index>(n_qs.size()));
  for_each_index_dynamic(exec, tasks.size(), [&](std::size_t t) {
    const auto& task = *tasks[t];
    if (!task.theta_true) throw ValidationError("gap_scaling: task " + task.id + " has no ground-truth adapter");
    const Vec theta_mem = approximate(*task.theta_true, memory, lifted, cfg).theta_mem;
    Rng rng = make_rng(seed, t);
    const SampleSet pop = synth::draw_samples(world, *task.theta_true, task.planted_cluster, n_pop, rng);
    const double risk = mean_logistic_loss(theta_mem, fm.apply_rows(pop.x), pop.y);
    for (std::size_t k = 0; k < n_qs.size(); ++k) {
      double acc = 0.0;
      for (int b = 0; b < n_draws; ++b) {
        const SampleSet s = synth::draw_samples(world, *task.theta_true, task.planted_cluster, n_qs[k], rng);
        acc += std::abs(mean_logistic_loss(theta_mem, fm.apply_rows(s.x), s.y) - risk);
      }
      gaps(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = acc / n_draws;
    }
  });

  GapScaling g;
  double num = 0.0, den = 0.0;
  std::vector<double> lx, ly;
  for (std::size_t k = 0; k < n_qs.size(); ++k) {
    GapPoint p;
    p.n_q = n_qs[k];
    p.mean_gap = gaps.col(static_cast<Eigen::Index>(k)).mean();
    p.capacity = sparsity_capacity_term(cfg.r_sparse, memory.K(), p.n_q, delta);
    const double x = 1.0 / std::sqrt(static_cast<double>(p.n_q));
    num += x * p.mean_gap;
    den += x * x;
    lx.push_back(std::log(static_cast<double>(p.n_q)));
    ly.push_back(std::log(std::max(p.mean_gap, 1e-300)));
    g.points.push_back(p);
  }
  g.c = num / den;
  const double mx = stats::mean(lx), my = stats::mean(ly);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < lx.size(); ++k) {
    sxy += (lx[k] - mx) * (ly[k] - my);
    sxx += (lx[k] - mx) * (lx[k] - mx);
  }
  g.loglog_slope = sxy / sxx;
  g.max_ratio = 0.0;
  g.min_ratio = std::numeric_limits<double>::infinity();
  for (auto& p : g.points) {
    p.fitted = g.c / std::sqrt(static_cast<double>(p.n_q));
    const double ratio = p.mean_gap / p.fitted;
    g.max_ratio = std::max(g.max_ratio, ratio);
    g.min_ratio = std::min(g.min_ratio, ratio);
  }
  g.within_2x = g.max_ratio <= 2.0 && g.min_ratio >= 0.5;
  return g;
}

void write_bound_csv(const std::string& path, const std::vector<BoundReport>& reports) {
  io::CsvWriter w(path);
  w.header({"task_id", "eps_app", "eps_task", "off_subspace", "eps_M_upper", "approx_dist", "L", "emp_risk_mem",
            "emp_risk_oracle", "emp_gap", "bound_task", "bound_cert", "triangle_ok", "satisfied_task",
            "satisfied_cert"});
  for (const auto& r : reports)
    w.row({r.task_id, io::num(r.eps_app), io::num(r.eps_task), io::num(r.off_subspace), io::num(r.eps_M_upper),
           io::num(r.approx_dist), io::num(r.L), io::num(r.emp_risk_mem), io::num(r.emp_risk_oracle),
           io::num(r.emp_gap), io::num(r.bound_task), io::num(r.bound_cert), r.triangle_ok ? "1" : "0",
           r.satisfied_task ? "1" : "0", r.satisfied_cert ? "1" : "0"});
}

void write_gap_csv(const std::string& path, const GapScaling& g) {
  io::CsvWriter w(path);
  w.header({"n_q", "mean_gap", "fitted_c_over_sqrt_n", "capacity_term_unnormalized"});
  for (const auto& p : g.points) w.row({std::to_string(p.n_q), io::num(p.mean_gap), io::num(p.fitted), io::num(p.capacity)});
}

std::string summary_line(const BoundSummary& s) {
  std::ostringstream os;
  os << "riskbound tasks=" << s.n_tasks << " triangle_rate=" << io::num(s.triangle_rate)
     << " task_bound_rate=" << io::num(s.task_rate) << " cert_bound_rate=" << io::num(s.cert_rate)
     << " max_triangle_slack=" << io::num(s.max_triangle_slack) << " eps_M_upper=" << io::num(s.eps_M_upper)
     << " median_eps_task=" << io::num(s.median_eps_task);
  return os.str();
}

}  // namespace protoadapt::risk
