#pragma once

#include "protoadapt/common.hpp"
#include "protoadapt/model.hpp"
#include "protoadapt/parallel.hpp"
#include "protoadapt/prototypes.hpp"
#include "protoadapt/synthdata.hpp"

#include <optional>
#include <string>
#include <vector>

// Empirical check of the memory approximation bound: the r-sparse approximant
// of a task's true adapter, the deterministic excess-risk terms, and the
// stochastic capacity term as a scaling law.
namespace protoadapt::risk {

/// Logistic loss over linear predictors is 1-Lipschitz in the margin, so on
/// inputs with ||x|| <= r_x it is r_x-Lipschitz in theta.
double lipschitz_constant(double r_x);
/// Largest row norm of a feature block.
double domain_radius(const Mat& features);
/// sup of the logistic loss over ||x|| <= r_x, ||theta|| <= r_theta.
double loss_bound(double r_x, double r_theta);

/// sqrt((r log K + log(1/delta)) / n_q), constant C = 1 (un-normalized).
double sparsity_capacity_term(int r, double K, int n_q, double delta);

struct BoundReport {
  std::string task_id;
  double eps_app = 0.0;       // ||theta - Q Q^T theta||
  double eps_task = 0.0;      // this task's r-sparse coverage residual
  double off_subspace = 0.0;  // ||M^T w - Q (M Q)^T w||, zero for an in-subspace memory
  double eps_M_upper = 0.0;   // certificate upper end
  double approx_dist = 0.0;   // ||theta - M^T w||
  double L = 0.0;
  double emp_risk_mem = 0.0;
  double emp_risk_oracle = 0.0;
  double emp_gap = 0.0;
  double bound_task = 0.0;    // L (eps_app + eps_task + off_subspace)
  double bound_cert = 0.0;    // L (eps_app + eps_M_upper + off_subspace)
  std::optional<double> gen_gap_mem;     // |empirical - fresh-sample risk|
  std::optional<double> gen_gap_oracle;
  bool triangle_ok = false;
  bool satisfied_task = false;
  bool satisfied_cert = false;
};

struct BoundConfig {
  int r_sparse = 1;
  proto::L0Mode mode = proto::L0Mode::Exact;
  double tolerance = 1e-9;
};

/// Requires a frozen memory with a certificate and task.theta_true.
/// `fresh`, when given, is an independent sample for the generalization gaps.
BoundReport check_bound(const synth::EpisodeTask& task, const proto::PrototypeMemory& memory, const FeatureMap& fm,
                        const SampleSet& query, const BoundConfig& cfg, const SampleSet* fresh = nullptr);

struct BoundSummary {
  std::size_t n_tasks = 0;
  double triangle_rate = 0.0;
  double task_rate = 0.0;
  double cert_rate = 0.0;
  double max_triangle_slack = 0.0;  // max(lhs - rhs), <= tolerance when every check passes
  double eps_M_upper = 0.0;
  double median_eps_task = 0.0;
};

std::vector<BoundReport> check_bounds(const std::vector<const synth::EpisodeTask*>& tasks,
                                      const proto::PrototypeMemory& memory, const FeatureMap& fm,
                                      const BoundConfig& cfg, Exec exec = Exec::Parallel);
BoundSummary summarize(const std::vector<BoundReport>& reports);

struct GapPoint {
  int n_q = 0;
  double mean_gap = 0.0;
  double fitted = 0.0;  // c / sqrt(n_q)
  double capacity = 0.0;
};

struct GapScaling {
  std::vector<GapPoint> points;
  double c = 0.0;            // least-squares coefficient of gap ~ c / sqrt(n_q)
  double loglog_slope = 0.0;
  double max_ratio = 0.0;    // max over n_q of gap / fitted
  double min_ratio = 0.0;
  bool within_2x = false;
};

/// Mean |R_hat_nq(theta_mem) - R(theta_mem)| over tasks, with R estimated on
/// n_pop fresh samples. Samples come from the generator world.
GapScaling gap_scaling(const synth::SyntheticWorld& world, const std::vector<const synth::EpisodeTask*>& tasks,
                       const proto::PrototypeMemory& memory, const BoundConfig& cfg, const std::vector<int>& n_qs,
                       int n_pop, int n_draws, std::uint64_t seed, double delta = 0.1, Exec exec = Exec::Parallel);

void write_bound_csv(const std::string& path, const std::vector<BoundReport>& reports);
void write_gap_csv(const std::string& path, const GapScaling& g);
std::string summary_line(const BoundSummary& s);

}  // namespace protoadapt::risk
