#pragma once

#include "protoadapt/common.hpp"
#include "protoadapt/node.hpp"
#include "protoadapt/parallel.hpp"
#include "protoadapt/prototypes.hpp"
#include "protoadapt/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

// Sparse nonnegative retrieval over the prototype memory: a proximal program
// pulled toward a learned prior softmax(v), hard top-r truncation, and the
// network that produces v from a task descriptor.
namespace protoadapt::retr {

enum class Proximity { Quadratic, KL };

struct ProximalConfig {
  double lambda = 1e-4;
  double gamma = 1e-1;
  int t_prox = 20;        // unroll length used during training, 1..20
  int max_iter = 0;       // standalone solves: overrides t_prox when > 0
  double step_size = 0;   // <= 0: 1 / Lipschitz constant of the smooth part
  double tol = 1e-10;     // on the gradient-mapping norm
  Proximity proximity = Proximity::Quadratic;
  double kl_eps = 1e-3;   // smoothing of the generalized KL proximity

  void validate() const;
  [[nodiscard]] int iteration_cap() const { return max_iter > 0 ? max_iter : t_prox; }
};

void to_json(nlohmann::json& j, const ProximalConfig& c);
void from_json(const nlohmann::json& j, ProximalConfig& c);

/// sigma_max(M)^2, the Lipschitz constant of w -> M (M^T w - theta).
double gram_norm(const Mat& m);
/// Default step for the config and memory.
double auto_step(const Mat& m, const ProximalConfig& cfg);

struct RetrievalSolution {
  Vec w;        // dense, nonnegative
  Vec w_tilde;  // after top-r (equal to w when no truncation is applied)
  std::vector<int> active_set;
  double recon_before = 0.0;
  double recon_after = 0.0;
  std::vector<double> objective_trace;  // F at the initial point and after every step
  int iterations = 0;
  int restarts = 0;
  double kkt_residual = 0.0;
  bool converged = false;
};

/// What the backward pass needs from a forward solve.
struct UnrollRecord {
  std::vector<Vec> x;                             // x_0 .. x_T
  std::vector<double> beta;                       // step k extrapolates y = x_k + beta_k (x_k - x_{k-1})
  std::vector<Eigen::Array<bool, Eigen::Dynamic, 1>> mask;  // prox pass-through pattern of step k
  double step = 0.0;
  bool init_from_prior = false;
};

Vec softmax(const Vec& v);

/// F(w) = 1/2 ||M^T w - theta||^2 + lambda * sum(w) + gamma * D(w, pi), for w >= 0.
double proximal_objective(const Mat& m, const Vec& theta_hat, const Vec& pi, const Vec& w, const ProximalConfig& cfg);

/// Accelerated proximal gradient with monotone restart. Starts at pi when
/// gamma > 0, else at 0. Throws NumericalError on a non-finite objective.
RetrievalSolution solve_proximal(const Vec& theta_hat, const Mat& m, const Vec& v, const ProximalConfig& cfg,
                                 UnrollRecord* record = nullptr);
/// Requires a frozen memory.
RetrievalSolution solve_proximal(const Vec& theta_hat, const proto::PrototypeMemory& memory, const Vec& v,
                                 const ProximalConfig& cfg);

/// Keeps the r largest entries (lowest index first on ties).
Vec hard_top_r(const Vec& w, int r);
std::vector<int> support_of(const Vec& w);

Vec compose_adapter(const Mat& m, const Vec& w_tilde);

/// Solve, then truncate to top_r (top_r <= 0 skips truncation).
RetrievalSolution retrieve(const Vec& theta_hat, const Mat& m, const Vec& v, const ProximalConfig& cfg, int top_r);

/// Row t of thetas / logits is task t.
std::vector<RetrievalSolution> retrieve_batch(const Mat& thetas, const Mat& m, const Mat& logits,
                                              const ProximalConfig& cfg, int top_r, Exec exec = Exec::Parallel);

/// Shannon entropy of w / ||w||_1 (0 log 0 = 0; 0 for the zero vector). w >= 0.
double normalized_entropy(const Vec& w);

/// Query cross-entropy of the composed adapter + lambda ||w~||_1 + eta Ent.
double outer_objective(const Mat& query_features, const std::vector<int>& query_y, const Vec& theta, const Vec& w_tilde,
                       double lambda, double eta);

/// Optional learned block applied to the descriptor before the network.
/// Ode: z -> flow of the vector field over [t0, t1]. ResidualMlp: z -> z + f(z, 0),
/// the same field taken as a single residual step.
enum class FrontKind { None, Ode, ResidualMlp };

struct FrontConfig {
  FrontKind kind = FrontKind::None;
  int hidden = 16;
  bool layer_norm = false;
  double init_scale = 0.5;
  node::SolveConfig solve = default_front_solve();

  static node::SolveConfig default_front_solve() {
    node::SolveConfig c;
    c.rtol = 1e-6;
    c.atol = 1e-8;
    return c;
  }
};

void to_json(nlohmann::json& j, const FrontConfig& c);
void from_json(const nlohmann::json& j, FrontConfig& c);
const char* front_name(FrontKind k);
FrontKind parse_front(const std::string& s);

/// Two-layer tanh network from descriptor space to K logits, stored flat,
/// behind the optional front block. params = [front field; W1, b1, W2, b2].
class RetrievalNet {
 public:
  RetrievalNet() = default;
  static RetrievalNet make(int d_in, int hidden, int K, std::uint64_t seed, const FrontConfig& front = {});

  [[nodiscard]] Vec logits(const Vec& z) const;
  /// Accumulates d(loss)/d(params) given d(loss)/d(logits).
  void backward(const Vec& z, const Vec& g_logits, Vec& g_params) const;
  /// Descriptor after the front block (z itself without one).
  [[nodiscard]] Vec front(const Vec& z) const;

  [[nodiscard]] int d_in() const { return d_in_; }
  [[nodiscard]] int hidden() const { return hidden_; }
  [[nodiscard]] int K() const { return k_; }
  [[nodiscard]] const FrontConfig& front_config() const { return front_cfg_; }
  [[nodiscard]] Eigen::Index front_params() const { return front_n_; }
  Vec params;

  [[nodiscard]] nlohmann::json to_json() const;
  static RetrievalNet from_json(const nlohmann::json& j);

 private:
  int d_in_ = 0, hidden_ = 0, k_ = 0;
  FrontConfig front_cfg_;
  Eigen::Index front_n_ = 0;
  node::VectorField field_template_;
  [[nodiscard]] node::VectorField field() const;
  [[nodiscard]] Vec mlp_logits(const Vec& z) const;
  [[nodiscard]] Eigen::Map<const Mat> w1() const;
  [[nodiscard]] Eigen::Map<const Vec> b1() const;
  [[nodiscard]] Eigen::Map<const Mat> w2() const;
  [[nodiscard]] Eigen::Map<const Vec> b2() const;
};

/// One retrieval task as seen by training and evaluation.
struct RetrievalExample {
  std::string id;
  synth::Partition partition = synth::Partition::Unassigned;
  Vec z;
  Vec theta_hat;
  Mat query_features;
  std::vector<int> query_y;
};

struct TrainConfig {
  ProximalConfig prox;
  int top_r = 10;
  bool apply_top_r = true;
  double eta = 1e-3;
  std::optional<double> outer_lambda;  // defaults to prox.lambda
  double lr = 1e-3;
  double weight_decay = 1e-3;
  int batch = 100;
  int max_epochs = 1000;
  int patience = 40;
  double jaccard_min = 0.9;
  int hidden = 32;
  FrontConfig front;
  std::uint64_t seed = 42;
  Exec exec = Exec::Parallel;

  [[nodiscard]] double lambda_out() const { return outer_lambda.value_or(prox.lambda); }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TaskOutcome {
  RetrievalSolution solution;
  Vec theta;   // composed adapter
  Vec scores;  // query logits under the composed adapter
};

TaskOutcome evaluate_example(const RetrievalNet& net, const Mat& m, const RetrievalExample& ex, const TrainConfig& cfg);
std::vector<TaskOutcome> evaluate_examples(const RetrievalNet& net, const Mat& m,
                                           const std::vector<RetrievalExample>& examples, const TrainConfig& cfg);

/// Outer loss of one example and its gradient with respect to the logits v,
/// through the unrolled solver (straight-through top-r).
struct UnrolledGrad {
  double loss = 0.0;
  Vec g_logits;
  RetrievalSolution solution;
};
UnrolledGrad unrolled_gradient(const Mat& m, const RetrievalExample& ex, const Vec& v, const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double train_objective = 0.0;
  double val_auc = 0.0;
  double mean_l0_pre = 0.0;
  double mean_l0_post = 0.0;
  double jaccard = 1.0;  // active-set agreement with the previous epoch on validation
};

struct TrainResult {
  RetrievalNet net;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_auc = 0.0;
  bool early_stopped = false;
};

/// AdamW on the outer objective. Training examples must be tagged Ret-Train,
/// validation examples Ret-Val; anything else raises LeakageError.
TrainResult train_retrieval(const std::vector<RetrievalExample>& train, const std::vector<RetrievalExample>& val,
                            const proto::PrototypeMemory& memory, const TrainConfig& cfg);
TrainResult train_retrieval(const std::vector<RetrievalExample>& train, const std::vector<RetrievalExample>& val,
                            const Mat& m, const TrainConfig& cfg);

/// Mean of per-task AUC over tasks whose query has both classes.
double mean_task_auc(const std::vector<Vec>& scores, const std::vector<std::vector<int>>& labels);

/// Single temperature T minimizing pooled NLL of sigmoid(T * s) by golden
/// section on log T in [1e-3, 1e3].
double calibrate_temperature(const std::vector<Vec>& scores, const std::vector<std::vector<int>>& labels);

struct SweepCell {
  double lambda = 0.0;
  double eta = 0.0;
  double val_auc = 0.0;
  double mean_l0_pre = 0.0;
  double mean_l0_post = 0.0;
};

using Trainer = std::function<RetrievalNet(const TrainConfig&)>;

/// Trains once per (lambda, eta) cell and evaluates on the validation tasks.
std::vector<SweepCell> sweep_lambda_eta(const std::vector<double>& lambdas, const std::vector<double>& etas,
                                        const Trainer& trainer, const std::vector<RetrievalExample>& val, const Mat& m,
                                        const TrainConfig& base);

void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells);
void write_trace_csv(const std::string& path, const std::vector<std::string>& ids,
                     const std::vector<RetrievalSolution>& sols);

}  // namespace protoadapt::retr
