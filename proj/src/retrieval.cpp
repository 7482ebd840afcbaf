#include "protoadapt/retrieval.hpp"

#include "protoadapt/io.hpp"
#include "protoadapt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace protoadapt::retr {

void ProximalConfig::validate() const {
  if (!(lambda >= 0.0) || !(gamma >= 0.0)) throw ValidationError("ProximalConfig: lambda and gamma must be >= 0");
  if (t_prox < 1 || t_prox > 20) throw ValidationError("ProximalConfig: t_prox must lie in [1, 20]");
  if (max_iter < 0) throw ValidationError("ProximalConfig: max_iter must be >= 0");
  if (!(tol >= 0.0)) throw ValidationError("ProximalConfig: tol must be >= 0");
  if (proximity == Proximity::KL && !(kl_eps > 0.0)) throw ValidationError("ProximalConfig: kl_eps must be > 0");
}

void to_json(nlohmann::json& j, const ProximalConfig& c) {
  j = {{"lambda", c.lambda},     {"gamma", c.gamma}, {"t_prox", c.t_prox},
       {"max_iter", c.max_iter}, {"step_size", c.step_size}, {"tol", c.tol},
       {"proximity", c.proximity == Proximity::KL ? "kl" : "quadratic"}, {"kl_eps", c.kl_eps}};
}

void from_json(const nlohmann::json& j, ProximalConfig& c) {
  ProximalConfig d;
  c.lambda = j.value("lambda", d.lambda);
  c.gamma = j.value("gamma", d.gamma);
  c.t_prox = j.value("t_prox", d.t_prox);
  c.max_iter = j.value("max_iter", d.max_iter);
  c.step_size = j.value("step_size", d.step_size);
  c.tol = j.value("tol", d.tol);
  c.proximity = j.value("proximity", std::string("quadratic")) == "kl" ? Proximity::KL : Proximity::Quadratic;
  c.kl_eps = j.value("kl_eps", d.kl_eps);
}

double gram_norm(const Mat& m) {
  if (m.size() == 0) return 0.0;
  const double s = Eigen::JacobiSVD<Mat>(m).singularValues()[0];
  return s * s;
}

double auto_step(const Mat& m, const ProximalConfig& cfg) {
  double lip = gram_norm(m);
  lip += cfg.proximity == Proximity::KL ? cfg.gamma / cfg.kl_eps : 2.0 * cfg.gamma;
  if (!(lip > 0.0)) lip = 1.0;
  return 1.0 / lip;
}

Vec softmax(const Vec& v) {
  if (v.size() == 0) return v;
  const Vec e = (v.array() - v.maxCoeff()).exp().matrix();
  return e / e.sum();
}

namespace {

double proximity_value(const Vec& w, const Vec& pi, const ProximalConfig& cfg) {
  if (cfg.proximity == Proximity::Quadratic) return (w - pi).squaredNorm();
  const double e = cfg.kl_eps;
  double s = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double a = w[i] + e, b = pi[i] + e;
    s += a * std::log(a / b) - a + b;
  }
  return s;
}

Vec smooth_gradient(const Mat& m, const Vec& theta, const Vec& pi, const Vec& w, const ProximalConfig& cfg) {
  Vec g = m * (m.transpose() * w - theta);
  if (cfg.gamma > 0.0) {
    if (cfg.proximity == Proximity::Quadratic)
      g += 2.0 * cfg.gamma * (w - pi);
    else
      g += cfg.gamma * ((w.array() + cfg.kl_eps) / (pi.array() + cfg.kl_eps)).log().matrix();
  }
  return g;
}

std::string trace_text(const std::vector<double>& trace) {
  std::ostringstream os;
  for (std::size_t i = 0; i < trace.size(); ++i) os << (i ? " " : "") << trace[i];
  return os.str();
}

}  // namespace

double proximal_objective(const Mat& m, const Vec& theta_hat, const Vec& pi, const Vec& w, const ProximalConfig& cfg) {
  double f = 0.5 * (m.transpose() * w - theta_hat).squaredNorm() + cfg.lambda * w.sum();
  if (cfg.gamma > 0.0) f += cfg.gamma * proximity_value(w, pi, cfg);
  return f;
}

RetrievalSolution solve_proximal(const Vec& theta_hat, const Mat& m, const Vec& v, const ProximalConfig& cfg,
                                 UnrollRecord* record) {
  cfg.validate();
  const Eigen::Index K = m.rows();
  if (theta_hat.size() != m.cols()) throw ValidationError("solve_proximal: adapter dimension mismatch");
  if (v.size() != K) throw ValidationError("solve_proximal: logits length must equal K");
  if (!v.allFinite()) throw ValidationError("solve_proximal: non-finite logits");
  if (!theta_hat.allFinite()) throw ValidationError("solve_proximal: non-finite adapter");

  const Vec pi = softmax(v);
  const double s = cfg.step_size > 0.0 ? cfg.step_size : auto_step(m, cfg);
  const bool kl = cfg.proximity == Proximity::KL;

  RetrievalSolution sol;
  Vec x = cfg.gamma > 0.0 ? pi : Vec::Zero(K);
  Vec x_prev = x;
  double f_cur = proximal_objective(m, theta_hat, pi, x, cfg);
  sol.objective_trace.push_back(f_cur);
  if (!std::isfinite(f_cur)) throw NumericalError("solve_proximal: non-finite objective at start");
  if (record) {
    *record = UnrollRecord{};
    record->x.push_back(x);
    record->step = s;
    record->init_from_prior = cfg.gamma > 0.0;
  }

  auto prox_step = [&](const Vec& y, Eigen::Array<bool, Eigen::Dynamic, 1>& mask) {
    const Vec u = y - s * smooth_gradient(m, theta_hat, pi, y, cfg);
    const Eigen::ArrayXd shifted = u.array() - s * cfg.lambda;
    mask = shifted > 0.0;
    return Vec(shifted.max(0.0).matrix());
  };

  double t = 1.0, beta = 0.0;
  const int cap = cfg.iteration_cap();
  for (int k = 0; k < cap; ++k) {
    Vec y = x + beta * (x - x_prev);
    if (kl) y = y.cwiseMax(0.0);
    Eigen::Array<bool, Eigen::Dynamic, 1> mask;
    Vec x_new = prox_step(y, mask);
    double f_new = proximal_objective(m, theta_hat, pi, x_new, cfg);
    if (!std::isfinite(f_new))
      throw NumericalError("solve_proximal: non-finite objective; trace: " + trace_text(sol.objective_trace));
    if (f_new > f_cur && beta != 0.0) {
      // Momentum overshot: plain proximal step from x.
      ++sol.restarts;
      beta = 0.0;
      t = 1.0;
      y = x;
      x_new = prox_step(y, mask);
      f_new = proximal_objective(m, theta_hat, pi, x_new, cfg);
    }
    if (f_new > f_cur) {
      // Only rounding can make a plain step ascend; x is stationary to working precision.
      sol.converged = true;
      break;
    }
    const double gm = (x_new - y).norm() / s;
    if (record) {
      record->beta.push_back(beta);
      record->mask.push_back(mask);
      record->x.push_back(x_new);
    }
    x_prev = x;
    x = std::move(x_new);
    f_cur = f_new;
    sol.objective_trace.push_back(f_cur);
    ++sol.iterations;
    const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    beta = (t - 1.0) / t_new;
    t = t_new;
    if (gm <= cfg.tol) {
      sol.converged = true;
      break;
    }
  }

  sol.w = x;
  sol.w_tilde = x;
  sol.active_set = support_of(x);
  sol.recon_before = (m.transpose() * x - theta_hat).norm();
  sol.recon_after = sol.recon_before;
  const Vec g = smooth_gradient(m, theta_hat, pi, x, cfg);
  // Fixed-point residual of the unit-step prox-gradient map.
  const Vec r = x - (x.array() - g.array() - cfg.lambda).cwiseMax(0.0).matrix();
  sol.kkt_residual = K > 0 ? r.cwiseAbs().maxCoeff() : 0.0;
  return sol;
}

RetrievalSolution solve_proximal(const Vec& theta_hat, const proto::PrototypeMemory& memory, const Vec& v,
                                 const ProximalConfig& cfg) {
  if (!memory.frozen()) throw ValidationError("solve_proximal: prototype memory must be frozen");
  return solve_proximal(theta_hat, memory.M(), v, cfg);
}

Vec hard_top_r(const Vec& w, int r) {
  if (r < 1) throw ValidationError("hard_top_r: r must be >= 1");
  if (r >= w.size()) return w;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(w.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return w[a] > w[b]; });
  Vec out = Vec::Zero(w.size());
  for (int i = 0; i < r; ++i) out[idx[static_cast<std::size_t>(i)]] = w[idx[static_cast<std::size_t>(i)]];
  return out;
}

std::vector<int> support_of(const Vec& w) {
  std::vector<int> s;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (w[i] != 0.0) s.push_back(static_cast<int>(i));
  return s;
}

Vec compose_adapter(const Mat& m, const Vec& w_tilde) {
  if (w_tilde.size() != m.rows()) throw ValidationError("compose_adapter: weight length must equal K");
  return m.transpose() * w_tilde;
}

RetrievalSolution retrieve(const Vec& theta_hat, const Mat& m, const Vec& v, const ProximalConfig& cfg, int top_r) {
  RetrievalSolution sol = solve_proximal(theta_hat, m, v, cfg);
  if (top_r > 0) {
    sol.w_tilde = hard_top_r(sol.w, top_r);
    sol.active_set = support_of(sol.w_tilde);
    sol.recon_after = (m.transpose() * sol.w_tilde - theta_hat).norm();
  }
  return sol;
}

std::vector<RetrievalSolution> retrieve_batch(const Mat& thetas, const Mat& m, const Mat& logits,
                                              const ProximalConfig& cfg, int top_r, Exec exec) {
  if (thetas.rows() != logits.rows()) throw ValidationError("retrieve_batch: row count mismatch");
  ProximalConfig c = cfg;
  if (!(c.step_size > 0.0)) c.step_size = auto_step(m, cfg);
  std::vector<RetrievalSolution> out(static_cast<std::size_t>(thetas.rows()));
  for_each_index_dynamic(exec, out.size(), [&](std::size_t t) {
    const auto i = static_cast<Eigen::Index>(t);
    out[t] = retrieve(thetas.row(i).transpose(), m, logits.row(i).transpose(), c, top_r);
  });
  return out;
}

double normalized_entropy(const Vec& w) {
  const double s = w.sum();
  if (!(s > 0.0)) return 0.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    const double p = w[i] / s;
    h -= p * std::log(p);
  }
  return h;
}

double outer_objective(const Mat& query_features, const std::vector<int>& query_y, const Vec& theta, const Vec& w_tilde,
                       double lambda, double eta) {
  if (query_features.rows() == 0) throw ValidationError("outer_objective: empty query");
  return mean_logistic_loss(theta, query_features, query_y) + lambda * w_tilde.cwiseAbs().sum() +
         eta * normalized_entropy(w_tilde);
}

// Network ------------------------------------------------------------------

void to_json(nlohmann::json& j, const FrontConfig& c) {
  j = {{"kind", front_name(c.kind)}, {"hidden", c.hidden}, {"layer_norm", c.layer_norm},
       {"init_scale", c.init_scale}, {"solve", c.solve}};
}

void from_json(const nlohmann::json& j, FrontConfig& c) {
  const FrontConfig d;
  c.kind = parse_front(j.value("kind", std::string(front_name(d.kind))));
  c.hidden = j.value("hidden", d.hidden);
  c.layer_norm = j.value("layer_norm", d.layer_norm);
  c.init_scale = j.value("init_scale", d.init_scale);
  c.solve = j.contains("solve") ? j.at("solve").get<node::SolveConfig>() : d.solve;
}

const char* front_name(FrontKind k) {
  switch (k) {
    case FrontKind::None: return "none";
    case FrontKind::Ode: return "ode";
    case FrontKind::ResidualMlp: return "mlp";
  }
  return "none";
}

FrontKind parse_front(const std::string& s) {
  if (s == "none") return FrontKind::None;
  if (s == "ode") return FrontKind::Ode;
  if (s == "mlp") return FrontKind::ResidualMlp;
  throw ValidationError("unknown front block: " + s);
}

RetrievalNet RetrievalNet::make(int d_in, int hidden, int K, std::uint64_t seed, const FrontConfig& front) {
  if (d_in < 1 || hidden < 1 || K < 1) throw ValidationError("RetrievalNet: dimensions must be positive");
  RetrievalNet n;
  n.d_in_ = d_in;
  n.hidden_ = hidden;
  n.k_ = K;
  n.front_cfg_ = front;
  if (front.kind != FrontKind::None) {
    front.solve.validate();
    n.field_template_ = node::VectorField::make(d_in, front.hidden, front.layer_norm, derive_seed(seed, 0xf407),
                                                front.init_scale);
    n.front_n_ = n.field_template_.n_params();
  }
  Rng rng = make_rng(seed, 0x2e7);
  const Eigen::Index n1 = static_cast<Eigen::Index>(hidden) * d_in;
  const Eigen::Index n2 = static_cast<Eigen::Index>(K) * hidden;
  n.params = Vec::Zero(n.front_n_ + n1 + hidden + n2 + K);
  if (n.front_n_ > 0) n.params.head(n.front_n_) = n.field_template_.params;
  n.params.segment(n.front_n_, n1) = normal_vector(rng, n1, 1.0 / std::sqrt(static_cast<double>(d_in)));
  n.params.segment(n.front_n_ + n1 + hidden, n2) = normal_vector(rng, n2, 1.0 / std::sqrt(static_cast<double>(hidden)));
  return n;
}

Eigen::Map<const Mat> RetrievalNet::w1() const { return {params.data() + front_n_, hidden_, d_in_}; }
Eigen::Map<const Vec> RetrievalNet::b1() const {
  return {params.data() + front_n_ + static_cast<Eigen::Index>(hidden_) * d_in_, hidden_};
}
Eigen::Map<const Mat> RetrievalNet::w2() const {
  return {params.data() + front_n_ + static_cast<Eigen::Index>(hidden_) * (d_in_ + 1), k_, hidden_};
}
Eigen::Map<const Vec> RetrievalNet::b2() const {
  return {params.data() + front_n_ + static_cast<Eigen::Index>(hidden_) * (d_in_ + 1) +
              static_cast<Eigen::Index>(k_) * hidden_,
          k_};
}

node::VectorField RetrievalNet::field() const {
  node::VectorField f = field_template_;
  f.params = params.head(front_n_);
  return f;
}

Vec RetrievalNet::front(const Vec& z) const {
  if (z.size() != d_in_) throw ValidationError("RetrievalNet: descriptor length mismatch");
  switch (front_cfg_.kind) {
    case FrontKind::None: return z;
    case FrontKind::Ode: return node::integrate(field(), z, front_cfg_.solve).z1;
    case FrontKind::ResidualMlp: return z + field().eval(z, 0.0);
  }
  return z;
}

Vec RetrievalNet::mlp_logits(const Vec& z) const {
  const Vec h = (w1() * z + b1()).array().tanh().matrix();
  return w2() * h + b2();
}

Vec RetrievalNet::logits(const Vec& z) const { return mlp_logits(front(z)); }

void RetrievalNet::backward(const Vec& z, const Vec& g_logits, Vec& g_params) const {
  const Eigen::Index n1 = static_cast<Eigen::Index>(hidden_) * d_in_;
  const Eigen::Index n2 = static_cast<Eigen::Index>(k_) * hidden_;
  double* g = g_params.data() + front_n_;
  // Head gradients given the front output; returns dL/dz1 for the front.
  auto head = [&](const Vec& z1) {
    const Vec h = (w1() * z1 + b1()).array().tanh().matrix();
    const Vec ga = (w2().transpose() * g_logits).cwiseProduct((1.0 - h.array().square()).matrix());
    Eigen::Map<Mat>(g, hidden_, d_in_) += ga * z1.transpose();
    Eigen::Map<Vec>(g + n1, hidden_) += ga;
    Eigen::Map<Mat>(g + n1 + hidden_, k_, hidden_) += g_logits * h.transpose();
    Eigen::Map<Vec>(g + n1 + hidden_ + n2, k_) += g_logits;
    return Vec(w1().transpose() * ga);
  };
  switch (front_cfg_.kind) {
    case FrontKind::None: head(z); return;
    case FrontKind::ResidualMlp: {
      const node::VectorField f = field();
      const Vec g_z1 = head(z + f.eval(z, 0.0));
      Vec gp = Vec::Zero(front_n_);
      f.vjp(z, 0.0, g_z1, &gp);
      g_params.head(front_n_) += gp;
      return;
    }
    case FrontKind::Ode: {
      // The adjoint's own forward solve supplies z1, so the flow is integrated once.
      const auto adj = node::adjoint_gradient(field(), z, front_cfg_.solve, head);
      g_params.head(front_n_) += adj.grad_params;
      return;
    }
  }
}

nlohmann::json RetrievalNet::to_json() const {
  nlohmann::json j{{"d_in", d_in_}, {"hidden", hidden_}, {"K", k_}, {"params", to_std(params)}, {"front", front_cfg_}};
  if (front_n_ > 0) j["front_field"] = field().to_json();
  return j;
}

RetrievalNet RetrievalNet::from_json(const nlohmann::json& j) {
  RetrievalNet n;
  n.d_in_ = j.at("d_in").get<int>();
  n.hidden_ = j.at("hidden").get<int>();
  n.k_ = j.at("K").get<int>();
  if (j.contains("front")) n.front_cfg_ = j.at("front").get<FrontConfig>();
  if (n.front_cfg_.kind != FrontKind::None) {
    n.field_template_ = node::VectorField::from_json(j.at("front_field"));
    n.front_n_ = n.field_template_.n_params();
  }
  n.params = to_vec(j.at("params").get<std::vector<double>>());
  if (n.params.size() !=
      n.front_n_ + static_cast<Eigen::Index>(n.hidden_) * (n.d_in_ + 1) + static_cast<Eigen::Index>(n.k_) * (n.hidden_ + 1))
    throw ValidationError("RetrievalNet: parameter count mismatch");
  return n;
}

// Training -----------------------------------------------------------------

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"prox", c.prox},           {"top_r", c.top_r},         {"apply_top_r", c.apply_top_r},
       {"eta", c.eta},             {"lr", c.lr},               {"weight_decay", c.weight_decay},
       {"batch", c.batch},         {"max_epochs", c.max_epochs}, {"patience", c.patience},
       {"jaccard_min", c.jaccard_min}, {"hidden", c.hidden},   {"front", c.front},
       {"seed", c.seed}};
  if (c.outer_lambda) j["outer_lambda"] = *c.outer_lambda;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  if (j.contains("prox")) c.prox = j.at("prox").get<ProximalConfig>();
  c.top_r = j.value("top_r", d.top_r);
  c.apply_top_r = j.value("apply_top_r", d.apply_top_r);
  c.eta = j.value("eta", d.eta);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch = j.value("batch", d.batch);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.patience = j.value("patience", d.patience);
  c.jaccard_min = j.value("jaccard_min", d.jaccard_min);
  c.hidden = j.value("hidden", d.hidden);
  if (j.contains("front")) c.front = j.at("front").get<FrontConfig>();
  c.seed = j.value("seed", d.seed);
  if (j.contains("outer_lambda")) c.outer_lambda = j.at("outer_lambda").get<double>();
}

TaskOutcome evaluate_example(const RetrievalNet& net, const Mat& m, const RetrievalExample& ex, const TrainConfig& cfg) {
  TaskOutcome o;
  o.solution = retrieve(ex.theta_hat, m, net.logits(ex.z), cfg.prox, cfg.apply_top_r ? cfg.top_r : 0);
  o.theta = compose_adapter(m, o.solution.w_tilde);
  o.scores = ex.query_features * o.theta;
  return o;
}

std::vector<TaskOutcome> evaluate_examples(const RetrievalNet& net, const Mat& m,
                                           const std::vector<RetrievalExample>& examples, const TrainConfig& cfg) {
  TrainConfig c = cfg;
  if (!(c.prox.step_size > 0.0)) c.prox.step_size = auto_step(m, c.prox);
  std::vector<TaskOutcome> out(examples.size());
  for_each_index_dynamic(cfg.exec, examples.size(), [&](std::size_t i) { out[i] = evaluate_example(net, m, examples[i], c); });
  return out;
}

UnrolledGrad unrolled_gradient(const Mat& m, const RetrievalExample& ex, const Vec& v, const TrainConfig& cfg) {
  if (cfg.prox.proximity != Proximity::Quadratic)
    throw ValidationError("unrolled_gradient: training supports the quadratic proximity only");
  UnrollRecord rec;
  UnrolledGrad out;
  out.solution = solve_proximal(ex.theta_hat, m, v, cfg.prox, &rec);
  RetrievalSolution& sol = out.solution;
  if (cfg.apply_top_r) {
    sol.w_tilde = hard_top_r(sol.w, cfg.top_r);
    sol.active_set = support_of(sol.w_tilde);
    sol.recon_after = (m.transpose() * sol.w_tilde - ex.theta_hat).norm();
  }
  const Vec& wt = sol.w_tilde;
  const Vec theta = m.transpose() * wt;
  const double lam = cfg.lambda_out();
  out.loss = outer_objective(ex.query_features, ex.query_y, theta, wt, lam, cfg.eta);
  if (!std::isfinite(out.loss)) throw NumericalError("unrolled_gradient: non-finite outer objective for task " + ex.id);

  // d/d theta of the mean cross-entropy.
  const Vec logits = ex.query_features * theta;
  Vec resid(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    resid[i] = sigmoid(logits[i]) - ex.query_y[static_cast<std::size_t>(i)];
  const Vec g_theta = ex.query_features.transpose() * resid / static_cast<double>(logits.size());
  Vec gw = m * g_theta;
  const double sum = wt.sum();
  const double ent = normalized_entropy(wt);
  for (Eigen::Index j = 0; j < wt.size(); ++j) {
    if (wt[j] <= 0.0) continue;
    gw[j] += lam;
    if (cfg.eta != 0.0) gw[j] += cfg.eta * (-(std::log(wt[j] / sum) + ent) / sum);
  }

  // Reverse pass through the recorded proximal steps; top-r is straight-through.
  const double s = rec.step, g2 = 2.0 * cfg.prox.gamma;
  const std::size_t T = rec.beta.size();
  std::vector<Vec> gx(T + 1, Vec::Zero(m.rows()));
  gx[T] = gw;
  Vec g_pi = Vec::Zero(m.rows());
  for (std::size_t k = T; k-- > 0;) {
    const Vec a = rec.mask[k].select(gx[k + 1], 0.0);
    const Vec gy = a - s * (m * (m.transpose() * a) + g2 * a);
    g_pi += g2 * s * a;
    gx[k] += (1.0 + rec.beta[k]) * gy;
    if (k > 0) gx[k - 1] -= rec.beta[k] * gy;
  }
  if (rec.init_from_prior) g_pi += gx[0];
  const Vec pi = softmax(v);
  out.g_logits = pi.cwiseProduct((g_pi.array() - pi.dot(g_pi)).matrix());
  return out;
}

double mean_task_auc(const std::vector<Vec>& scores, const std::vector<std::vector<int>>& labels) {
  double total = 0.0;
  int n = 0;
  for (std::size_t t = 0; t < scores.size(); ++t) {
    const auto& y = labels[t];
    const bool pos = std::find(y.begin(), y.end(), 1) != y.end();
    const bool neg = std::find(y.begin(), y.end(), 0) != y.end();
    if (!pos || !neg) continue;
    total += stats::auc(std::span<const double>(scores[t].data(), static_cast<std::size_t>(scores[t].size())), y);
    ++n;
  }
  if (n == 0) throw ValidationError("mean_task_auc: no task has both classes");
  return total / n;
}

double calibrate_temperature(const std::vector<Vec>& scores, const std::vector<std::vector<int>>& labels) {
  auto nll = [&](double log_t) {
    const double T = std::exp(log_t);
    double s = 0.0;
    for (std::size_t t = 0; t < scores.size(); ++t)
      for (Eigen::Index i = 0; i < scores[t].size(); ++i)
        s += logistic_loss(T * scores[t][i], labels[t][static_cast<std::size_t>(i)]);
    return s;
  };
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = std::log(1e-3), b = std::log(1e3);
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = nll(c), fd = nll(d);
  for (int it = 0; it < 100; ++it) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = nll(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = nll(d);
    }
  }
  return std::exp(0.5 * (a + b));
}

namespace {

void check_partition(const std::vector<RetrievalExample>& xs, synth::Partition want, const char* what) {
  for (const auto& e : xs)
    if (e.partition != want)
      throw LeakageError(std::string(what) + " example " + e.id + " is tagged " + synth::partition_name(e.partition));
}

double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0, i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

struct ValStats {
  double auc = 0.0, l0_pre = 0.0, l0_post = 0.0;
  std::vector<std::vector<int>> active;
};

ValStats validate(const RetrievalNet& net, const Mat& m, const std::vector<RetrievalExample>& val, const TrainConfig& cfg) {
  const auto out = evaluate_examples(net, m, val, cfg);
  ValStats s;
  std::vector<Vec> scores;
  std::vector<std::vector<int>> labels;
  for (std::size_t i = 0; i < out.size(); ++i) {
    scores.push_back(out[i].scores);
    labels.push_back(val[i].query_y);
    s.l0_pre += static_cast<double>(support_of(out[i].solution.w).size());
    s.l0_post += static_cast<double>(out[i].solution.active_set.size());
    s.active.push_back(out[i].solution.active_set);
  }
  s.l0_pre /= static_cast<double>(out.size());
  s.l0_post /= static_cast<double>(out.size());
  s.auc = mean_task_auc(scores, labels);
  return s;
}

}  // namespace

TrainResult train_retrieval(const std::vector<RetrievalExample>& train, const std::vector<RetrievalExample>& val,
                            const proto::PrototypeMemory& memory, const TrainConfig& cfg) {
  if (!memory.frozen()) throw ValidationError("train_retrieval: prototype memory must be frozen");
  return train_retrieval(train, val, memory.M(), cfg);
}

TrainResult train_retrieval(const std::vector<RetrievalExample>& train, const std::vector<RetrievalExample>& val,
                            const Mat& m, const TrainConfig& cfg) {
  if (train.empty() || val.empty()) throw ValidationError("train_retrieval: empty training or validation set");
  check_partition(train, synth::Partition::RetTrain, "training");
  check_partition(val, synth::Partition::RetVal, "validation");
  if (cfg.batch < 1 || cfg.max_epochs < 0 || cfg.patience < 1)
    throw ValidationError("train_retrieval: batch, patience must be >= 1 and max_epochs >= 0");
  cfg.prox.validate();

  TrainConfig c = cfg;
  if (!(c.prox.step_size > 0.0)) c.prox.step_size = auto_step(m, c.prox);
  const int K = static_cast<int>(m.rows());
  TrainResult res;
  res.net = RetrievalNet::make(static_cast<int>(train.front().z.size()), c.hidden, K, c.seed, c.front);
  RetrievalNet net = res.net;

  const Eigen::Index P = net.params.size();
  Vec adam_m = Vec::Zero(P), adam_v = Vec::Zero(P);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;

  ValStats prev = validate(net, m, val, c);
  res.best_val_auc = prev.auc;
  int since_best = 0;
  std::vector<double> losses(train.size());
  std::vector<Vec> grads(train.size());

  for (int epoch = 1; epoch <= c.max_epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(c.seed, 0x7a1000 + static_cast<std::uint64_t>(epoch));
    shuffle(order, rng);

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(c.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(c.batch));
      for_each_index_dynamic(c.exec, end - start, [&](std::size_t b) {
        const std::size_t i = order[start + b];
        const Vec v = net.logits(train[i].z);
        const UnrolledGrad ug = unrolled_gradient(m, train[i], v, c);
        grads[i] = Vec::Zero(P);
        net.backward(train[i].z, ug.g_logits, grads[i]);
        losses[i] = ug.loss;
      });
      Vec g = Vec::Zero(P);
      for (std::size_t b = start; b < end; ++b) g += grads[order[b]];
      g /= static_cast<double>(end - start);
      if (!g.allFinite()) throw NumericalError("train_retrieval: non-finite gradient at epoch " + std::to_string(epoch));
      if (c.lr > 0.0) {
        ++step;
        adam_m = b1 * adam_m + (1 - b1) * g;
        adam_v = b2 * adam_v + (1 - b2) * g.cwiseProduct(g);
        const double c1 = 1 - std::pow(b1, static_cast<double>(step));
        const double c2 = 1 - std::pow(b2, static_cast<double>(step));
        net.params *= 1.0 - c.lr * c.weight_decay;
        net.params.array() -= c.lr * (adam_m.array() / c1) / ((adam_v.array() / c2).sqrt() + eps);
      }
    }

    EpochLog log;
    log.epoch = epoch;
    for (double l : losses) log.train_objective += l;
    log.train_objective /= static_cast<double>(losses.size());
    if (!std::isfinite(log.train_objective))
      throw NumericalError("train_retrieval: objective diverged at epoch " + std::to_string(epoch));
    ValStats cur = validate(net, m, val, c);
    log.val_auc = cur.auc;
    log.mean_l0_pre = cur.l0_pre;
    log.mean_l0_post = cur.l0_post;
    double jac = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) jac += jaccard(cur.active[i], prev.active[i]);
    log.jaccard = jac / static_cast<double>(val.size());
    res.log.push_back(log);
    prev = std::move(cur);

    if (log.val_auc > res.best_val_auc) {
      res.best_val_auc = log.val_auc;
      res.best_epoch = epoch;
      res.net = net;
      since_best = 0;
    } else if (++since_best >= c.patience && log.jaccard >= c.jaccard_min) {
      res.early_stopped = true;
      break;
    }
  }
  return res;
}

std::vector<SweepCell> sweep_lambda_eta(const std::vector<double>& lambdas, const std::vector<double>& etas,
                                        const Trainer& trainer, const std::vector<RetrievalExample>& val, const Mat& m,
                                        const TrainConfig& base) {
  if (lambdas.empty() || etas.empty()) throw ValidationError("sweep_lambda_eta: empty grid");
  std::vector<SweepCell> cells;
  for (double lam : lambdas) {
    for (double eta : etas) {
      TrainConfig c = base;
      c.prox.lambda = lam;
      c.eta = eta;
      const RetrievalNet net = trainer(c);
      const ValStats s = validate(net, m, val, c);
      cells.push_back({lam, eta, s.auc, s.l0_pre, s.l0_post});
    }
  }
  return cells;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
  io::CsvWriter w(path);
  w.header({"lambda", "eta", "val_auc", "mean_l0_pre", "mean_l0_post"});
  for (const auto& c : cells)
    w.row({io::num(c.lambda), io::num(c.eta), io::num(c.val_auc), io::num(c.mean_l0_pre), io::num(c.mean_l0_post)});
}

void write_trace_csv(const std::string& path, const std::vector<std::string>& ids,
                     const std::vector<RetrievalSolution>& sols) {
  io::CsvWriter w(path);
  w.header({"task_id", "iter", "objective", "restarts", "kkt_residual"});
  for (std::size_t t = 0; t < sols.size(); ++t)
    for (std::size_t k = 0; k < sols[t].objective_trace.size(); ++k)
      w.row({ids[t], std::to_string(k), io::num(sols[t].objective_trace[k]), std::to_string(sols[t].restarts),
             io::num(sols[t].kkt_residual)});
}

}  // namespace protoadapt::retr
