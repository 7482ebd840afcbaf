#pragma once

#include "protoadapt/common.hpp"
#include "protoadapt/parallel.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <limits>
#include <string>

// Continuous-time residual blocks: f(z, t) = A z + W2 tanh(N(W1 [z; t] + b1)) + b2
// integrated with RK4 or adaptive Dormand-Prince, and gradients by the adjoint method.
namespace protoadapt::node {

class VectorField {
 public:
  VectorField() = default;
  /// A = 0, W1 ~ N(0, scale^2 / (m + 1)), W2 ~ N(0, scale^2 / hidden), biases 0.
  static VectorField make(int m, int hidden, bool layer_norm, std::uint64_t seed, double scale = 0.5);
  /// f(z) = A z, nothing else.
  static VectorField linear(const Mat& a);

  [[nodiscard]] Vec eval(const Vec& z, double t) const;
  /// Vector-Jacobian products: g_z = a^T df/dz, and a^T df/dphi accumulated into g_params.
  Vec vjp(const Vec& z, double t, const Vec& a, Vec* g_params) const;

  [[nodiscard]] VectorField negated() const;

  [[nodiscard]] int m() const { return m_; }
  [[nodiscard]] int hidden() const { return hidden_; }
  [[nodiscard]] bool layer_norm() const { return layer_norm_; }
  [[nodiscard]] Eigen::Index n_params() const { return params.size(); }
  Vec params;  // A, W1, b1, W2, b2 (column-major blocks)

  [[nodiscard]] nlohmann::json to_json() const;
  static VectorField from_json(const nlohmann::json& j);

 private:
  int m_ = 0, hidden_ = 0;
  bool layer_norm_ = false;
  struct Views;
  [[nodiscard]] Views views() const;
};

enum class Method { RK4, RK45 };

struct SolveConfig {
  Method method = Method::RK45;
  double rtol = 1e-8;
  double atol = 1e-10;
  double max_step = std::numeric_limits<double>::infinity();
  double t0 = 0.0;
  double t1 = 1.0;
  int rk4_steps = 100;  // fixed-step mode; max_step can only shorten the step
  bool stiffness_check = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const SolveConfig& c);
void from_json(const nlohmann::json& j, SolveConfig& c);
std::string describe(const SolveConfig& c);

struct SolveStats {
  int steps = 0;
  int rejected = 0;
  int evals = 0;
  bool stiff = false;        // step-size collapse detected; max_step was halved
  double final_max_step = 0;
};

using Rhs = std::function<Vec(double, const Vec&)>;

/// Integrates y' = rhs(t, y) from t_start to t_end (either direction).
/// Throws NumericalError on step underflow or a non-finite state.
Vec integrate_rhs(const Rhs& rhs, Vec y0, double t_start, double t_end, const SolveConfig& cfg, SolveStats* stats);

struct FlowResult {
  Vec z1;
  SolveStats stats;
};

FlowResult integrate(const VectorField& field, const Vec& z0, const SolveConfig& cfg);

/// Rows of z0 are independent initial states.
Mat integrate_batch(const VectorField& field, const Mat& z0, const SolveConfig& cfg, Exec exec = Exec::Parallel);

struct AdjointResult {
  Vec z1;
  Vec grad_z0;
  Vec grad_params;
  SolveStats forward;
  SolveStats backward;
};

/// dL/dz0 and dL/dphi for a loss whose gradient at z(t1) is loss_grad(z(t1)).
AdjointResult adjoint_gradient(const VectorField& field, const Vec& z0, const SolveConfig& cfg,
                               const std::function<Vec(const Vec&)>& loss_grad);

}  // namespace protoadapt::node
