#include "protoadapt/node.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace protoadapt::node {

struct VectorField::Views {
  Eigen::Map<const Mat> a, w1;
  Eigen::Map<const Vec> b1;
  Eigen::Map<const Mat> w2;
  Eigen::Map<const Vec> b2;
};

namespace {

Eigen::Index param_count(int m, int h) {
  return static_cast<Eigen::Index>(m) * m + static_cast<Eigen::Index>(h) * (m + 1) + h +
         static_cast<Eigen::Index>(m) * h + m;
}

constexpr double kLnEps = 1e-5;

}  // namespace

VectorField::Views VectorField::views() const {
  const double* p = params.data();
  const Eigen::Index mm = static_cast<Eigen::Index>(m_) * m_;
  const Eigen::Index w1n = static_cast<Eigen::Index>(hidden_) * (m_ + 1);
  const Eigen::Index w2n = static_cast<Eigen::Index>(m_) * hidden_;
  return {Eigen::Map<const Mat>(p, m_, m_), Eigen::Map<const Mat>(p + mm, hidden_, m_ + 1),
          Eigen::Map<const Vec>(p + mm + w1n, hidden_), Eigen::Map<const Mat>(p + mm + w1n + hidden_, m_, hidden_),
          Eigen::Map<const Vec>(p + mm + w1n + hidden_ + w2n, m_)};
}

VectorField VectorField::make(int m, int hidden, bool layer_norm, std::uint64_t seed, double scale) {
  if (m < 1 || hidden < 1) throw ValidationError("VectorField: dimensions must be positive");
  VectorField f;
  f.m_ = m;
  f.hidden_ = hidden;
  f.layer_norm_ = layer_norm;
  f.params = Vec::Zero(param_count(m, hidden));
  Rng rng = make_rng(seed, 0x0de);
  const Eigen::Index mm = static_cast<Eigen::Index>(m) * m;
  const Eigen::Index w1n = static_cast<Eigen::Index>(hidden) * (m + 1);
  f.params.segment(mm, w1n) = normal_vector(rng, w1n, scale / std::sqrt(m + 1.0));
  f.params.segment(mm + w1n + hidden, static_cast<Eigen::Index>(m) * hidden) =
      normal_vector(rng, static_cast<Eigen::Index>(m) * hidden, scale / std::sqrt(static_cast<double>(hidden)));
  return f;
}

VectorField VectorField::linear(const Mat& a) {
  if (a.rows() != a.cols() || a.rows() < 1) throw ValidationError("VectorField::linear: A must be square");
  VectorField f;
  f.m_ = static_cast<int>(a.rows());
  f.hidden_ = 1;
  f.params = Vec::Zero(param_count(f.m_, 1));
  f.params.head(a.size()) = Eigen::Map<const Vec>(a.data(), a.size());
  return f;
}

Vec VectorField::eval(const Vec& z, double t) const {
  if (z.size() != m_) throw ValidationError("VectorField: state dimension mismatch");
  const Views v = views();
  Vec u = v.w1.leftCols(m_) * z + v.w1.col(m_) * t + v.b1;
  if (layer_norm_) {
    const double mu = u.mean();
    const double sd = std::sqrt((u.array() - mu).square().mean() + kLnEps);
    u = ((u.array() - mu) / sd).matrix();
  }
  return v.a * z + v.w2 * u.array().tanh().matrix() + v.b2;
}

Vec VectorField::vjp(const Vec& z, double t, const Vec& a, Vec* g_params) const {
  const Views v = views();
  const Vec pre = v.w1.leftCols(m_) * z + v.w1.col(m_) * t + v.b1;
  Vec n = pre;
  double sd = 1.0;
  if (layer_norm_) {
    const double mu = pre.mean();
    sd = std::sqrt((pre.array() - mu).square().mean() + kLnEps);
    n = ((pre.array() - mu) / sd).matrix();
  }
  const Vec h = n.array().tanh().matrix();
  const Vec gn = (v.w2.transpose() * a).cwiseProduct((1.0 - h.array().square()).matrix());
  Vec gu = gn;
  if (layer_norm_) gu = ((gn.array() - gn.mean() - n.array() * gn.dot(n) / n.size()) / sd).matrix();

  if (g_params) {
    double* p = g_params->data();
    const Eigen::Index mm = static_cast<Eigen::Index>(m_) * m_;
    const Eigen::Index w1n = static_cast<Eigen::Index>(hidden_) * (m_ + 1);
    Eigen::Map<Mat>(p, m_, m_) += a * z.transpose();
    Eigen::Map<Mat> gw1(p + mm, hidden_, m_ + 1);
    gw1.leftCols(m_) += gu * z.transpose();
    gw1.col(m_) += gu * t;
    Eigen::Map<Vec>(p + mm + w1n, hidden_) += gu;
    Eigen::Map<Mat>(p + mm + w1n + hidden_, m_, hidden_) += a * h.transpose();
    Eigen::Map<Vec>(p + mm + w1n + hidden_ + static_cast<Eigen::Index>(m_) * hidden_, m_) += a;
  }
  return v.a.transpose() * a + v.w1.leftCols(m_).transpose() * gu;
}

VectorField VectorField::negated() const {
  VectorField f = *this;
  const Eigen::Index mm = static_cast<Eigen::Index>(m_) * m_;
  const Eigen::Index w1n = static_cast<Eigen::Index>(hidden_) * (m_ + 1);
  f.params.head(mm) *= -1.0;
  f.params.tail(params.size() - mm - w1n - hidden_) *= -1.0;
  return f;
}

nlohmann::json VectorField::to_json() const {
  return {{"m", m_}, {"hidden", hidden_}, {"layer_norm", layer_norm_}, {"params", to_std(params)}};
}

VectorField VectorField::from_json(const nlohmann::json& j) {
  VectorField f;
  f.m_ = j.at("m").get<int>();
  f.hidden_ = j.at("hidden").get<int>();
  f.layer_norm_ = j.at("layer_norm").get<bool>();
  f.params = to_vec(j.at("params").get<std::vector<double>>());
  if (f.params.size() != param_count(f.m_, f.hidden_)) throw ValidationError("VectorField: parameter count mismatch");
  return f;
}

// Solvers --------------------------------------------------------------------

void SolveConfig::validate() const {
  if (!(rtol > 0.0) || !(atol > 0.0)) throw ValidationError("SolveConfig: tolerances must be positive");
  if (!(t0 < t1)) throw ValidationError("SolveConfig: t0 must be < t1");
  if (!(max_step > 0.0)) throw ValidationError("SolveConfig: max_step must be positive");
  if (rk4_steps < 1) throw ValidationError("SolveConfig: rk4_steps must be >= 1");
}

void to_json(nlohmann::json& j, const SolveConfig& c) {
  j = {{"method", c.method == Method::RK4 ? "rk4" : "rk45"},
       {"rtol", c.rtol},
       {"atol", c.atol},
       {"max_step", std::isinf(c.max_step) ? nlohmann::json("inf") : nlohmann::json(c.max_step)},
       {"t0", c.t0},
       {"t1", c.t1},
       {"rk4_steps", c.rk4_steps},
       {"stiffness_check", c.stiffness_check}};
}

void from_json(const nlohmann::json& j, SolveConfig& c) {
  SolveConfig d;
  c.method = j.value("method", std::string("rk45")) == "rk4" ? Method::RK4 : Method::RK45;
  c.rtol = j.value("rtol", d.rtol);
  c.atol = j.value("atol", d.atol);
  c.max_step = d.max_step;
  if (j.contains("max_step") && j.at("max_step").is_number()) c.max_step = j.at("max_step").get<double>();
  c.t0 = j.value("t0", d.t0);
  c.t1 = j.value("t1", d.t1);
  c.rk4_steps = j.value("rk4_steps", d.rk4_steps);
  c.stiffness_check = j.value("stiffness_check", d.stiffness_check);
}

std::string describe(const SolveConfig& c) {
  std::ostringstream os;
  os << "method=" << (c.method == Method::RK4 ? "rk4" : "rk45") << " rtol=" << c.rtol << " atol=" << c.atol
     << " max_step=" << c.max_step << " t0=" << c.t0 << " t1=" << c.t1;
  if (c.method == Method::RK4) os << " steps=" << c.rk4_steps;
  return os.str();
}

namespace {

void check_finite(const Vec& y, double t) {
  if (!y.allFinite()) throw NumericalError("ode: non-finite state at t=" + std::to_string(t));
}

Vec rk4(const Rhs& rhs, Vec y, double ta, double tb, const SolveConfig& cfg, SolveStats& st) {
  const double span = tb - ta;
  int n = cfg.rk4_steps;
  if (std::abs(span) / n > cfg.max_step) n = static_cast<int>(std::ceil(std::abs(span) / cfg.max_step));
  const double h = span / n;
  for (int i = 0; i < n; ++i) {
    const double t = ta + i * h;
    const Vec k1 = rhs(t, y);
    const Vec k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1);
    const Vec k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2);
    const Vec k4 = rhs(t + h, y + h * k3);
    y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    check_finite(y, t + h);
  }
  st.steps = n;
  st.evals = 4 * n;
  st.final_max_step = cfg.max_step;
  return y;
}

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                 e7 = -1.0 / 40;

double err_norm(const Vec& e, const Vec& y0, const Vec& y1, const SolveConfig& cfg) {
  const Eigen::ArrayXd sc = cfg.atol + cfg.rtol * y0.array().abs().max(y1.array().abs());
  return std::sqrt((e.array() / sc).square().mean());
}

Vec rk45(const Rhs& rhs, Vec y, double ta, double tb, const SolveConfig& cfg, SolveStats& st) {
  const double span = tb - ta;
  const double dir = span > 0 ? 1.0 : -1.0;
  double max_step = std::min(cfg.max_step, std::abs(span));
  const double floor_h = 16.0 * std::numeric_limits<double>::epsilon() * std::max({1.0, std::abs(ta), std::abs(tb)});

  Vec k1 = rhs(ta, y);
  st.evals = 1;
  // Initial step from the scaled derivative magnitudes.
  double h;
  {
    const Eigen::ArrayXd sc = cfg.atol + cfg.rtol * y.array().abs();
    const double d0 = std::sqrt((y.array() / sc).square().mean());
    const double d1 = std::sqrt((k1.array() / sc).square().mean());
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, max_step);
    const Vec f1 = rhs(ta + dir * h0, y + dir * h0 * k1);
    ++st.evals;
    const double d2 = std::sqrt(((f1 - k1).array() / sc).square().mean()) / h0;
    const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / std::max(d1, d2), 0.2);
    h = std::min({100.0 * h0, h1, max_step});
  }

  double t = ta;
  int stiff_count = 0, non_stiff = 0;
  while (dir * (tb - t) > 0) {
    if (h < floor_h) throw NumericalError("ode: step size underflow at t=" + std::to_string(t) + " (stiff problem?)");
    if (h > dir * (tb - t)) h = dir * (tb - t);
    const double hs = dir * h;
    const Vec k2 = rhs(t + c2 * hs, y + hs * (a21 * k1));
    const Vec k3 = rhs(t + c3 * hs, y + hs * (a31 * k1 + a32 * k2));
    const Vec k4 = rhs(t + c4 * hs, y + hs * (a41 * k1 + a42 * k2 + a43 * k3));
    const Vec k5 = rhs(t + c5 * hs, y + hs * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    const Vec y6 = y + hs * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    const Vec k6 = rhs(t + hs, y6);
    const Vec y_new = y + hs * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    const Vec k7 = rhs(t + hs, y_new);
    st.evals += 6;
    const Vec err = hs * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const double en = err_norm(err, y, y_new, cfg);
    if (!std::isfinite(en)) throw NumericalError("ode: non-finite error estimate at t=" + std::to_string(t));

    if (en <= 1.0) {
      const bool last = h >= dir * (tb - t);
      t = last ? tb : t + hs;
      y = y_new;
      k1 = k7;
      ++st.steps;
      if (cfg.stiffness_check) {
        // Hairer's test: h * |lambda| estimated from the last two stages sits at
        // the stability boundary (3.25) for 15 accepted steps.
        const double den = (y - y6).squaredNorm();
        if (den > 0.0 && h * std::sqrt((k1 - k6).squaredNorm() / den) > 3.25) {
          non_stiff = 0;
          if (++stiff_count == 15) {
            st.stiff = true;
            max_step = std::max(floor_h, 0.5 * std::min(max_step, h));
            stiff_count = 0;
          }
        } else if (++non_stiff == 6) {
          stiff_count = 0;
        }
      }
      const double fac = en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
      h = std::min(h * fac, max_step);
    } else {
      ++st.rejected;
      h *= std::max(0.2, 0.9 * std::pow(en, -0.2));
    }
  }
  st.final_max_step = max_step;
  return y;
}

}  // namespace

Vec integrate_rhs(const Rhs& rhs, Vec y0, double t_start, double t_end, const SolveConfig& cfg, SolveStats* stats) {
  SolveStats local;
  SolveStats& st = stats ? *stats : local;
  st = SolveStats{};
  check_finite(y0, t_start);
  if (t_start == t_end) return y0;
  if (cfg.method == Method::RK4) return rk4(rhs, std::move(y0), t_start, t_end, cfg, st);
  return rk45(rhs, std::move(y0), t_start, t_end, cfg, st);
}

FlowResult integrate(const VectorField& field, const Vec& z0, const SolveConfig& cfg) {
  cfg.validate();
  if (z0.size() != field.m()) throw ValidationError("integrate: state dimension mismatch");
  FlowResult r;
  r.z1 = integrate_rhs([&](double t, const Vec& z) { return field.eval(z, t); }, z0, cfg.t0, cfg.t1, cfg, &r.stats);
  return r;
}

Mat integrate_batch(const VectorField& field, const Mat& z0, const SolveConfig& cfg, Exec exec) {
  Mat out(z0.rows(), z0.cols());
  for_each_index_dynamic(exec, static_cast<std::size_t>(z0.rows()), [&](std::size_t i) {
    const auto r = static_cast<Eigen::Index>(i);
    out.row(r) = integrate(field, z0.row(r).transpose(), cfg).z1.transpose();
  });
  return out;
}

AdjointResult adjoint_gradient(const VectorField& field, const Vec& z0, const SolveConfig& cfg,
                               const std::function<Vec(const Vec&)>& loss_grad) {
  AdjointResult res;
  const FlowResult fwd = integrate(field, z0, cfg);
  res.z1 = fwd.z1;
  res.forward = fwd.stats;
  const Vec a1 = loss_grad(fwd.z1);
  if (!a1.allFinite()) throw NumericalError("adjoint_gradient: non-finite loss gradient");
  const Eigen::Index m = field.m(), P = field.n_params();

  // Augmented state [z, a, g]: z' = f, a' = -a^T df/dz, g' = -a^T df/dphi, run from t1 back to t0.
  Vec s(2 * m + P);
  s << fwd.z1, a1, Vec::Zero(P);
  auto rhs = [&](double t, const Vec& y) {
    Vec dy(y.size());
    const Vec z = y.head(m), a = y.segment(m, m);
    dy.head(m) = field.eval(z, t);
    Vec gp = Vec::Zero(P);
    dy.segment(m, m) = -field.vjp(z, t, a, &gp);
    dy.tail(P) = -gp;
    return dy;
  };
  Vec s0;
  try {
    s0 = integrate_rhs(rhs, s, cfg.t1, cfg.t0, cfg, &res.backward);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + "; forward solve took " + std::to_string(fwd.stats.steps) +
                         " steps with " + std::to_string(fwd.stats.rejected) + " rejections");
  }
  res.grad_z0 = s0.segment(m, m);
  res.grad_params = s0.tail(P);
  return res;
}

}  // namespace protoadapt::node
