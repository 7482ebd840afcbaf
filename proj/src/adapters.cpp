#include "protoadapt/adapters.hpp"

#include "protoadapt/io.hpp"

#include <cmath>

namespace protoadapt::adapters {

Vec ridge_fit(const Mat& features, const std::vector<int>& y, double alpha) {
  if (features.rows() == 0) throw ValidationError("ridge_fit: empty design");
  if (static_cast<std::size_t>(features.rows()) != y.size()) throw ValidationError("ridge_fit: label count mismatch");
  if (!(alpha > 0.0)) throw ValidationError("ridge_fit: alpha must be positive");
  if (!features.allFinite()) throw ValidationError("ridge_fit: non-finite features");
  Vec t(features.rows());
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
  Mat gram = features.transpose() * features;
  gram.diagonal().array() += alpha;
  return gram.ldlt().solve(features.transpose() * t);
}

Vec ridge_adapter(const synth::EpisodeTask& task, const FeatureMap& fm, double alpha) {
  if (task.support.size() == 0) throw ValidationError("ridge_adapter: empty support for " + task.id);
  return ridge_fit(fm.apply_rows(task.support.x), task.support.y, alpha);
}

Vec ridge_adapter_full(const synth::EpisodeTask& task, const FeatureMap& fm, double alpha) {
  const SampleSet all = task.support.concat(task.query);
  return ridge_fit(fm.apply_rows(all.x), all.y, alpha);
}

AdapterMatrix assemble_theta(const std::vector<Vec>& adapters, std::vector<std::string> task_ids, double ridge_alpha) {
  if (adapters.empty()) throw ValidationError("assemble_theta: no adapters");
  const Eigen::Index d = adapters.front().size();
  if (!task_ids.empty() && task_ids.size() != adapters.size())
    throw ValidationError("assemble_theta: task id count mismatch");
  AdapterMatrix out;
  out.rows.resize(static_cast<Eigen::Index>(adapters.size()), d);
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    if (adapters[i].size() != d) throw ValidationError("assemble_theta: dimension mismatch at row " + std::to_string(i));
    if (!adapters[i].allFinite()) throw NumericalError("assemble_theta: non-finite adapter at row " + std::to_string(i));
    out.rows.row(static_cast<Eigen::Index>(i)) = adapters[i].transpose();
  }
  if (task_ids.empty())
    for (std::size_t i = 0; i < adapters.size(); ++i) task_ids.push_back(std::to_string(i));
  out.task_ids = std::move(task_ids);
  out.ridge_alpha = ridge_alpha;
  return out;
}

void write_adapter_csv(const std::string& path, const AdapterMatrix& theta) {
  io::CsvWriter w(path);
  std::vector<std::string> head{"task_id"};
  for (Eigen::Index j = 0; j < theta.dim(); ++j) head.push_back("theta" + std::to_string(j));
  w.header(head);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    std::vector<std::string> row{theta.task_ids[static_cast<std::size_t>(i)]};
    for (Eigen::Index j = 0; j < theta.dim(); ++j) row.push_back(io::num(theta.rows(i, j), 17));
    w.row(row);
  }
}

Mat principal_axes(const Mat& x, Vec* singular_values) {
  const Eigen::Index d = x.cols();
  Eigen::JacobiSVD<Mat> svd(x, Eigen::ComputeFullV);
  const Vec s = svd.singularValues();
  if (singular_values) {
    *singular_values = Vec::Zero(d);
    singular_values->head(s.size()) = s;
  }
  const double smax = s.size() ? s[0] : 0.0;
  Eigen::Index rank = 0;
  while (rank < s.size() && s[rank] > 1e-10 * smax && smax > 0.0) ++rank;

  Mat basis(d, d);
  Eigen::Index k = 0;
  for (; k < rank; ++k) basis.col(k) = svd.matrixV().col(k);
  // Null directions are arbitrary in the SVD; complete from the standard basis
  // instead so the result is reproducible and already-aligned inputs map to e_i.
  for (Eigen::Index e = 0; e < d && k < d; ++e) {
    Vec v = Vec::Unit(d, e);
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index c = 0; c < k; ++c) v -= basis.col(c).dot(v) * basis.col(c);
    const double n = v.norm();
    if (n > 1e-8) basis.col(k++) = v / n;
  }
  for (Eigen::Index c = 0; c < d; ++c) {
    for (Eigen::Index i = 0; i < d; ++i) {
      if (std::abs(basis(i, c)) > 1e-12) {
        if (basis(i, c) < 0.0) basis.col(c) *= -1.0;
        break;
      }
    }
  }
  return basis;
}

Canonicalizer Canonicalizer::identity(Eigen::Index d) {
  Canonicalizer c;
  c.scale = Vec::Ones(d);
  c.signs = Vec::Ones(d);
  c.basis = Mat::Identity(d, d);
  c.clamped.assign(static_cast<std::size_t>(d), false);
  c.mode = ScaleMode::None;
  return c;
}

bool Canonicalizer::any_clamped() const {
  for (bool b : clamped)
    if (b) return true;
  return false;
}

Vec Canonicalizer::apply(const Vec& x) const { return basis.transpose() * x.cwiseQuotient(scale); }
Vec Canonicalizer::invert(const Vec& y) const { return scale.cwiseProduct(basis * y); }

Mat Canonicalizer::apply_rows(const Mat& x) const {
  return (x.array().rowwise() / scale.transpose().array()).matrix() * basis;
}

Mat Canonicalizer::invert_rows(const Mat& y) const {
  return ((y * basis.transpose()).array().rowwise() * scale.transpose().array()).matrix();
}

Mat Canonicalizer::inverse_matrix() const { return scale.asDiagonal() * basis; }

Canonicalizer fit_canonicalizer(const Mat& theta, ScaleMode mode) {
  if (theta.rows() < 2) throw ValidationError("fit_canonicalizer: need at least 2 adapters");
  if (!theta.allFinite()) throw NumericalError("fit_canonicalizer: non-finite adapters");
  const Eigen::Index d = theta.cols();
  Canonicalizer c;
  c.mode = mode;
  c.scale = Vec::Ones(d);
  c.clamped.assign(static_cast<std::size_t>(d), false);
  const double n = static_cast<double>(theta.rows());

  if (mode == ScaleMode::Global) {
    const double rms = std::sqrt(theta.squaredNorm() / (n * static_cast<double>(d)));
    if (rms > 0.0)
      c.scale.setConstant(rms);
    else
      c.clamped.assign(static_cast<std::size_t>(d), true);
  } else if (mode == ScaleMode::PerCoordinate) {
    const Vec rms = (theta.colwise().squaredNorm().transpose() / n).cwiseSqrt();
    const double floor = 1e-12 * std::max(rms.maxCoeff(), 1e-300);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (rms[j] > floor)
        c.scale[j] = rms[j];
      else
        c.clamped[static_cast<std::size_t>(j)] = true;
    }
  }

  const Mat scaled = (theta.array().rowwise() / c.scale.transpose().array()).matrix();
  Eigen::JacobiSVD<Mat> raw(scaled, Eigen::ComputeFullV);
  c.basis = principal_axes(scaled);
  c.signs = Vec::Ones(d);
  // Record which raw SVD directions needed flipping (informational).
  for (Eigen::Index k = 0; k < d && k < raw.matrixV().cols(); ++k)
    c.signs[k] = raw.matrixV().col(k).dot(c.basis.col(k)) < 0.0 ? -1.0 : 1.0;
  return c;
}

nlohmann::json to_json(const Canonicalizer& c) {
  nlohmann::json j;
  j["scale"] = to_std(c.scale);
  j["signs"] = to_std(c.signs);
  std::vector<std::vector<double>> b;
  for (Eigen::Index i = 0; i < c.basis.rows(); ++i) b.push_back(to_std(c.basis.row(i).transpose()));
  j["basis"] = b;
  j["clamped"] = c.clamped;
  j["mode"] = c.mode == ScaleMode::Global ? "global" : c.mode == ScaleMode::PerCoordinate ? "per_coordinate" : "none";
  return j;
}

Canonicalizer canonicalizer_from_json(const nlohmann::json& j) {
  Canonicalizer c;
  c.scale = to_vec(j.at("scale").get<std::vector<double>>());
  c.signs = to_vec(j.at("signs").get<std::vector<double>>());
  const auto b = j.at("basis").get<std::vector<std::vector<double>>>();
  c.basis.resize(static_cast<Eigen::Index>(b.size()), static_cast<Eigen::Index>(b.empty() ? 0 : b[0].size()));
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t k = 0; k < b[i].size(); ++k) c.basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = b[i][k];
  c.clamped = j.at("clamped").get<std::vector<bool>>();
  const std::string m = j.at("mode").get<std::string>();
  c.mode = m == "global" ? ScaleMode::Global : m == "per_coordinate" ? ScaleMode::PerCoordinate : ScaleMode::None;
  return c;
}

}  // namespace protoadapt::adapters
