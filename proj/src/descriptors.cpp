#include "protoadapt/descriptors.hpp"

#include "protoadapt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protoadapt::desc {

Moments pooled_moments(const Mat& x) {
  if (x.rows() == 0) throw ValidationError("pooled_moments: empty support");
  Moments m;
  m.mu = x.colwise().mean().transpose();
  const Mat centered = x.rowwise() - m.mu.transpose();
  m.sigma = (centered.colwise().squaredNorm().transpose() / static_cast<double>(x.rows())).cwiseSqrt();
  return m;
}

ProbeEval probe_gradient(const ProbeHead& probe, const Mat& features, const std::vector<int>& y) {
  if (features.rows() == 0) throw ValidationError("probe_gradient: empty support");
  if (!features.allFinite()) throw ValidationError("probe_gradient: non-finite embeddings");
  ProbeEval e;
  e.grad_w = Vec::Zero(features.cols());
  const double n = static_cast<double>(features.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const int yi = y[static_cast<std::size_t>(i)];
    if (yi != 0 && yi != 1) throw ValidationError("probe_gradient: labels must be 0/1");
    const double logit = probe.logit(features.row(i).transpose());
    e.loss += logistic_loss(logit, yi);
    const double resid = sigmoid(logit) - yi;
    e.grad_w += resid * features.row(i).transpose();
    e.grad_b += resid;
  }
  e.loss /= n;
  e.grad_w /= n;
  e.grad_b /= n;
  return e;
}

DescriptorBuilder::DescriptorBuilder(ProbeHead probe, FeatureMap fm, Mat q, DescriptorConfig cfg)
    : probe_(std::move(probe)), fm_(std::move(fm)), q_(std::move(q)), cfg_(std::move(cfg)) {
  if (q_.rows() != fm_.output_dim()) throw ValidationError("DescriptorBuilder: projector dimension mismatch");
  for (double p : cfg_.percentiles)
    if (!(p >= 0.0 && p <= 100.0)) throw ValidationError("DescriptorBuilder: percentile outside [0, 100]");
}

Eigen::Index DescriptorBuilder::raw_dim(bool with_boot_var) const {
  const Eigen::Index q = fm_.input_dim();
  return 2 * q + static_cast<Eigen::Index>(cfg_.percentiles.size()) + q_.cols() + (with_boot_var ? q : 0);
}

Vec DescriptorBuilder::raw(const SampleSet& support, bool with_boot_var) const {
  const Mat& x = support.x;
  const Eigen::Index q = x.cols();
  const Moments mom = pooled_moments(x);
  std::vector<double> pooled(x.data(), x.data() + x.size());
  std::sort(pooled.begin(), pooled.end());
  const ProbeEval pe = probe_gradient(probe_, fm_.apply_rows(x), support.y);

  Vec out(raw_dim(with_boot_var));
  Eigen::Index k = 0;
  out.segment(k, q) = mom.mu;
  k += q;
  out.segment(k, q) = mom.sigma;
  k += q;
  for (double p : cfg_.percentiles) out[k++] = stats::quantile_sorted(pooled, p / 100.0);
  out.segment(k, q_.cols()) = q_.transpose() * pe.grad_w;
  k += q_.cols();
  if (with_boot_var) {
    // Canonical row order first, so the block does not depend on support ordering.
    std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      for (Eigen::Index j = 0; j < q; ++j)
        if (x(a, j) != x(b, j)) return x(a, j) < x(b, j);
      return a < b;
    });
    Rng rng = make_rng(cfg_.seed, 0xb007);
    const auto n = static_cast<std::size_t>(x.rows());
    Vec sum = Vec::Zero(q), sumsq = Vec::Zero(q);
    for (int b = 0; b < cfg_.n_boot_var; ++b) {
      Vec m = Vec::Zero(q);
      for (std::size_t i = 0; i < n; ++i) m += x.row(order[uniform_index(rng, n)]).transpose();
      m /= static_cast<double>(n);
      sum += m;
      sumsq += m.cwiseProduct(m);
    }
    const double B = cfg_.n_boot_var;
    out.segment(k, q) = (sumsq / B - (sum / B).cwiseProduct(sum / B)).cwiseMax(0.0);
  }
  return out;
}

Vec Standardizer::apply(const Vec& raw) const {
  if (raw.size() > mean.size()) throw ValidationError("Standardizer: descriptor longer than fitted layout");
  const Eigen::Index n = raw.size();
  Vec z = (raw - mean.head(n)).cwiseQuotient(scale.head(n));
  return z.cwiseMax(-clip).cwiseMin(clip);
}

Standardizer fit_standardizer(const std::vector<const synth::EpisodeTask*>& tasks, const DescriptorBuilder& builder) {
  if (tasks.empty()) throw ValidationError("fit_standardizer: no tasks");
  const Eigen::Index dim = builder.raw_dim(true);
  Mat rows(static_cast<Eigen::Index>(tasks.size()), dim);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto* t = tasks[i];
    if (!synth::is_pretraining(t->partition()))
      throw LeakageError(std::string("standardizer fitted on task ") + t->id + " from partition " +
                         synth::partition_name(t->partition()));
    rows.row(static_cast<Eigen::Index>(i)) = builder.raw(t->support, true).transpose();
  }
  Standardizer s;
  s.clip = builder.config().clip;
  s.mean = rows.colwise().mean().transpose();
  const Mat c = rows.rowwise() - s.mean.transpose();
  s.scale = (c.colwise().squaredNorm().transpose() / static_cast<double>(rows.rows())).cwiseSqrt();
  for (Eigen::Index j = 0; j < dim; ++j)
    if (!(s.scale[j] > 1e-12)) s.scale[j] = 1.0;
  return s;
}

TaskDescriptor build_descriptor(const SampleSet& support, const DescriptorBuilder& builder, const Standardizer& stdz) {
  const bool boot = builder.needs_boot_var(support.size());
  const Vec z = stdz.apply(builder.raw(support, boot));
  if (!z.allFinite()) throw NumericalError("build_descriptor: non-finite descriptor");
  const Eigen::Index q = builder.q_dim();
  const auto np = static_cast<Eigen::Index>(builder.config().percentiles.size());
  TaskDescriptor d;
  Eigen::Index k = 0;
  d.mu_std = z.segment(k, q);
  k += q;
  d.sigma_std = z.segment(k, q);
  k += q;
  d.order_stats = z.segment(k, np);
  k += np;
  d.g_proj = z.segment(k, builder.r());
  k += builder.r();
  if (boot) d.boot_var = z.segment(k, q);
  d.z = z;
  return d;
}

nlohmann::json to_json(const Standardizer& s) {
  return {{"mean", to_std(s.mean)}, {"scale", to_std(s.scale)}, {"clip", s.clip}};
}

Standardizer standardizer_from_json(const nlohmann::json& j) {
  Standardizer s;
  s.mean = to_vec(j.at("mean").get<std::vector<double>>());
  s.scale = to_vec(j.at("scale").get<std::vector<double>>());
  s.clip = j.at("clip").get<double>();
  return s;
}

}  // namespace protoadapt::desc
