#include "protoadapt/model.hpp"

#include <cmath>

namespace protoadapt {

bool SampleSet::has_both_classes() const {
  bool pos = false, neg = false;
  for (int v : y) (v == 1 ? pos : neg) = true;
  return pos && neg;
}

SampleSet SampleSet::subset(const std::vector<std::size_t>& rows) const {
  SampleSet out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    out.y.push_back(y[rows[i]]);
  }
  return out;
}

SampleSet SampleSet::concat(const SampleSet& other) const {
  SampleSet out;
  out.x.resize(x.rows() + other.x.rows(), x.cols());
  out.x << x, other.x;
  out.y = y;
  out.y.insert(out.y.end(), other.y.begin(), other.y.end());
  return out;
}

FeatureMap::FeatureMap(Mat weights) : weights_(std::move(weights)) {}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logistic_loss(double logit, int y) {
  // -log sigmoid(s) for the signed margin s = +-logit.
  const double s = y == 1 ? logit : -logit;
  return s > 0.0 ? std::log1p(std::exp(-s)) : -s + std::log1p(std::exp(s));
}

double mean_logistic_loss(const Vec& theta, const Mat& features, const std::vector<int>& y) {
  const Vec logits = features * theta;
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) total += logistic_loss(logits[i], y[static_cast<std::size_t>(i)]);
  return total / static_cast<double>(logits.size());
}

ProbeHead ProbeHead::make(Eigen::Index dim, std::uint64_t seed, double scale) {
  Rng rng = make_rng(seed, 0x9b0be);
  ProbeHead p;
  p.weights = normal_vector(rng, dim, scale / std::sqrt(static_cast<double>(dim)));
  p.bias = 0.0;
  p.seed = seed;
  return p;
}

Mat probe_sample_gradients(const ProbeHead& probe, const Mat& features, const std::vector<int>& y) {
  Mat g(features.rows(), features.cols());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const double p = sigmoid(probe.weights.dot(features.row(i).transpose()) + probe.bias);
    g.row(i) = (p - static_cast<double>(y[static_cast<std::size_t>(i)])) * features.row(i);
  }
  return g;
}

}  // namespace protoadapt
