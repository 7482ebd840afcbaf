#pragma once

#include "protoadapt/common.hpp"

#include <cstdint>
#include <vector>

// The frozen-backbone surrogate shared by every module: embeddings x in R^q are
// mapped to features phi = W x in R^{d_theta}, and an adapter theta scores a
// sample by the logit <theta, phi>.
namespace protoadapt {

/// Labelled samples stored row-wise: x is n x q, y holds 0/1 labels.
struct SampleSet {
  Mat x;
  std::vector<int> y;

  [[nodiscard]] std::size_t size() const { return y.size(); }
  [[nodiscard]] bool has_both_classes() const;
  /// Rows in `rows`, in that order.
  [[nodiscard]] SampleSet subset(const std::vector<std::size_t>& rows) const;
  /// Row-wise concatenation.
  [[nodiscard]] SampleSet concat(const SampleSet& other) const;
};

class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(Mat weights);

  [[nodiscard]] Eigen::Index input_dim() const { return weights_.cols(); }
  [[nodiscard]] Eigen::Index output_dim() const { return weights_.rows(); }
  [[nodiscard]] const Mat& weights() const { return weights_; }

  [[nodiscard]] Vec apply(const Vec& x) const { return weights_ * x; }
  /// Maps an n x q embedding block to n x d features.
  [[nodiscard]] Mat apply_rows(const Mat& x) const { return x * weights_.transpose(); }

 private:
  Mat weights_;
};

double sigmoid(double z);

/// Binary cross-entropy of a logit against a 0/1 label, computed stably.
double logistic_loss(double logit, int y);

/// Mean cross-entropy of adapter theta on features (n x d) and labels.
double mean_logistic_loss(const Vec& theta, const Mat& features, const std::vector<int>& y);

/// Fixed affine-plus-logistic head on the feature space: p = sigmoid(<w, phi> + b).
struct ProbeHead {
  Vec weights;
  double bias = 0.0;
  std::uint64_t seed = 0;

  /// Deterministic draw: weights ~ N(0, scale^2 / d), bias 0.
  static ProbeHead make(Eigen::Index dim, std::uint64_t seed, double scale = 1.0);

  [[nodiscard]] double logit(const Vec& phi) const { return weights.dot(phi) + bias; }
};

/// Per-sample gradients of the probe loss with respect to the probe weights
/// (rows, n x d): (sigmoid(<w, phi_i> + b) - y_i) * phi_i.
Mat probe_sample_gradients(const ProbeHead& probe, const Mat& features, const std::vector<int>& y);

}  // namespace protoadapt
