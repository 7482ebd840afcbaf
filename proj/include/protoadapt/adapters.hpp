#pragma once

#include "protoadapt/common.hpp"
#include "protoadapt/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace protoadapt::adapters {

inline constexpr double kDefaultRidgeAlpha = 1e-2;

/// argmin ||F theta - t||^2 + alpha ||theta||^2 with t = 2y - 1.
Vec ridge_fit(const Mat& features, const std::vector<int>& y, double alpha);

/// Ridge adapter from the task's support set.
Vec ridge_adapter(const synth::EpisodeTask& task, const FeatureMap& fm, double alpha = kDefaultRidgeAlpha);

/// Ridge adapter from support and query together. Used for pretraining tasks
/// (whose labels are all available) and for the cheating oracle baseline.
Vec ridge_adapter_full(const synth::EpisodeTask& task, const FeatureMap& fm, double alpha = kDefaultRidgeAlpha);

struct AdapterMatrix {
  Mat rows;  // N x d
  std::vector<std::string> task_ids;
  double ridge_alpha = kDefaultRidgeAlpha;
  bool canonicalized = false;

  [[nodiscard]] Eigen::Index size() const { return rows.rows(); }
  [[nodiscard]] Eigen::Index dim() const { return rows.cols(); }
};

AdapterMatrix assemble_theta(const std::vector<Vec>& adapters, std::vector<std::string> task_ids = {},
                             double ridge_alpha = kDefaultRidgeAlpha);

void write_adapter_csv(const std::string& path, const AdapterMatrix& theta);

// Global: one RMS scale shared by all coordinates (idempotent).
// PerCoordinate: per-column RMS, not idempotent after the rotation.
// None: rotation only.
enum class ScaleMode { Global, PerCoordinate, None };

/// y = basis^T (x ./ scale); invert: x = scale .* (basis y).
class Canonicalizer {
 public:
  Vec scale;               // elementwise divisor
  Vec signs;               // sign applied to each principal direction
  Mat basis;               // d x d orthonormal, columns = sign-fixed principal axes
  std::vector<bool> clamped;  // coordinate had (near) zero scale and was left at 1
  ScaleMode mode = ScaleMode::Global;

  static Canonicalizer identity(Eigen::Index d);

  [[nodiscard]] bool any_clamped() const;
  [[nodiscard]] Vec apply(const Vec& x) const;
  [[nodiscard]] Vec invert(const Vec& y) const;
  /// Row-wise versions for an N x d block.
  [[nodiscard]] Mat apply_rows(const Mat& x) const;
  [[nodiscard]] Mat invert_rows(const Mat& y) const;
  /// The linear map x -> invert(y) as a d x d matrix (diag(scale) * basis).
  [[nodiscard]] Mat inverse_matrix() const;
};

/// Requires N >= 2.
Canonicalizer fit_canonicalizer(const Mat& theta, ScaleMode mode = ScaleMode::Global);

/// Right singular vectors of x (uncentered), completed to a full orthonormal
/// basis deterministically, each column signed so its first nonzero entry is
/// positive. Used both here and by the PCA projector.
Mat principal_axes(const Mat& x, Vec* singular_values = nullptr);

nlohmann::json to_json(const Canonicalizer& c);
Canonicalizer canonicalizer_from_json(const nlohmann::json& j);

}  // namespace protoadapt::adapters
