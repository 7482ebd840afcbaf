#pragma once

#include "protoadapt/common.hpp"
#include "protoadapt/model.hpp"
#include "protoadapt/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <vector>

// Fixed-length task summaries: pooled embedding moments, percentiles of the
// pooled coordinates, and the probe gradient projected onto the adapter subspace.
namespace protoadapt::desc {

struct Moments {
  Vec mu;
  Vec sigma;  // population std
};

/// Rows of x are support embeddings. Throws on an empty support.
Moments pooled_moments(const Mat& x);

struct ProbeEval {
  double loss = 0.0;
  Vec grad_w;  // mean gradient with respect to the probe weights
  double grad_b = 0.0;
};

/// Mean cross-entropy of the probe on (features, y) and its analytic gradient.
ProbeEval probe_gradient(const ProbeHead& probe, const Mat& features, const std::vector<int>& y);

struct DescriptorConfig {
  std::vector<double> percentiles{10, 25, 50, 75, 90};
  int small_support_cutoff = 5;  // boot_var block appended iff n_S < cutoff
  int n_boot_var = 200;
  double clip = 10.0;
  std::uint64_t seed = 0;
};

struct TaskDescriptor {
  Vec mu_std;
  Vec sigma_std;
  Vec order_stats;
  Vec g_proj;
  std::optional<Vec> boot_var;
  Vec z;  // concatenation in the order above, standardized and clipped
  [[nodiscard]] Eigen::Index d_z() const { return z.size(); }
};

/// Raw (unstandardized) descriptor blocks of one support set.
class DescriptorBuilder {
 public:
  DescriptorBuilder(ProbeHead probe, FeatureMap fm, Mat q, DescriptorConfig cfg);

  /// Concatenated raw blocks; boot_var included iff with_boot_var.
  [[nodiscard]] Vec raw(const SampleSet& support, bool with_boot_var) const;
  [[nodiscard]] bool needs_boot_var(std::size_t n_support) const {
    return static_cast<int>(n_support) < cfg_.small_support_cutoff;
  }
  [[nodiscard]] Eigen::Index raw_dim(bool with_boot_var) const;
  [[nodiscard]] const DescriptorConfig& config() const { return cfg_; }
  [[nodiscard]] Eigen::Index q_dim() const { return fm_.input_dim(); }
  [[nodiscard]] int r() const { return static_cast<int>(q_.cols()); }

 private:
  ProbeHead probe_;
  FeatureMap fm_;
  Mat q_;
  DescriptorConfig cfg_;
};

/// Per-coordinate affine standardization fitted on pretraining tasks only.
/// Statistics cover the full raw layout including the boot_var block; shorter
/// raw vectors use the leading coordinates.
class Standardizer {
 public:
  Vec mean;
  Vec scale;
  double clip = 10.0;

  [[nodiscard]] Vec apply(const Vec& raw) const;
};

/// Fits on the supports of the given tasks. Any task outside the pretraining
/// partitions (including unassigned tasks) raises LeakageError.
Standardizer fit_standardizer(const std::vector<const synth::EpisodeTask*>& tasks, const DescriptorBuilder& builder);

TaskDescriptor build_descriptor(const SampleSet& support, const DescriptorBuilder& builder, const Standardizer& stdz);

nlohmann::json to_json(const Standardizer& s);
Standardizer standardizer_from_json(const nlohmann::json& j);

}  // namespace protoadapt::desc
