#pragma once

#include "protoadapt/adapters.hpp"
#include "protoadapt/bootstrap.hpp"
#include "protoadapt/common.hpp"
#include "protoadapt/parallel.hpp"

#include <nlohmann/json.hpp>

#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace protoadapt::proto {

/// Frozen rank-r projection. Coordinates for clustering live in the
/// canonicalized PCA frame; coverage and retrieval use an orthonormal basis Q
/// of the same subspace expressed in parameter space.
struct Projector {
  adapters::Canonicalizer canon;
  Mat pca_basis;  // d x r, orthonormal, canonical frame
  Mat q;          // d x r, orthonormal, parameter space
  int r = 0;

  [[nodiscard]] Vec coords(const Vec& theta) const { return pca_basis.transpose() * canon.apply(theta); }
  [[nodiscard]] Mat coords_rows(const Mat& theta) const { return canon.apply_rows(theta) * pca_basis; }
  [[nodiscard]] Vec lift(const Vec& u) const { return canon.invert(pca_basis * u); }
  [[nodiscard]] Vec project(const Vec& theta) const { return q.transpose() * theta; }
  [[nodiscard]] Vec embed(const Vec& u) const { return q * u; }
};

/// canonicalize = false uses the identity canonicalizer (raw adapters).
Projector fit_projector(const Mat& theta_seed, int r, bool canonicalize = true,
                        adapters::ScaleMode mode = adapters::ScaleMode::Global);

nlohmann::json to_json(const Projector& p);
Projector projector_from_json(const nlohmann::json& j);

struct KMeansResult {
  Mat centroids;  // K x dim
  std::vector<int> labels;
  double sse = 0.0;
  std::vector<std::vector<int>> restart_labels;
  std::vector<double> restart_sse;
  double stability = 1.0;  // mean pairwise adjusted Rand index across restarts
};

/// k-means++ seeding then Lloyd iterations; best of n_restarts by SSE.
/// Restart i uses derive_seed(seed, i).
KMeansResult kmeans(const Mat& points, int K, int n_restarts, std::uint64_t seed, int max_iter = 100,
                    Exec exec = Exec::Parallel);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

struct CoverageCertificate {
  double eps_hat = 0.0;
  bootstrap::Interval pct90;
  bootstrap::Interval bca90;
  std::size_t n_boot = 0;
  double replicate_min = 0.0;
  double replicate_max = 0.0;
};

struct Diagnostics {
  double kappa = 1.0;  // +inf when the smallest singular value is 0
  double mu = 0.0;
};

/// kappa = sigma_max / sigma_min over the min(K, d) singular values of M^T;
/// mu = largest absolute cosine between distinct rows.
Diagnostics diagnostics(const Mat& m);

class PrototypeMemory {
 public:
  PrototypeMemory() = default;
  PrototypeMemory(Mat m, Projector projector);

  [[nodiscard]] const Mat& M() const { return m_; }
  [[nodiscard]] int K() const { return static_cast<int>(m_.rows()); }
  [[nodiscard]] int r() const { return projector_.r; }
  [[nodiscard]] Eigen::Index dim() const { return m_.cols(); }
  [[nodiscard]] const Projector& projector() const { return projector_; }
  /// K x r prototype coordinates in the parameter-space basis Q.
  [[nodiscard]] Mat lifted() const { return m_ * projector_.q; }
  [[nodiscard]] const Diagnostics& diag() const { return diag_; }
  /// Diagnostics of the lifted (in-subspace) prototype matrix.
  [[nodiscard]] Diagnostics lifted_diag() const { return diagnostics(lifted()); }

  [[nodiscard]] bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  /// Replaces the rows; FrozenError once frozen.
  void set_rows(Mat m);

  /// Set exactly once, and only after freezing.
  void set_certificate(const CoverageCertificate& c);
  [[nodiscard]] const std::optional<CoverageCertificate>& certificate() const { return certificate_; }
  [[nodiscard]] double eps_hat() const;
  [[nodiscard]] double eps_upper() const;

  std::vector<std::string> merge_log;

 private:
  Mat m_;
  Projector projector_;
  Diagnostics diag_;
  bool frozen_ = false;
  std::optional<CoverageCertificate> certificate_;
};

struct ClusterResult {
  PrototypeMemory memory;
  double sse = 0.0;
  double stability = 1.0;
};

/// k-means on the projector coordinates of theta_seed; centroids lifted back to
/// parameter space.
ClusterResult cluster_prototypes(const Mat& theta_seed, const Projector& projector, int K, int n_restarts,
                                 std::uint64_t seed, Exec exec = Exec::Parallel);

enum class L0Mode { Omp, Exact };

struct L0Fit {
  Vec w;  // length K
  double residual = 0.0;
  std::vector<int> support;
};

/// min ||u - M_lifted^T w|| subject to ||w||_0 <= r_sparse (w unconstrained in sign).
L0Fit l0_fit(const Vec& u, const Mat& m_lifted, int r_sparse, L0Mode mode = L0Mode::Omp);

/// Per-task residuals of the r_sparse fit of Q^T theta_i.
std::vector<double> coverage_residuals(const PrototypeMemory& memory, const Mat& theta, int r_sparse,
                                       L0Mode mode = L0Mode::Omp, Exec exec = Exec::Parallel);

/// Median residual with 90% percentile and BCa intervals from bootstrap
/// resamples of tasks. Requires a frozen memory; does not store the result.
CoverageCertificate coverage_certificate(const PrototypeMemory& memory, const Mat& theta, int r_sparse,
                                         const bootstrap::ResamplePlan& plan, L0Mode mode = L0Mode::Omp,
                                         Exec exec = Exec::Parallel);

/// Certificate from precomputed residuals.
CoverageCertificate certificate_from_residuals(const std::vector<double>& residuals, const bootstrap::ResamplePlan& plan,
                                               Exec exec = Exec::Parallel);

struct MergeConfig {
  double mu_threshold = 0.95;
  double kappa_threshold = 1e4;  // reported, never triggers a merge
  int r_sparse = 0;              // for the coverage log; 0 disables it
};

/// Repeatedly replaces the most coherent pair (lowest index pair on ties) by
/// their sign-aligned normalized mean, rescaled to the pair's mean norm, until
/// mu <= mu_threshold or K = 1. Each merge is appended to merge_log.
PrototypeMemory merge_prototypes(PrototypeMemory memory, const MergeConfig& cfg, const Mat* theta_for_log = nullptr);

void write_memory(const std::string& dir, const PrototypeMemory& memory);
PrototypeMemory read_memory(const std::string& dir);

}  // namespace protoadapt::proto
