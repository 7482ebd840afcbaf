#pragma once

#include "protoadapt/bootstrap.hpp"
#include "protoadapt/common.hpp"
#include "protoadapt/model.hpp"
#include "protoadapt/parallel.hpp"
#include "protoadapt/synthdata.hpp"

#include <optional>
#include <string>
#include <vector>

// Intrinsic-dimension diagnostics on the adapter matrix and on empirical
// Fisher spectra.
namespace protoadapt::spectral {

/// Energy level of the null hypothesis zeta_r <= level.
inline constexpr double kEnergyLevel = 0.95;
/// Size of the Bonferroni family (candidates r-2..r+2).
inline constexpr int kCandidateFamily = 5;

struct PcaRank {
  int r = 0;
  Vec singular_values;   // descending, length d
  Vec cumulative_energy; // fraction of squared singular mass in the top k, k = 1..d
};

/// Smallest r whose top-r squared-singular-value fraction reaches rho (uncentered SVD).
PcaRank pca_rank(const Mat& theta, double rho);

struct RankCurvePoint {
  int n = 0;
  int r = 0;
};

/// r(N) on nested prefixes of a seeded row permutation.
std::vector<RankCurvePoint> rank_curve(const Mat& theta, double rho, const std::vector<int>& sizes, std::uint64_t seed);

struct FisherSpectrum {
  Vec eigenvalues;  // descending, >= 0
  double ridge_reg = 0.0;
  std::size_t n_support = 0;
};

/// Default regularizer 1e-6 * trace / d of the unregularized Fisher.
double default_fisher_reg(const Mat& gradients);

/// Spectrum of (1/n) G^T G + reg I for per-sample gradients G (n x d).
/// reg < 0 selects the default.
FisherSpectrum fisher_from_gradients(const Mat& gradients, double reg = -1.0);

/// Fisher spectrum of the probe loss on the task's support set.
FisherSpectrum fisher_spectrum(const synth::EpisodeTask& task, const ProbeHead& probe, const FeatureMap& fm,
                               double reg = -1.0);

/// Top-r share of the eigenvalue mass. Throws NumericalError on zero mass.
double energy_ratio(std::span<const double> eigenvalues, int r);

struct DimCandidate {
  int r_cand = 0;
  double zeta_emp = 0.0;
  double p_raw = 1.0;
  double p_adj = 1.0;
  bool reject = false;
  bool flagged = false;  // a reported decision disagrees with the adjusted p-value rule
  std::string note;
};

struct DimTestReport {
  std::vector<DimCandidate> candidates;
  std::optional<int> selected_r;
  double alpha = 0.01;
  std::size_t n_boot = 0;
  double level = kEnergyLevel;
};

/// Bonferroni arithmetic and decision rule: p_adj = min(1, 5 p_raw), reject iff p_adj <= alpha.
void adjudicate(DimTestReport& report);

enum class FisherResample {
  Eigenvalues,       // resample the eigenvalue vector with replacement
  SupportGradients,  // resample per-sample gradients and recompute the spectrum
};

struct FisherTestConfig {
  std::size_t n_boot = 1000;
  double alpha = 0.01;
  double level = kEnergyLevel;
  int half_width = 2;
  std::uint64_t seed = 0;
  bootstrap::PlanKind plan = bootstrap::PlanKind::Random;
  Exec exec = Exec::Parallel;
};

/// Candidates r_center-2..r_center+2 clipped to [1, d].
std::vector<int> candidate_ranks(int r_center, int d, int half_width = 2);

/// Bootstrap test over the eigenvalue vector itself.
DimTestReport fisher_energy_test(const FisherSpectrum& spectrum, int r_center, const FisherTestConfig& cfg);

/// Bootstrap test that resamples the rows of G and recomputes the spectrum of
/// (1/n) G*^T G* + reg I in each replicate.
DimTestReport fisher_energy_test_gradients(const Mat& gradients, double reg, int r_center, const FisherTestConfig& cfg);

/// One row per reported Table-5-style candidate: (r, zeta, p_raw, reported decision).
struct ReportedCandidate {
  int r_cand;
  double zeta_emp;
  double p_raw;
  bool reported_reject;
};

/// Applies the decision rule to externally reported (zeta, p_raw) pairs and
/// flags rows whose reported decision disagrees with it.
DimTestReport replay_reported(const std::vector<ReportedCandidate>& rows, double alpha);

void write_dim_test_csv(const std::string& path, const DimTestReport& report);

struct CiRow {
  int n_support = 0;
  int eig_index = 0;  // 1-based
  double p5 = 0.0;
  double p95 = 0.0;
  double width = 0.0;
};

/// Percentile bands of the leading eigenvalues across with-replacement
/// subsamples of the rows of G at each support size.
std::vector<CiRow> fisher_ci_vs_support(const Mat& gradients, const std::vector<int>& support_sizes, int n_leading,
                                        const bootstrap::ResamplePlan& plan, double reg = 0.0,
                                        Exec exec = Exec::Parallel);

enum class MapKind { Gaussian, Orthogonal };

struct JlConfig {
  int s = 0;          // target dimension, r < s <= d
  int n_maps = 20;
  std::size_t n_boot = 1000;
  MapKind kind = MapKind::Gaussian;
  std::uint64_t seed = 0;
  double threshold = 0.05;  // acceptance threshold in [0.01, 0.05]
  Exec exec = Exec::Parallel;
};

struct JlReport {
  std::vector<double> per_map;
  double mean = 0.0;
  double upper95 = 0.0;
  bool accepted = false;
};

/// Fraction of Fisher energy outside the top-r PCA subspace of the projected
/// adapters, per random map, with a bootstrap 95% upper bound of the mean.
JlReport jl_outside_energy(const Mat& theta_holdout, const std::vector<Mat>& fisher_forms, int r, const JlConfig& cfg);

struct SequentialStep {
  int r = 0;
  double mean_improvement = 0.0;
  double p_value = 1.0;
  bool reject = false;
};

struct SequentialResult {
  int selected_r = 0;
  std::vector<SequentialStep> steps;
};

/// Held-out (5-fold) reconstruction errors of every row at PCA rank r.
Vec heldout_reconstruction_errors(const Mat& theta, int r, int n_folds = 5);

/// Walks r upward from r_center-2 while adding a dimension significantly reduces
/// the held-out per-task reconstruction error (paired bootstrap of the mean
/// difference, one-sided p < alpha); returns the first r whose step does not reject.
SequentialResult sequential_r_selection(const Mat& theta, int r_center, std::size_t n_boot, std::uint64_t seed,
                                        double alpha = 0.05, Exec exec = Exec::Parallel);

/// One-sided paired-bootstrap p-value for "mean(diffs) > 0": (1 + #{mean* <= 0}) / (B + 1).
/// Differences within tol of zero are treated as exact zeros; an all-zero input gives 1.
double paired_bootstrap_p(std::span<const double> diffs, std::size_t n_boot, std::uint64_t seed, double tol,
                          Exec exec = Exec::Parallel);

}  // namespace protoadapt::spectral
