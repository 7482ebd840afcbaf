#pragma once

#include "protoadapt/bootstrap.hpp"
#include "protoadapt/common.hpp"
#include "protoadapt/parallel.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

// Two-stage motif testing on synthetic repertoires: Markov background,
// activation screening, adaptive permutation p-values, Storey pi0 / q-values,
// channel threshold calibration and power curves.
namespace protoadapt::motif {

inline constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";
/// Production permutation floor; desk runs use kDeskPermutationFloor.
inline constexpr std::size_t kPermutationFloor = 50000;
inline constexpr std::size_t kDeskPermutationFloor = 2000;

class MarkovBackground {
 public:
  [[nodiscard]] int order() const { return order_; }
  [[nodiscard]] const std::string& alphabet() const { return alphabet_; }
  [[nodiscard]] double pseudocount() const { return pseudocount_; }

  /// P(next symbol | position, preceding min(pos, order) symbols). Contexts never
  /// seen in training get the uniform distribution.
  [[nodiscard]] const std::vector<double>& conditional(int pos, std::string_view context) const;
  [[nodiscard]] double prob(int pos, std::string_view context, char symbol) const;
  [[nodiscard]] const std::vector<int>& lengths() const { return lengths_; }

  /// Length drawn from the training lengths, symbols from the chain.
  std::string sample(Rng& rng) const;

  friend MarkovBackground fit_background(const std::vector<std::string>&, std::string, int, double);

 private:
  int order_ = 0;
  std::string alphabet_;
  double pseudocount_ = 0.0;
  std::map<std::pair<int, std::string>, std::vector<double>> table_;
  std::vector<double> uniform_;
  std::vector<int> lengths_;
  std::array<int, 256> index_{};
};

/// Throws ValidationError on an empty corpus, a negative order or pseudocount,
/// or a symbol outside the alphabet.
MarkovBackground fit_background(const std::vector<std::string>& sequences, std::string alphabet = std::string(kAminoAcids),
                                int order = 2, double pseudocount = 0.5);

struct Repertoire {
  std::vector<std::string> sequences;
  int label = 0;
};

/// Largest fraction of motif positions matched by any window of seq (0 if seq is shorter).
double motif_match(std::string_view seq, std::string_view motif);
double repertoire_activation(const Repertoire& rep, std::string_view motif);
/// channels x repertoires
Mat activation_matrix(const std::vector<Repertoire>& reps, const std::vector<std::string>& motifs,
                      Exec exec = Exec::Parallel);

/// Top ceil(top_frac * C) channels by maximal activation, ties to the lower index.
/// Returned in ascending index order.
std::vector<int> screen_channels(const Mat& activations, double top_frac);

struct PermutationConfig {
  std::size_t b_min = kDeskPermutationFloor;
  std::size_t b_max = 20000;
  std::size_t block = 500;
  double stability = 1e-3;  // stop once p moves less than this between blocks
  std::uint64_t seed = 0;
  Exec exec = Exec::Parallel;
};

struct PermResult {
  double p = 1.0;
  std::size_t b_used = 0;
};

using NullDraw = std::function<double(Rng&)>;

/// p = (1 + #{null >= observed}) / (B + 1). Draw b uses derive_seed(seed, b).
PermResult permutation_pvalue(double observed, const NullDraw& draw, const PermutationConfig& cfg);
/// Fraction of an enumerated null (identity included) at or above observed.
double exhaustive_pvalue(double observed, const std::vector<double>& null_stats);

/// Mean activation of label-1 repertoires minus label-0.
double mean_difference(const Vec& activation, const std::vector<int>& labels);
PermResult channel_pvalue(const Vec& activation, const std::vector<int>& labels, const PermutationConfig& cfg);

double storey_pi0(const std::vector<double>& p, double lambda = 0.5);
/// q_(i) = min_{j >= i} pi0 m p_(j) / j, returned in input order.
std::vector<double> q_values(const std::vector<double>& p, double pi0);

struct StoreyResult {
  double pi0 = 1.0;
  bootstrap::Interval ci90;
  std::vector<double> q;
};
StoreyResult storey(const std::vector<double>& p, double lambda, std::size_t n_boot, std::uint64_t seed,
                    Exec exec = Exec::Parallel);

struct MotifTestReport {
  std::vector<int> screened;
  std::vector<double> p_values;  // parallel to screened
  std::vector<double> q_values;
  std::vector<std::size_t> b_used;
  double pi0 = 1.0;
  bootstrap::Interval pi0_ci;
};

/// Screens, then permutation-tests each screened channel; the screened set is
/// the multiplicity family.
MotifTestReport two_stage_test(const Mat& activations, const std::vector<int>& labels, double top_frac,
                               const PermutationConfig& cfg, std::size_t n_boot_storey = 1000);

// Channel threshold calibration ----------------------------------------------

inline constexpr double kGridCenter = 0.5;

struct TauTest {
  double t = 0.0;
  double p = 1.0;
  bool zero_variance = false;
};

/// t = (tau_bar - center) / (se / sqrt(3)), two-sided p with 2 degrees of freedom.
/// se == 0 gives t = 0, p = 1 and the zero-variance flag.
TauTest tau_t_test(double tau_bar, double se, double center = kGridCenter);

/// SE of three inner optima: sqrt(sum (tau_k - mean)^2 / 6).
double tau_standard_error(const std::array<double, 3>& taus);

struct TauConfig {
  double cal_frac = 0.2;
  double grid_lo = 0.1;
  double grid_hi = 0.9;
  int grid_points = 9;
  double shrink = 0.2;
  double auc_gap = 0.01;
  double alpha = 0.05;
  int max_rounds = 10;
  bool throw_on_failure = true;
  std::uint64_t seed = 0;
};

struct TauCalibration {
  std::string name;
  double tau_bar = 0.0;
  double se = 0.0;
  double t_stat = 0.0;
  double p_value = 1.0;
  double cal_auc = 0.0;
  double test_auc = 0.0;
  double delta_auc = 0.0;
  bool pass = false;
  bool zero_variance = false;
  int rounds = 0;
  std::array<double, 3> fold_tau{};
  std::vector<double> grid;  // grid of the final round
};

/// Average ranks mapped to [0, 1].
std::vector<double> rank_normalize(const Vec& x);
/// AUC of the hard decision score >= tau (balanced accuracy).
double threshold_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                     const std::vector<std::size_t>& rows, double tau);

/// Stratified 20/80 split, inner stratified 3-fold grid search, t-test and AUC
/// gap check; on failure the grid shrinks around tau_bar. Throws
/// ConvergenceError at the round cap when cfg.throw_on_failure.
TauCalibration calibrate_tau(const Vec& activation, const std::vector<int>& labels, const TauConfig& cfg,
                             std::string name = "");

// Synthetic cohorts and power -------------------------------------------------

struct CohortConfig {
  int n_repertoires = 40;
  int seqs_per_repertoire = 50;
  double frac_positive = 0.5;
};

/// Repertoires drawn from the background; in label-1 repertoires each sequence
/// carries motif enriched[k] at a random window with probability effect.
std::vector<Repertoire> simulate_cohort(const MarkovBackground& bg, const CohortConfig& cfg,
                                        const std::vector<std::string>& enriched, double effect, Rng& rng);

/// Distinct random k-mers over the alphabet.
std::vector<std::string> random_motifs(std::size_t n, int k, std::string_view alphabet, Rng& rng);

struct PowerPoint {
  double effect = 0.0;
  double rate = 0.0;
  int n_rep = 0;
};

/// Detection frequency of one planted channel at q <= alpha (family of one, q = p).
std::vector<PowerPoint> power_curve(const MarkovBackground& bg, const CohortConfig& cohort, const std::string& motif,
                                    const std::vector<double>& effects, double alpha, int n_rep,
                                    const PermutationConfig& perm, std::uint64_t seed);

void write_motif_report_csv(const std::string& path, const MotifTestReport& r, const std::vector<std::string>& motifs);
void write_tau_csv(const std::string& path, const std::vector<TauCalibration>& rows);
void write_power_csv(const std::string& path, const std::vector<PowerPoint>& pts);

}  // namespace protoadapt::motif
