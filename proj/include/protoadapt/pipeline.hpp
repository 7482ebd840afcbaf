#pragma once

#include "protoadapt/adapters.hpp"
#include "protoadapt/common.hpp"
#include "protoadapt/descriptors.hpp"
#include "protoadapt/motifs.hpp"
#include "protoadapt/prototypes.hpp"
#include "protoadapt/retrieval.hpp"
#include "protoadapt/riskbound.hpp"
#include "protoadapt/spectral.hpp"
#include "protoadapt/synthdata.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

// End-to-end orchestration: memory construction, retrieval training,
// baselines, ablations, motif stage, risk-bound harness and report bundle.
namespace protoadapt::pipe {

// Ablation switches; variant A is the full system.
struct Ablation {
  bool fixed_r = false;              // B: r = d_theta, no spectral selection
  bool no_top_r = false;             // C: soft l1 only
  bool gamma_zero = false;           // D: no proximal pull toward the prior
  bool fixed_tau = false;            // E: motif threshold fixed at 0.5
  bool bonferroni_only = false;      // F: Bonferroni instead of Storey q-values
  bool no_canonicalization = false;  // G: raw adapters
  bool mlp_front = false;            // H: residual MLP instead of the ODE block
};

inline constexpr const char* kAblationCodes = "ABCDEFGH";
Ablation ablation_for(char code);
std::string ablation_description(char code);

struct MotifStageConfig {
  int n_train_sequences = 2000;  // background corpus size
  int min_len = 10;
  int max_len = 18;
  int background_order = 2;
  double pseudocount = 0.5;
  int n_motifs = 200;
  int motif_len = 4;
  int n_enriched = 10;
  double effect = 0.3;
  double top_frac = 0.05;
  double q_threshold = 0.1;
  motif::CohortConfig cohort{};
  motif::PermutationConfig perm{};
  std::size_t n_boot_storey = 1000;
  std::vector<double> power_effects{0.0, 0.05, 0.1, 0.2, 0.3};
  int power_reps = 100;
  int tau_cohorts = 5;
  int tau_repertoires = 200;
  motif::TauConfig tau{};
};

struct RunConfig {
  synth::GeneratorConfig gen = default_generator();
  synth::PartitionConfig part{};
  // Search grids (defaults from the method description).
  std::vector<int> K_grid{50, 100, 200};
  std::vector<double> lambda_grid{1e-6, 1e-5, 1e-4, 1e-3};
  std::vector<double> gamma_grid{0.0, 1e-2, 1e-1, 1.0};
  std::vector<int> r_grid{10, 20, 50};
  bool grid_search = true;      // gamma x top_r (x lambda) on Ret-Val, per support size
  bool search_lambda = false;
  int search_epochs = 40;        // cap per search cell; 0 trains cells fully and keeps the best
  std::vector<std::uint64_t> seeds{42, 2023, 777};
  std::vector<double> rho{0.9, 0.95, 0.99};
  double rho_select = 0.99;
  int K = 50;
  int r_sparse = 1;
  int kmeans_restarts = 10;
  double ridge_alpha = adapters::kDefaultRidgeAlpha;
  double mu_threshold = 0.99;
  std::size_t n_boot = 1000;
  double fisher_alpha = 0.01;
  retr::TrainConfig train = default_train();
  desc::DescriptorConfig descriptor{};
  int eval_support = 5;
  std::vector<int> support_sizes{5, 10, 20, 50};
  int log_period = 10;
  MotifStageConfig motifs{};
  Ablation ablation{};
  std::string out_dir = "runs/default";

  static synth::GeneratorConfig default_generator();
  static retr::TrainConfig default_train();
  void validate() const;
  /// FNV-1a of the canonical JSON, out_dir excluded.
  [[nodiscard]] std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_config(const std::string& path);

/// Line-oriented structured log: "stage=... event=... key=value ...".
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(std::string path);
  void event(const std::string& stage, const std::string& what,
             const std::vector<std::pair<std::string, std::string>>& kv = {});
  [[nodiscard]] const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::string path_;
  std::vector<std::string> lines_;
};

// Metrics -------------------------------------------------------------------

struct MetricsRecord {
  std::size_t n = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
  double auc = 0.0;            // pooled rank statistic
  double mean_task_auc = 0.0;  // mean of per-task AUCs (primary comparison metric)
  double ece = 0.0;
  double health_mean = 0.0;    // health score = 1 - p
  double health_median = 0.0;
  double high_risk_fraction = 0.0;  // p >= 0.5
  double mem_bytes_est = 0.0;       // approximate working set of the method
};

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double mean_conf = 0.0, freq = 0.0;
};

/// Positive iff p >= 0.5. AUC by average ranks; equal-width ECE bins, the
/// last bin closed. Throws ValidationError on single-class labels or p outside [0, 1].
MetricsRecord compute_metrics(std::span<const double> probs, std::span<const int> labels, int n_bins = 10);
std::vector<CalibrationBin> calibration_bins(std::span<const double> probs, std::span<const int> labels,
                                             int n_bins = 10);

// Corpus and phases -----------------------------------------------------------

struct Corpus {
  synth::GeneratorConfig gen;
  synth::SyntheticWorld world;
  std::vector<synth::EpisodeTask> tasks;
  synth::PartitionAssignment assignment;

  [[nodiscard]] std::vector<const synth::EpisodeTask*> in(synth::Partition p) const;
};

/// Generator and partition seeded with `seed`; pretraining adapters for the
/// partition are full-label ridge fits.
Corpus build_corpus(const RunConfig& cfg, std::uint64_t seed);

struct Phase1Result {
  adapters::AdapterMatrix theta_seed;
  Mat theta_rest;
  std::vector<std::pair<double, int>> rank_by_rho;
  spectral::PcaRank pca;
  spectral::DimTestReport dim_test;
  int r_center = 0;
  int r = 0;
  bool r_fallback = false;  // Fisher test rejected no candidate; r_center kept
  proto::PrototypeMemory memory;
  double kmeans_stability = 1.0;
  ProbeHead probe;
  std::map<int, desc::Standardizer> standardizers;  // per support size
};

Phase1Result run_phase1(const RunConfig& cfg, const Corpus& corpus, std::uint64_t seed, RunLog& log);
void write_phase1(const std::string& dir, const Phase1Result& p1);

/// Retrieval examples for one retrieval partition at support size n. Any
/// pretraining task raises LeakageError.
std::vector<retr::RetrievalExample> make_examples(const std::vector<const synth::EpisodeTask*>& tasks, int n_support,
                                                  const desc::DescriptorBuilder& builder,
                                                  const desc::Standardizer& stdz, const FeatureMap& fm,
                                                  double ridge_alpha);

struct MethodEval {
  std::string method;
  int n_support = 0;
  double temperature = 1.0;
  MetricsRecord metrics;
  std::vector<double> task_auc;  // per test task, in test order
  std::vector<CalibrationBin> bins;
  double latency_ms = 0.0;       // solve + compose per task; never written to CSV
};

/// Calibrates one temperature on validation scores, then scores the test tasks.
MethodEval evaluate_scores(const std::string& method, int n_support, const std::vector<Vec>& val_scores,
                           const std::vector<std::vector<int>>& val_labels, const std::vector<Vec>& test_scores,
                           const std::vector<std::vector<int>>& test_labels);

struct TuneCell {
  double lambda = 0.0, gamma = 0.0;
  int top_r = 0;
  double val_auc = 0.0;
};

struct Phase2Result {
  int n_support = 0;
  retr::TrainConfig train;  // after ablation switches and tuning
  retr::TrainResult trained;
  MethodEval eval;
  std::vector<retr::RetrievalSolution> test_solutions;
  std::vector<std::string> test_ids;
  std::vector<TuneCell> sweep;  // lambda x gamma x top_r search, if enabled
  double oracle_ridge_auc = 0.0;  // full-label ridge on the same test tasks
};

Phase2Result run_phase2(const RunConfig& cfg, const Corpus& corpus, const Phase1Result& p1, int n_support,
                        RunLog& log);
void write_phase2(const std::string& dir, const Phase2Result& p2);

/// Per-task ridge on the support, nearest centroid in feature space, and the
/// full-label ridge oracle, through the same metric pipeline.
std::vector<MethodEval> run_baselines(const RunConfig& cfg, const Corpus& corpus, int n_support, RunLog& log);
void write_methods_csv(const std::string& path, const std::vector<MethodEval>& evals);

// Multi-run harnesses ------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  Phase1Result phase1;
  std::vector<Phase2Result> sweep;  // one per support size
  std::vector<MethodEval> baselines;
  std::vector<risk::BoundReport> bounds;
  std::optional<risk::GapScaling> gaps;
};

struct SeedSummaryRow {
  std::string metric;
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0, range = 0.0;
};
/// Mean, sample std, and range of AUC, F1 and ECE at the evaluation support size.
std::vector<SeedSummaryRow> seed_stability(const std::vector<SeedRun>& runs, int n_support);

struct AblationRow {
  char code = 'A';
  std::string variant;
  MethodEval eval;
  double auc_drop = 0.0;      // relative to A, fraction
  double p_value = 1.0;       // paired bootstrap over test tasks, one-sided
  int r = 0;
  int K = 0;
  std::size_t motif_discoveries = 0;
  double motif_fdp = 0.0;
  double tau_test_auc = 0.0;
};

// Motif stage --------------------------------------------------------------------

struct MotifStageResult {
  motif::MarkovBackground background;
  std::vector<std::string> motifs;
  std::vector<int> enriched;  // channel indices
  motif::MotifTestReport report;
  std::vector<int> discoveries;
  double fdp = 0.0;
  double power = 0.0;
  std::vector<motif::TauCalibration> tau;
  std::vector<motif::PowerPoint> power_curve;
};

MotifStageResult run_motif_stage(const RunConfig& cfg, std::uint64_t seed, RunLog& log);
void write_motif_stage(const std::string& dir, const MotifStageResult& r);

/// Pure-null calibration: m null channels, every channel tested.
struct NullCalibration {
  std::size_t m = 0;
  double fpr_at_q = 0.0;  // fraction with q <= threshold
  double pi0 = 0.0;
  bootstrap::Interval pi0_ci;
  double q_threshold = 0.1;
};
NullCalibration motif_null_calibration(std::size_t m, const MotifStageConfig& mc, std::uint64_t seed);

// Top-level commands --------------------------------------------------------------

/// Corpus CSV and manifest for each seed.
void cmd_generate(const RunConfig& cfg, RunLog& log);
/// Phase 1 for each seed.
std::vector<Phase1Result> cmd_phase1(const RunConfig& cfg, RunLog& log);
/// Phase 1 + phase 2 at every support size, baselines and risk bound, per seed.
SeedRun run_seed(const RunConfig& cfg, std::uint64_t seed, RunLog& log, bool with_sweep = true,
                 bool with_risk = true);
std::vector<AblationRow> run_ablations(const RunConfig& cfg, const std::string& codes, std::uint64_t seed,
                                       RunLog& log);

/// Replays of published dimension-test rows and threshold-test rows.
spectral::DimTestReport dim_test_replay();
struct TauReplayRow {
  std::string cohort;
  double tau_bar, se, t, p;
};
std::vector<TauReplayRow> tau_replay();

struct ReportBundle {
  RunConfig cfg;
  std::vector<SeedRun> seeds;
  std::vector<AblationRow> ablations;
  std::optional<MotifStageResult> motifs;
};

/// Writes whatever parts of the bundle exist (phase-1-only runs included),
/// plus config.json, the replays, summary.txt and timing.json.
void emit_report(const ReportBundle& bundle, RunLog& log);

}  // namespace protoadapt::pipe
