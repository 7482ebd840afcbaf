#pragma once

#include "protoadapt/common.hpp"
#include "protoadapt/model.hpp"
#include "protoadapt/stats.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

// Synthetic episodic tasks with planted low-dimensional adapter structure, and
// the nested partitioning that keeps prototype construction away from
// retrieval-evaluation tasks.
namespace protoadapt::synth {

struct GeneratorConfig {
  int d_theta = 8;             // adapter dimension
  int q = 16;                  // embedding dimension
  int r_true = 2;              // planted intrinsic dimension
  int n_tasks = 600;
  int n_support = 10;
  int n_query = 100;
  double noise_sigma = 0.0;    // std of isotropic off-subspace adapter noise
  int n_clusters = 8;          // task families inside the planted subspace
  double cluster_spread = 0.15;
  double signal_scale = 4.0;   // norm of the in-subspace adapter component
  double feature_noise = 0.0;  // off-subspace leakage of the feature map
  double embedding_shift = 1.5;  // family-specific embedding offset, invisible to the features
  std::uint64_t seed = 42;

  /// Throws ValidationError describing the first violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

enum class Partition { Unassigned, PreSeed, PreRest, RetTrain, RetVal, RetTest };

const char* partition_name(Partition p);
bool is_pretraining(Partition p);
bool is_retrieval(Partition p);

class EpisodeTask {
 public:
  std::string id;
  SampleSet support;
  SampleSet query;
  std::optional<Vec> theta_true;
  int planted_cluster = -1;

  [[nodiscard]] Partition partition() const { return partition_; }
  /// One-shot assignment; a second call throws FrozenError.
  void assign_partition(Partition p);

 private:
  Partition partition_ = Partition::Unassigned;
};

/// Everything about the generator that is shared across tasks: the frozen
/// encoder surrogate and the planted geometry. Pure function of the config.
struct SyntheticWorld {
  FeatureMap feature_map;
  Mat subspace;         // d x r_true orthonormal basis of the planted subspace
  Mat complement;       // d x (d - r_true) orthonormal complement
  Mat family_centers;   // n_clusters x r_true subspace coefficients
  Mat family_shifts;    // n_clusters x q embedding offsets
};

SyntheticWorld make_world(const GeneratorConfig& cfg);

/// Draws a fresh labelled sample set of size n for a task with adapter theta
/// from family `family`.
SampleSet draw_samples(const SyntheticWorld& world, const Vec& theta, int family, int n, Rng& rng);

std::vector<EpisodeTask> generate_corpus(const GeneratorConfig& cfg);

/// Keeps the first n support samples, swapping in the earliest later sample of
/// the missing class if the prefix is single-class.
EpisodeTask truncate_support(const EpisodeTask& task, int n);

struct PartitionConfig {
  double frac_pre = 0.5;
  double frac_seed = 0.8;
  double tau_sim = 0.8;
  double frac_ret_train = 0.6;
  double frac_ret_val = 0.2;
  std::uint64_t seed = 42;
};

struct PartitionAssignment {
  std::vector<Partition> tags;  // parallel to the input task list
  std::vector<int> cluster;     // seed-cluster id for pretraining tasks, -1 otherwise / unassignable
  Mat cluster_directions;       // one unit-norm row per seed cluster
  [[nodiscard]] std::size_t count(Partition p) const;
};

using AdapterOf = std::function<Vec(const EpisodeTask&)>;

/// Splits tasks into disjoint pretraining and retrieval sets, tags a frac_seed
/// share of the pretraining set as the seed subset, forms seed clusters by
/// cosine similarity at threshold tau_sim, and maps the remaining pretraining
/// tasks to their nearest cluster. Throws ValidationError if any partition is empty.
PartitionAssignment partition_tasks(const std::vector<EpisodeTask>& tasks, const AdapterOf& adapter_of,
                                    const PartitionConfig& cfg);

/// Writes the tags into the tasks (one-shot).
void apply_partition(std::vector<EpisodeTask>& tasks, const PartitionAssignment& assignment);

using stats::spearman;

/// One CSV row per sample: task_id, split, label, x0..x{q-1}.
void write_corpus_csv(const std::string& path, const std::vector<EpisodeTask>& tasks);

/// Generator config plus the task -> partition / cluster map.
nlohmann::json corpus_manifest(const GeneratorConfig& cfg, const std::vector<EpisodeTask>& tasks,
                               const PartitionAssignment& assignment);

}  // namespace protoadapt::synth
