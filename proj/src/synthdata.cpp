#include "protoadapt/synthdata.hpp"

#include "protoadapt/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace protoadapt::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Stream ids for derive_seed; tasks use kTaskStream + index.
constexpr std::uint64_t kBasisStream = 1;
constexpr std::uint64_t kEncoderStream = 2;
constexpr std::uint64_t kFamilyStream = 3;
constexpr std::uint64_t kLeakStream = 4;
constexpr std::uint64_t kTaskStream = 1000;

Mat random_orthogonal(Rng& rng, Eigen::Index n) {
  const Mat g = normal_matrix(rng, n, n);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ();
  // Fix column signs so the draw is a deterministic function of g.
  const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("GeneratorConfig: " + m); };
  if (d_theta <= 0 || q <= 0 || r_true <= 0 || n_tasks <= 0 || n_query <= 0 || n_clusters <= 0)
    fail("all counts must be positive");
  if (r_true > d_theta) fail("r_true must not exceed d_theta");
  if (r_true > q) fail("r_true must not exceed the embedding dimension q");
  if (n_support < 2) fail("n_support must be at least 2 so both classes can be present");
  if (noise_sigma < 0.0 || cluster_spread < 0.0 || feature_noise < 0.0 || embedding_shift < 0.0)
    fail("noise and spread parameters must be non-negative");
  if (!(signal_scale > 0.0)) fail("signal_scale must be positive");
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"d_theta", c.d_theta},       {"q", c.q},
                     {"r_true", c.r_true},         {"n_tasks", c.n_tasks},
                     {"n_support", c.n_support},   {"n_query", c.n_query},
                     {"noise_sigma", c.noise_sigma}, {"n_clusters", c.n_clusters},
                     {"cluster_spread", c.cluster_spread}, {"signal_scale", c.signal_scale},
                     {"feature_noise", c.feature_noise}, {"embedding_shift", c.embedding_shift},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  GeneratorConfig d;
  c.d_theta = j.value("d_theta", d.d_theta);
  c.q = j.value("q", d.q);
  c.r_true = j.value("r_true", d.r_true);
  c.n_tasks = j.value("n_tasks", d.n_tasks);
  c.n_support = j.value("n_support", d.n_support);
  c.n_query = j.value("n_query", d.n_query);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.n_clusters = j.value("n_clusters", d.n_clusters);
  c.cluster_spread = j.value("cluster_spread", d.cluster_spread);
  c.signal_scale = j.value("signal_scale", d.signal_scale);
  c.feature_noise = j.value("feature_noise", d.feature_noise);
  c.embedding_shift = j.value("embedding_shift", d.embedding_shift);
  c.seed = j.value("seed", d.seed);
}

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Unassigned: return "Unassigned";
    case Partition::PreSeed: return "Pre-Seed";
    case Partition::PreRest: return "Pre-Rest";
    case Partition::RetTrain: return "Ret-Train";
    case Partition::RetVal: return "Ret-Val";
    case Partition::RetTest: return "Ret-Test";
  }
  return "?";
}

bool is_pretraining(Partition p) { return p == Partition::PreSeed || p == Partition::PreRest; }
bool is_retrieval(Partition p) {
  return p == Partition::RetTrain || p == Partition::RetVal || p == Partition::RetTest;
}

void EpisodeTask::assign_partition(Partition p) {
  if (partition_ != Partition::Unassigned)
    throw FrozenError("task " + id + " already assigned to " + partition_name(partition_));
  if (p == Partition::Unassigned) throw ValidationError("cannot assign the Unassigned partition");
  partition_ = p;
}

SyntheticWorld make_world(const GeneratorConfig& cfg) {
  cfg.validate();
  const Eigen::Index d = cfg.d_theta, q = cfg.q, r = cfg.r_true;
  SyntheticWorld w;

  Rng basis_rng = make_rng(cfg.seed, kBasisStream);
  const Mat basis = random_orthogonal(basis_rng, d);
  w.subspace = basis.leftCols(r);
  w.complement = basis.rightCols(d - r);

  // Encoder: features live in the planted subspace, with optional leakage.
  Rng enc_rng = make_rng(cfg.seed, kEncoderStream);
  const Mat rot_q = random_orthogonal(enc_rng, q);
  const Mat a = rot_q.leftCols(r).transpose();  // r x q, orthonormal rows
  Mat weights = w.subspace * a;
  if (cfg.feature_noise > 0.0 && d > r) {
    Rng leak_rng = make_rng(cfg.seed, kLeakStream);
    weights += cfg.feature_noise * w.complement * normal_matrix(leak_rng, d - r, q, 1.0 / std::sqrt(double(q)));
  }
  w.feature_map = FeatureMap(weights);

  Rng fam_rng = make_rng(cfg.seed, kFamilyStream);
  w.family_centers.resize(cfg.n_clusters, r);
  if (r == 2) {
    const double offset = 2.0 * kPi * uniform01(fam_rng);
    for (int k = 0; k < cfg.n_clusters; ++k) {
      const double ang = offset + 2.0 * kPi * k / cfg.n_clusters;
      w.family_centers(k, 0) = cfg.signal_scale * std::cos(ang);
      w.family_centers(k, 1) = cfg.signal_scale * std::sin(ang);
    }
  } else {
    for (int k = 0; k < cfg.n_clusters; ++k) {
      Vec c = normal_vector(fam_rng, r);
      w.family_centers.row(k) = cfg.signal_scale * c.normalized();
    }
  }
  // Family offsets live in the null space of the encoder, so they move pooled
  // embedding statistics without changing any logit.
  const Mat null_proj = Mat::Identity(q, q) - a.transpose() * a;
  w.family_shifts.resize(cfg.n_clusters, q);
  for (int k = 0; k < cfg.n_clusters; ++k) {
    Vec s = null_proj * normal_vector(fam_rng, q);
    const double n = s.norm();
    w.family_shifts.row(k) = n > 0.0 ? Vec(cfg.embedding_shift * s / n) : Vec::Zero(q);
  }
  return w;
}

SampleSet draw_samples(const SyntheticWorld& world, const Vec& theta, int family, int n, Rng& rng) {
  const Eigen::Index q = world.feature_map.input_dim();
  SampleSet s;
  s.x.resize(n, q);
  s.y.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Vec x = world.family_shifts.row(family).transpose() + normal_vector(rng, q);
    const double p = sigmoid(theta.dot(world.feature_map.apply(x)));
    s.x.row(i) = x.transpose();
    s.y[static_cast<std::size_t>(i)] = uniform01(rng) < p ? 1 : 0;
  }
  return s;
}

std::vector<EpisodeTask> generate_corpus(const GeneratorConfig& cfg) {
  const SyntheticWorld world = make_world(cfg);
  const Eigen::Index d = cfg.d_theta, r = cfg.r_true;
  std::vector<EpisodeTask> tasks(static_cast<std::size_t>(cfg.n_tasks));
  for (int t = 0; t < cfg.n_tasks; ++t) {
    Rng rng = make_rng(cfg.seed, kTaskStream + static_cast<std::uint64_t>(t));
    EpisodeTask& task = tasks[static_cast<std::size_t>(t)];
    char id[32];
    std::snprintf(id, sizeof id, "task-%05d", t);
    task.id = id;
    const int family = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.n_clusters)));
    task.planted_cluster = family;
    Vec coef = world.family_centers.row(family).transpose() +
               normal_vector(rng, r, cfg.cluster_spread * cfg.signal_scale);
    Vec theta = world.subspace * coef;
    if (d > r && cfg.noise_sigma > 0.0) theta += world.complement * normal_vector(rng, d - r, cfg.noise_sigma);
    task.theta_true = theta;

    int attempts = 0;
    do {
      if (++attempts > 1000) throw NumericalError("could not draw a two-class support for " + task.id);
      task.support = draw_samples(world, theta, family, cfg.n_support, rng);
    } while (!task.support.has_both_classes());
    task.query = draw_samples(world, theta, family, cfg.n_query, rng);
  }
  return tasks;
}

EpisodeTask truncate_support(const EpisodeTask& task, int n) {
  if (n < 2) throw ValidationError("truncate_support: need at least 2 samples");
  if (static_cast<std::size_t>(n) > task.support.size())
    throw ValidationError("truncate_support: support size exceeds available samples");
  std::vector<std::size_t> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  EpisodeTask out;
  out.id = task.id;
  out.query = task.query;
  out.theta_true = task.theta_true;
  out.planted_cluster = task.planted_cluster;
  out.support = task.support.subset(rows);
  if (!out.support.has_both_classes()) {
    const int missing = 1 - out.support.y.front();
    for (std::size_t j = rows.size(); j < task.support.size(); ++j) {
      if (task.support.y[j] == missing) {
        rows.back() = j;
        out.support = task.support.subset(rows);
        break;
      }
    }
  }
  if (task.partition() != Partition::Unassigned) out.assign_partition(task.partition());
  return out;
}

std::size_t PartitionAssignment::count(Partition p) const {
  return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), p));
}

PartitionAssignment partition_tasks(const std::vector<EpisodeTask>& tasks, const AdapterOf& adapter_of,
                                    const PartitionConfig& cfg) {
  auto in_open_unit = [](double f) { return f > 0.0 && f < 1.0; };
  if (!in_open_unit(cfg.frac_pre) || !in_open_unit(cfg.frac_seed))
    throw ValidationError("partition fractions must lie in (0, 1)");
  if (!in_open_unit(cfg.frac_ret_train) || !(cfg.frac_ret_val > 0.0) || cfg.frac_ret_train + cfg.frac_ret_val >= 1.0)
    throw ValidationError("retrieval split fractions must leave a non-empty test share");

  const std::size_t n = tasks.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(cfg.seed, 0x9a27);
  shuffle(order, rng);

  const auto n_pre = static_cast<std::size_t>(std::llround(cfg.frac_pre * static_cast<double>(n)));
  const auto n_seed = static_cast<std::size_t>(std::llround(cfg.frac_seed * static_cast<double>(n_pre)));
  const std::size_t n_ret = n - n_pre;
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.frac_ret_train * static_cast<double>(n_ret)));
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.frac_ret_val * static_cast<double>(n_ret)));

  PartitionAssignment out;
  out.tags.assign(n, Partition::Unassigned);
  out.cluster.assign(n, -1);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t t = order[k];
    if (k < n_seed)
      out.tags[t] = Partition::PreSeed;
    else if (k < n_pre)
      out.tags[t] = Partition::PreRest;
    else if (k < n_pre + n_train)
      out.tags[t] = Partition::RetTrain;
    else if (k < n_pre + n_train + n_val)
      out.tags[t] = Partition::RetVal;
    else
      out.tags[t] = Partition::RetTest;
  }
  for (Partition p : {Partition::PreSeed, Partition::PreRest, Partition::RetTrain, Partition::RetVal, Partition::RetTest})
    if (out.count(p) == 0) throw ValidationError(std::string("partition would be empty: ") + partition_name(p));

  // Seed clusters: join the most similar cluster direction if its cosine
  // reaches tau_sim, otherwise open a new cluster.
  std::vector<Vec> sums;
  std::vector<Vec> dirs;
  for (std::size_t k = 0; k < n_seed; ++k) {
    const std::size_t t = order[k];
    const Vec a = adapter_of(tasks[t]);
    int best = -1;
    double best_cos = -2.0;
    for (std::size_t c = 0; c < dirs.size(); ++c) {
      const double cs = cosine(a, dirs[c]);
      if (cs > best_cos) {
        best_cos = cs;
        best = static_cast<int>(c);
      }
    }
    const double na = a.norm();
    const Vec unit = na > 0.0 ? Vec(a / na) : Vec::Zero(a.size());
    if (best >= 0 && best_cos >= cfg.tau_sim) {
      sums[static_cast<std::size_t>(best)] += unit;
      const double ns = sums[static_cast<std::size_t>(best)].norm();
      if (ns > 0.0) dirs[static_cast<std::size_t>(best)] = sums[static_cast<std::size_t>(best)] / ns;
      out.cluster[t] = best;
    } else {
      sums.push_back(unit);
      dirs.push_back(unit);
      out.cluster[t] = static_cast<int>(dirs.size() - 1);
    }
  }
  // Remaining pretraining tasks: nearest cluster by cosine, if above threshold.
  for (std::size_t k = n_seed; k < n_pre; ++k) {
    const std::size_t t = order[k];
    const Vec a = adapter_of(tasks[t]);
    int best = -1;
    double best_cos = -2.0;
    for (std::size_t c = 0; c < dirs.size(); ++c) {
      const double cs = cosine(a, dirs[c]);
      if (cs > best_cos) {
        best_cos = cs;
        best = static_cast<int>(c);
      }
    }
    out.cluster[t] = (best >= 0 && best_cos >= cfg.tau_sim) ? best : -1;
  }
  const Eigen::Index dim = dirs.empty() ? 0 : dirs.front().size();
  out.cluster_directions.resize(static_cast<Eigen::Index>(dirs.size()), dim);
  for (std::size_t c = 0; c < dirs.size(); ++c) out.cluster_directions.row(static_cast<Eigen::Index>(c)) = dirs[c];
  return out;
}

void apply_partition(std::vector<EpisodeTask>& tasks, const PartitionAssignment& assignment) {
  if (assignment.tags.size() != tasks.size()) throw ValidationError("partition size mismatch");
  for (std::size_t i = 0; i < tasks.size(); ++i) tasks[i].assign_partition(assignment.tags[i]);
}

void write_corpus_csv(const std::string& path, const std::vector<EpisodeTask>& tasks) {
  io::CsvWriter w(path);
  const Eigen::Index q = tasks.empty() ? 0 : tasks.front().support.x.cols();
  std::vector<std::string> head{"task_id", "split", "label"};
  for (Eigen::Index j = 0; j < q; ++j) head.push_back("x" + std::to_string(j));
  w.header(head);
  auto emit = [&](const EpisodeTask& t, const SampleSet& s, const char* split) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::vector<std::string> row{t.id, split, std::to_string(s.y[i])};
      for (Eigen::Index j = 0; j < q; ++j) row.push_back(io::num(s.x(static_cast<Eigen::Index>(i), j), 17));
      w.row(row);
    }
  };
  for (const auto& t : tasks) {
    emit(t, t.support, "support");
    emit(t, t.query, "query");
  }
}

nlohmann::json corpus_manifest(const GeneratorConfig& cfg, const std::vector<EpisodeTask>& tasks,
                               const PartitionAssignment& assignment) {
  nlohmann::json j;
  j["generator"] = cfg;
  nlohmann::json parts = nlohmann::json::array();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    parts.push_back({{"task_id", tasks[i].id},
                     {"partition", partition_name(i < assignment.tags.size() ? assignment.tags[i] : tasks[i].partition())},
                     {"seed_cluster", i < assignment.cluster.size() ? assignment.cluster[i] : -1},
                     {"planted_family", tasks[i].planted_cluster}});
  }
  j["partitions"] = parts;
  j["n_seed_clusters"] = assignment.cluster_directions.rows();
  return j;
}

}  // namespace protoadapt::synth
