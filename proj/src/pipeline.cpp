#include "protoadapt/pipeline.hpp"

#include "protoadapt/io.hpp"
#include "protoadapt/stats.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace protoadapt::pipe {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string seed_dir(const RunConfig& cfg, std::uint64_t seed) {
  return io::join_path(cfg.out_dir, "seed_" + std::to_string(seed));
}

}  // namespace

// Ablations --------------------------------------------------------------------

Ablation ablation_for(char code) {
  Ablation a;
  switch (code) {
    case 'A': break;
    case 'B': a.fixed_r = true; break;
    case 'C': a.no_top_r = true; break;
    case 'D': a.gamma_zero = true; break;
    case 'E': a.fixed_tau = true; break;
    case 'F': a.bonferroni_only = true; break;
    case 'G': a.no_canonicalization = true; break;
    case 'H': a.mlp_front = true; break;
    default: throw ValidationError(std::string("unknown ablation code: ") + code);
  }
  return a;
}

std::string ablation_description(char code) {
  switch (code) {
    case 'A': return "full system";
    case 'B': return "no Fisher test (fixed r = d_theta)";
    case 'C': return "no hard top-r (soft l1 only)";
    case 'D': return "no proximal initialization (gamma = 0)";
    case 'E': return "no nested-CV threshold test (tau = 0.5)";
    case 'F': return "no Storey pi0 (Bonferroni only)";
    case 'G': return "no canonicalization (raw adapters)";
    case 'H': return "residual MLP instead of ODE block";
    default: throw ValidationError(std::string("unknown ablation code: ") + code);
  }
}

// Config -------------------------------------------------------------------------

synth::GeneratorConfig RunConfig::default_generator() {
  synth::GeneratorConfig g;
  g.n_support = 50;
  g.n_query = 100;
  g.embedding_shift = 3.0;
  return g;
}

retr::TrainConfig RunConfig::default_train() {
  retr::TrainConfig t;
  t.front.kind = retr::FrontKind::Ode;
  t.prox.gamma = 1.0;
  t.top_r = 0;  // follow the selected subspace rank
  t.front.solve.rtol = 1e-4;
  t.front.solve.atol = 1e-6;
  return t;
}

void RunConfig::validate() const {
  gen.validate();
  if (seeds.empty()) throw ValidationError("config: at least one seed required");
  if (K < 1 || r_sparse < 1 || kmeans_restarts < 1) throw ValidationError("config: K, r_sparse, kmeans_restarts must be >= 1");
  if (!(rho_select > 0.0 && rho_select <= 1.0)) throw ValidationError("config: rho_select must lie in (0, 1]");
  for (double r : rho)
    if (!(r > 0.0 && r <= 1.0)) throw ValidationError("config: rho values must lie in (0, 1]");
  if (support_sizes.empty()) throw ValidationError("config: empty support size list");
  for (int n : support_sizes)
    if (n < 2 || n > gen.n_support) throw ValidationError("config: support sizes must lie in [2, gen.n_support]");
  if (eval_support < 2 || eval_support > gen.n_support) throw ValidationError("config: eval_support out of range");
  if (n_boot < 10) throw ValidationError("config: n_boot must be >= 10");
  if (log_period < 1) throw ValidationError("config: log_period must be >= 1");
  train.prox.validate();
}

namespace {

nlohmann::json part_json(const synth::PartitionConfig& p) {
  return {{"frac_pre", p.frac_pre},           {"frac_seed", p.frac_seed},      {"tau_sim", p.tau_sim},
          {"frac_ret_train", p.frac_ret_train}, {"frac_ret_val", p.frac_ret_val}, {"seed", p.seed}};
}

void part_from(const nlohmann::json& j, synth::PartitionConfig& p) {
  const synth::PartitionConfig d;
  p.frac_pre = j.value("frac_pre", d.frac_pre);
  p.frac_seed = j.value("frac_seed", d.frac_seed);
  p.tau_sim = j.value("tau_sim", d.tau_sim);
  p.frac_ret_train = j.value("frac_ret_train", d.frac_ret_train);
  p.frac_ret_val = j.value("frac_ret_val", d.frac_ret_val);
  p.seed = j.value("seed", d.seed);
}

nlohmann::json desc_json(const desc::DescriptorConfig& c) {
  return {{"percentiles", c.percentiles}, {"small_support_cutoff", c.small_support_cutoff},
          {"n_boot_var", c.n_boot_var},   {"clip", c.clip}, {"seed", c.seed}};
}

void desc_from(const nlohmann::json& j, desc::DescriptorConfig& c) {
  const desc::DescriptorConfig d;
  c.percentiles = j.value("percentiles", d.percentiles);
  c.small_support_cutoff = j.value("small_support_cutoff", d.small_support_cutoff);
  c.n_boot_var = j.value("n_boot_var", d.n_boot_var);
  c.clip = j.value("clip", d.clip);
  c.seed = j.value("seed", d.seed);
}

nlohmann::json perm_json(const motif::PermutationConfig& p) {
  return {{"b_min", p.b_min}, {"b_max", p.b_max}, {"block", p.block}, {"stability", p.stability}, {"seed", p.seed}};
}

void perm_from(const nlohmann::json& j, motif::PermutationConfig& p) {
  const motif::PermutationConfig d;
  p.b_min = j.value("b_min", d.b_min);
  p.b_max = j.value("b_max", d.b_max);
  p.block = j.value("block", d.block);
  p.stability = j.value("stability", d.stability);
  p.seed = j.value("seed", d.seed);
}

nlohmann::json tau_json(const motif::TauConfig& t) {
  return {{"cal_frac", t.cal_frac}, {"grid_lo", t.grid_lo}, {"grid_hi", t.grid_hi}, {"grid_points", t.grid_points},
          {"shrink", t.shrink},     {"auc_gap", t.auc_gap}, {"alpha", t.alpha},     {"max_rounds", t.max_rounds},
          {"seed", t.seed}};
}

void tau_from(const nlohmann::json& j, motif::TauConfig& t) {
  const motif::TauConfig d;
  t.cal_frac = j.value("cal_frac", d.cal_frac);
  t.grid_lo = j.value("grid_lo", d.grid_lo);
  t.grid_hi = j.value("grid_hi", d.grid_hi);
  t.grid_points = j.value("grid_points", d.grid_points);
  t.shrink = j.value("shrink", d.shrink);
  t.auc_gap = j.value("auc_gap", d.auc_gap);
  t.alpha = j.value("alpha", d.alpha);
  t.max_rounds = j.value("max_rounds", d.max_rounds);
  t.seed = j.value("seed", d.seed);
}

nlohmann::json motif_json(const MotifStageConfig& m) {
  return {{"n_train_sequences", m.n_train_sequences},
          {"min_len", m.min_len},
          {"max_len", m.max_len},
          {"background_order", m.background_order},
          {"pseudocount", m.pseudocount},
          {"n_motifs", m.n_motifs},
          {"motif_len", m.motif_len},
          {"n_enriched", m.n_enriched},
          {"effect", m.effect},
          {"top_frac", m.top_frac},
          {"q_threshold", m.q_threshold},
          {"cohort",
           {{"n_repertoires", m.cohort.n_repertoires},
            {"seqs_per_repertoire", m.cohort.seqs_per_repertoire},
            {"frac_positive", m.cohort.frac_positive}}},
          {"perm", perm_json(m.perm)},
          {"n_boot_storey", m.n_boot_storey},
          {"power_effects", m.power_effects},
          {"power_reps", m.power_reps},
          {"tau_cohorts", m.tau_cohorts},
          {"tau_repertoires", m.tau_repertoires},
          {"tau", tau_json(m.tau)}};
}

void motif_from(const nlohmann::json& j, MotifStageConfig& m) {
  const MotifStageConfig d;
  m.n_train_sequences = j.value("n_train_sequences", d.n_train_sequences);
  m.min_len = j.value("min_len", d.min_len);
  m.max_len = j.value("max_len", d.max_len);
  m.background_order = j.value("background_order", d.background_order);
  m.pseudocount = j.value("pseudocount", d.pseudocount);
  m.n_motifs = j.value("n_motifs", d.n_motifs);
  m.motif_len = j.value("motif_len", d.motif_len);
  m.n_enriched = j.value("n_enriched", d.n_enriched);
  m.effect = j.value("effect", d.effect);
  m.top_frac = j.value("top_frac", d.top_frac);
  m.q_threshold = j.value("q_threshold", d.q_threshold);
  if (j.contains("cohort")) {
    const auto& c = j.at("cohort");
    m.cohort.n_repertoires = c.value("n_repertoires", d.cohort.n_repertoires);
    m.cohort.seqs_per_repertoire = c.value("seqs_per_repertoire", d.cohort.seqs_per_repertoire);
    m.cohort.frac_positive = c.value("frac_positive", d.cohort.frac_positive);
  }
  if (j.contains("perm")) perm_from(j.at("perm"), m.perm);
  m.n_boot_storey = j.value("n_boot_storey", d.n_boot_storey);
  m.power_effects = j.value("power_effects", d.power_effects);
  m.power_reps = j.value("power_reps", d.power_reps);
  m.tau_cohorts = j.value("tau_cohorts", d.tau_cohorts);
  m.tau_repertoires = j.value("tau_repertoires", d.tau_repertoires);
  if (j.contains("tau")) tau_from(j.at("tau"), m.tau);
}

nlohmann::json ablation_json(const Ablation& a) {
  return {{"fixed_r", a.fixed_r},       {"no_top_r", a.no_top_r},
          {"gamma_zero", a.gamma_zero}, {"fixed_tau", a.fixed_tau},
          {"bonferroni_only", a.bonferroni_only}, {"no_canonicalization", a.no_canonicalization},
          {"mlp_front", a.mlp_front}};
}

void ablation_from(const nlohmann::json& j, Ablation& a) {
  a.fixed_r = j.value("fixed_r", false);
  a.no_top_r = j.value("no_top_r", false);
  a.gamma_zero = j.value("gamma_zero", false);
  a.fixed_tau = j.value("fixed_tau", false);
  a.bonferroni_only = j.value("bonferroni_only", false);
  a.no_canonicalization = j.value("no_canonicalization", false);
  a.mlp_front = j.value("mlp_front", false);
}

}  // namespace

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"gen", c.gen},
       {"partition", part_json(c.part)},
       {"K_grid", c.K_grid},
       {"lambda_grid", c.lambda_grid},
       {"gamma_grid", c.gamma_grid},
       {"r_grid", c.r_grid},
       {"grid_search", c.grid_search},
       {"search_lambda", c.search_lambda},
       {"search_epochs", c.search_epochs},
       {"seeds", c.seeds},
       {"rho", c.rho},
       {"rho_select", c.rho_select},
       {"K", c.K},
       {"r_sparse", c.r_sparse},
       {"kmeans_restarts", c.kmeans_restarts},
       {"ridge_alpha", c.ridge_alpha},
       {"mu_threshold", c.mu_threshold},
       {"n_boot", c.n_boot},
       {"fisher_alpha", c.fisher_alpha},
       {"train", c.train},
       {"descriptor", desc_json(c.descriptor)},
       {"eval_support", c.eval_support},
       {"support_sizes", c.support_sizes},
       {"log_period", c.log_period},
       {"motifs", motif_json(c.motifs)},
       {"ablation", ablation_json(c.ablation)},
       {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  const RunConfig d;
  if (j.contains("gen")) {
    // Merge over the pipeline defaults rather than the bare generator defaults.
    nlohmann::json g = d.gen;
    g.update(j.at("gen"));
    c.gen = g.get<synth::GeneratorConfig>();
  }
  if (j.contains("partition")) part_from(j.at("partition"), c.part);
  c.K_grid = j.value("K_grid", d.K_grid);
  c.lambda_grid = j.value("lambda_grid", d.lambda_grid);
  c.gamma_grid = j.value("gamma_grid", d.gamma_grid);
  c.r_grid = j.value("r_grid", d.r_grid);
  c.grid_search = j.value("grid_search", d.grid_search);
  c.search_lambda = j.value("search_lambda", d.search_lambda);
  c.search_epochs = j.value("search_epochs", d.search_epochs);
  c.seeds = j.value("seeds", d.seeds);
  c.rho = j.value("rho", d.rho);
  c.rho_select = j.value("rho_select", d.rho_select);
  c.K = j.value("K", d.K);
  c.r_sparse = j.value("r_sparse", d.r_sparse);
  c.kmeans_restarts = j.value("kmeans_restarts", d.kmeans_restarts);
  c.ridge_alpha = j.value("ridge_alpha", d.ridge_alpha);
  c.mu_threshold = j.value("mu_threshold", d.mu_threshold);
  c.n_boot = j.value("n_boot", d.n_boot);
  c.fisher_alpha = j.value("fisher_alpha", d.fisher_alpha);
  if (j.contains("train")) {
    nlohmann::json t = d.train;
    t.update(j.at("train"));
    c.train = t.get<retr::TrainConfig>();
  }
  if (j.contains("descriptor")) desc_from(j.at("descriptor"), c.descriptor);
  c.eval_support = j.value("eval_support", d.eval_support);
  c.support_sizes = j.value("support_sizes", d.support_sizes);
  c.log_period = j.value("log_period", d.log_period);
  if (j.contains("motifs")) motif_from(j.at("motifs"), c.motifs);
  if (j.contains("ablation")) ablation_from(j.at("ablation"), c.ablation);
  c.out_dir = j.value("out_dir", d.out_dir);
}

std::string RunConfig::hash() const {
  nlohmann::json j = *this;
  j.erase("out_dir");
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

// Log -----------------------------------------------------------------------------

RunLog::RunLog(std::string path) : path_(std::move(path)) {
  if (!path_.empty()) std::ofstream(path_, std::ios::trunc);
}

void RunLog::event(const std::string& stage, const std::string& what,
                   const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string line = "stage=" + stage + " event=" + what;
  for (const auto& [k, v] : kv) line += " " + k + "=" + v;
  lines_.push_back(line);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    out << line << '\n';
  }
}

// Metrics -------------------------------------------------------------------------

std::vector<CalibrationBin> calibration_bins(std::span<const double> probs, std::span<const int> labels, int n_bins) {
  if (n_bins < 1) throw ValidationError("calibration_bins: n_bins must be >= 1");
  std::vector<CalibrationBin> bins(static_cast<std::size_t>(n_bins));
  std::vector<double> conf(bins.size(), 0.0), pos(bins.size(), 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto b = std::min<std::size_t>(static_cast<std::size_t>(probs[i] * n_bins), bins.size() - 1);
    ++bins[b].count;
    conf[b] += probs[i];
    pos[b] += labels[i];
  }
  for (std::size_t b = 0; b < bins.size(); ++b) {
    bins[b].lo = static_cast<double>(b) / n_bins;
    bins[b].hi = static_cast<double>(b + 1) / n_bins;
    if (bins[b].count > 0) {
      bins[b].mean_conf = conf[b] / static_cast<double>(bins[b].count);
      bins[b].freq = pos[b] / static_cast<double>(bins[b].count);
    }
  }
  return bins;
}

MetricsRecord compute_metrics(std::span<const double> probs, std::span<const int> labels, int n_bins) {
  if (probs.size() != labels.size() || probs.empty()) throw ValidationError("compute_metrics: size mismatch or empty");
  for (double p : probs)
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("compute_metrics: probabilities must lie in [0, 1]");
  MetricsRecord m;
  m.n = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool pred = probs[i] >= 0.5;
    if (labels[i] == 1) {
      pred ? ++m.tp : ++m.fn;
    } else {
      pred ? ++m.fp : ++m.tn;
    }
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  m.accuracy = ratio(m.tp + m.tn, m.n);
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  m.f1 = ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn);
  m.auc = stats::auc(probs, labels);  // throws on single-class labels
  m.mean_task_auc = m.auc;
  double ece = 0.0;
  for (const auto& b : calibration_bins(probs, labels, n_bins))
    ece += static_cast<double>(b.count) / static_cast<double>(m.n) * std::abs(b.mean_conf - b.freq);
  m.ece = ece;
  std::vector<double> health(probs.begin(), probs.end());
  std::size_t high = 0;
  for (double& h : health) {
    high += h >= 0.5;
    h = 1.0 - h;
  }
  m.health_mean = stats::mean(health);
  m.health_median = stats::median(health);
  m.high_risk_fraction = ratio(high, m.n);
  return m;
}

// Corpus ----------------------------------------------------------------------------

std::vector<const synth::EpisodeTask*> Corpus::in(synth::Partition p) const {
  std::vector<const synth::EpisodeTask*> out;
  for (const auto& t : tasks)
    if (t.partition() == p) out.push_back(&t);
  return out;
}

Corpus build_corpus(const RunConfig& cfg, std::uint64_t seed) {
  Corpus c;
  c.gen = cfg.gen;
  c.gen.seed = seed;
  c.world = synth::make_world(c.gen);
  c.tasks = synth::generate_corpus(c.gen);
  synth::PartitionConfig pc = cfg.part;
  pc.seed = seed;
  const FeatureMap& fm = c.world.feature_map;
  c.assignment = synth::partition_tasks(
      c.tasks, [&](const synth::EpisodeTask& t) { return adapters::ridge_adapter_full(t, fm, cfg.ridge_alpha); }, pc);
  synth::apply_partition(c.tasks, c.assignment);
  return c;
}

// Phase 1 ------------------------------------------------------------------------------

namespace {

Mat full_adapters(const std::vector<const synth::EpisodeTask*>& tasks, const FeatureMap& fm, double alpha,
                  std::vector<std::string>* ids) {
  Mat out(static_cast<Eigen::Index>(tasks.size()), fm.output_dim());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!synth::is_pretraining(tasks[i]->partition()))
      throw LeakageError("phase 1 reached retrieval task " + tasks[i]->id);
    out.row(static_cast<Eigen::Index>(i)) = adapters::ridge_adapter_full(*tasks[i], fm, alpha).transpose();
    if (ids) ids->push_back(tasks[i]->id);
  }
  return out;
}

}  // namespace

Phase1Result run_phase1(const RunConfig& cfg, const Corpus& corpus, std::uint64_t seed, RunLog& log) {
  const auto t0 = Clock::now();
  Phase1Result p;
  const FeatureMap& fm = corpus.world.feature_map;
  const auto seed_tasks = corpus.in(synth::Partition::PreSeed);
  const auto rest_tasks = corpus.in(synth::Partition::PreRest);
  const std::string sd = std::to_string(seed);

  std::vector<std::string> ids;
  const Mat theta = full_adapters(seed_tasks, fm, cfg.ridge_alpha, &ids);
  p.theta_seed = adapters::assemble_theta(
      [&] {
        std::vector<Vec> rows;
        for (Eigen::Index i = 0; i < theta.rows(); ++i) rows.emplace_back(theta.row(i).transpose());
        return rows;
      }(),
      ids, cfg.ridge_alpha);
  p.theta_rest = full_adapters(rest_tasks, fm, cfg.ridge_alpha, nullptr);
  log.event("phase1", "adapters", {{"seed", sd}, {"n_seed", std::to_string(theta.rows())},
                                   {"n_rest", std::to_string(p.theta_rest.rows())}});

  for (double rho : cfg.rho) p.rank_by_rho.emplace_back(rho, spectral::pca_rank(theta, rho).r);
  p.pca = spectral::pca_rank(theta, cfg.rho_select);
  p.r_center = p.pca.r;

  p.probe = ProbeHead::make(fm.output_dim(), derive_seed(seed, 0x9b0e));
  std::vector<Mat> blocks;
  Eigen::Index rows = 0;
  for (const auto* t : seed_tasks) {
    blocks.push_back(probe_sample_gradients(p.probe, fm.apply_rows(t->support.x), t->support.y));
    rows += blocks.back().rows();
  }
  Mat g(rows, fm.output_dim());
  rows = 0;
  for (const auto& b : blocks) {
    g.middleRows(rows, b.rows()) = b;
    rows += b.rows();
  }
  spectral::FisherTestConfig fc;
  fc.n_boot = cfg.n_boot;
  fc.alpha = cfg.fisher_alpha;
  fc.seed = derive_seed(seed, 0xf15e);
  p.dim_test = spectral::fisher_energy_test_gradients(g, -1.0, p.r_center, fc);
  if (p.dim_test.selected_r) {
    p.r = *p.dim_test.selected_r;
  } else {
    p.r = p.r_center;
    p.r_fallback = true;
  }
  if (cfg.ablation.fixed_r) p.r = static_cast<int>(fm.output_dim());
  log.event("phase1", "rank", {{"seed", sd}, {"pca_r", std::to_string(p.r_center)}, {"r", std::to_string(p.r)},
                               {"fallback", p.r_fallback ? "1" : "0"}});

  const auto projector = proto::fit_projector(theta, p.r, !cfg.ablation.no_canonicalization);
  const int K = std::min<int>(cfg.K, static_cast<int>(theta.rows()));
  auto cl = proto::cluster_prototypes(theta, projector, K, cfg.kmeans_restarts, derive_seed(seed, 0xc1u));
  p.kmeans_stability = cl.stability;
  proto::MergeConfig mc;
  mc.mu_threshold = cfg.mu_threshold;
  mc.r_sparse = cfg.r_sparse;
  p.memory = proto::merge_prototypes(std::move(cl.memory), mc, &theta);
  p.memory.freeze();
  const auto mode = cfg.r_sparse <= 2 ? proto::L0Mode::Exact : proto::L0Mode::Omp;
  p.memory.set_certificate(proto::coverage_certificate(
      p.memory, p.theta_rest, cfg.r_sparse, bootstrap::ResamplePlan::random(cfg.n_boot, derive_seed(seed, 0xce47)),
      mode));
  log.event("phase1", "memory",
            {{"seed", sd}, {"K", std::to_string(p.memory.K())}, {"merges", std::to_string(p.memory.merge_log.size())},
             {"mu", io::num(p.memory.diag().mu, 6)}, {"lifted_kappa", io::num(p.memory.lifted_diag().kappa, 6)},
             {"eps_hat", io::num(p.memory.eps_hat(), 6)}, {"eps_upper", io::num(p.memory.eps_upper(), 6)},
             {"kmeans_stability", io::num(p.kmeans_stability, 6)}});

  // Descriptor standardizers are frozen artifacts of the pretraining partition.
  desc::DescriptorConfig dc = cfg.descriptor;
  dc.seed = derive_seed(seed, 0xde5c);
  const desc::DescriptorBuilder builder(p.probe, fm, p.memory.projector().q, dc);
  std::vector<int> sizes = cfg.support_sizes;
  sizes.push_back(cfg.eval_support);
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  std::vector<const synth::EpisodeTask*> pre = seed_tasks;
  pre.insert(pre.end(), rest_tasks.begin(), rest_tasks.end());
  for (int n : sizes) {
    std::vector<synth::EpisodeTask> trunc;
    trunc.reserve(pre.size());
    for (const auto* t : pre) trunc.push_back(synth::truncate_support(*t, n));
    std::vector<const synth::EpisodeTask*> ptrs;
    for (const auto& t : trunc) ptrs.push_back(&t);
    p.standardizers.emplace(n, desc::fit_standardizer(ptrs, builder));
  }
  log.event("phase1", "done", {{"seed", sd}, {"ms", io::num(ms_since(t0), 4)}});
  return p;
}

void write_phase1(const std::string& dir, const Phase1Result& p) {
  io::ensure_dir(dir);
  adapters::write_adapter_csv(io::join_path(dir, "adapters_seed.csv"), p.theta_seed);
  {
    io::CsvWriter w(io::join_path(dir, "rank_by_rho.csv"));
    w.header({"rho", "r"});
    for (const auto& [rho, r] : p.rank_by_rho) w.row({io::num(rho), std::to_string(r)});
  }
  {
    io::CsvWriter w(io::join_path(dir, "pca_spectrum.csv"));
    w.header({"k", "singular_value", "cumulative_energy"});
    for (Eigen::Index k = 0; k < p.pca.singular_values.size(); ++k)
      w.row({std::to_string(k + 1), io::num(p.pca.singular_values[k]), io::num(p.pca.cumulative_energy[k])});
  }
  spectral::write_dim_test_csv(io::join_path(dir, "dim_test.csv"), p.dim_test);
  proto::write_memory(io::join_path(dir, "memory"), p.memory);
  {
    const auto& c = *p.memory.certificate();
    io::CsvWriter w(io::join_path(dir, "diagnostics.csv"));
    w.header({"K", "r", "r_center", "r_fallback", "kappa", "mu", "lifted_kappa", "lifted_mu", "kmeans_stability",
              "eps_hat", "eps_pct90_lo", "eps_pct90_hi", "eps_bca90_lo", "eps_bca90_hi", "merges"});
    w.row({std::to_string(p.memory.K()), std::to_string(p.r), std::to_string(p.r_center), p.r_fallback ? "1" : "0",
           io::num(p.memory.diag().kappa), io::num(p.memory.diag().mu), io::num(p.memory.lifted_diag().kappa),
           io::num(p.memory.lifted_diag().mu), io::num(p.kmeans_stability), io::num(c.eps_hat), io::num(c.pct90.lo),
           io::num(c.pct90.hi), io::num(c.bca90.lo), io::num(c.bca90.hi), std::to_string(p.memory.merge_log.size())});
  }
  for (const auto& [n, s] : p.standardizers)
    io::write_text(io::join_path(dir, "standardizer_n" + std::to_string(n) + ".json"), desc::to_json(s).dump(1) + "\n");
}

// Phase 2 ---------------------------------------------------------------------------------

std::vector<retr::RetrievalExample> make_examples(const std::vector<const synth::EpisodeTask*>& tasks, int n_support,
                                                  const desc::DescriptorBuilder& builder,
                                                  const desc::Standardizer& stdz, const FeatureMap& fm,
                                                  double ridge_alpha) {
  for (const auto* t : tasks)
    if (!synth::is_retrieval(t->partition()))
      throw LeakageError("retrieval examples requested for " + t->id + " tagged " + synth::partition_name(t->partition()));
  std::vector<retr::RetrievalExample> out(tasks.size());
  for_each_index(Exec::Parallel, tasks.size(), [&](std::size_t i) {
    const synth::EpisodeTask tt = synth::truncate_support(*tasks[i], n_support);
    auto& ex = out[i];
    ex.id = tt.id;
    ex.partition = tt.partition();
    ex.z = desc::build_descriptor(tt.support, builder, stdz).z;
    ex.theta_hat = adapters::ridge_adapter(tt, fm, ridge_alpha);
    ex.query_features = fm.apply_rows(tt.query.x);
    ex.query_y = tt.query.y;
  });
  return out;
}

MethodEval evaluate_scores(const std::string& method, int n_support, const std::vector<Vec>& val_scores,
                           const std::vector<std::vector<int>>& val_labels, const std::vector<Vec>& test_scores,
                           const std::vector<std::vector<int>>& test_labels) {
  MethodEval e;
  e.method = method;
  e.n_support = n_support;
  e.temperature = retr::calibrate_temperature(val_scores, val_labels);
  std::vector<double> probs;
  std::vector<int> labels;
  std::vector<double> valid;
  for (std::size_t t = 0; t < test_scores.size(); ++t) {
    for (Eigen::Index i = 0; i < test_scores[t].size(); ++i) {
      probs.push_back(sigmoid(e.temperature * test_scores[t][i]));
      labels.push_back(test_labels[t][static_cast<std::size_t>(i)]);
    }
    const auto& y = test_labels[t];
    const bool both = std::find(y.begin(), y.end(), 0) != y.end() && std::find(y.begin(), y.end(), 1) != y.end();
    const double a = both ? stats::auc(to_std(test_scores[t]), y) : std::nan("");
    e.task_auc.push_back(a);
    if (both) valid.push_back(a);
  }
  e.metrics = compute_metrics(probs, labels);
  if (valid.empty()) throw ValidationError("evaluate_scores: no test task has both classes");
  e.metrics.mean_task_auc = stats::mean(valid);
  e.bins = calibration_bins(probs, labels);
  return e;
}

namespace {

std::vector<Vec> scores_of(const std::vector<retr::TaskOutcome>& out) {
  std::vector<Vec> s;
  for (const auto& o : out) s.push_back(o.scores);
  return s;
}

std::vector<std::vector<int>> labels_of(const std::vector<retr::RetrievalExample>& xs) {
  std::vector<std::vector<int>> y;
  for (const auto& x : xs) y.push_back(x.query_y);
  return y;
}

double approx_retrieval_bytes(const Mat& m, const retr::RetrievalNet& net, const retr::TrainConfig& c) {
  const double K = static_cast<double>(m.rows()), d = static_cast<double>(m.cols());
  return 8.0 * (K * d + static_cast<double>(net.params.size()) + K * (c.prox.iteration_cap() + 4) + 2 * d);
}

retr::TrainConfig effective_train(const RunConfig& cfg, int K, int r, std::uint64_t seed) {
  retr::TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, tc.seed);
  if (cfg.ablation.no_top_r) tc.apply_top_r = false;
  if (cfg.ablation.gamma_zero) tc.prox.gamma = 0.0;
  if (cfg.ablation.mlp_front) tc.front.kind = retr::FrontKind::ResidualMlp;
  tc.top_r = std::min(tc.top_r > 0 ? tc.top_r : r, K);
  return tc;
}

}  // namespace

Phase2Result run_phase2(const RunConfig& cfg, const Corpus& corpus, const Phase1Result& p1, int n_support,
                        RunLog& log) {
  const auto t0 = Clock::now();
  if (!p1.memory.frozen()) throw ValidationError("phase 2 needs the frozen phase-1 memory");
  const auto it = p1.standardizers.find(n_support);
  if (it == p1.standardizers.end())
    throw ValidationError("phase 1 has no standardizer for support size " + std::to_string(n_support));
  const FeatureMap& fm = corpus.world.feature_map;
  const std::string sd = std::to_string(corpus.gen.seed);
  desc::DescriptorConfig dc = cfg.descriptor;
  dc.seed = derive_seed(corpus.gen.seed, 0xde5c);
  const desc::DescriptorBuilder builder(p1.probe, fm, p1.memory.projector().q, dc);

  const auto train = make_examples(corpus.in(synth::Partition::RetTrain), n_support, builder, it->second, fm, cfg.ridge_alpha);
  const auto val = make_examples(corpus.in(synth::Partition::RetVal), n_support, builder, it->second, fm, cfg.ridge_alpha);
  const auto test = make_examples(corpus.in(synth::Partition::RetTest), n_support, builder, it->second, fm, cfg.ridge_alpha);
  const Mat& m = p1.memory.M();

  Phase2Result r;
  r.n_support = n_support;
  r.train = effective_train(cfg, p1.memory.K(), p1.r, corpus.gen.seed);

  if (cfg.grid_search) {
    // Validation search. Full-length cells are kept as trained; capped cells
    // only pick the configuration, which is then retrained.
    const int K = p1.memory.K();
    std::vector<int> tops{r.train.top_r};
    if (r.train.apply_top_r)
      for (int t : cfg.r_grid) tops.push_back(std::min(t, K));
    std::sort(tops.begin(), tops.end());
    tops.erase(std::unique(tops.begin(), tops.end()), tops.end());
    const std::vector<double> lambdas = cfg.search_lambda ? cfg.lambda_grid : std::vector<double>{r.train.prox.lambda};
    const std::vector<double> gammas = cfg.ablation.gamma_zero ? std::vector<double>{0.0} : cfg.gamma_grid;
    double best = -1.0;
    retr::TrainConfig best_cfg = r.train;
    for (double lam : lambdas) {
      for (double gam : gammas) {
        for (int top : tops) {
          retr::TrainConfig c = r.train;
          c.prox.lambda = lam;
          c.prox.gamma = gam;
          c.top_r = top;
          if (cfg.search_epochs > 0) c.max_epochs = cfg.search_epochs;
          auto tr = retr::train_retrieval(train, val, p1.memory, c);
          r.sweep.push_back({lam, gam, top, tr.best_val_auc});
          if (tr.best_val_auc > best) {
            best = tr.best_val_auc;
            best_cfg = c;
            if (cfg.search_epochs <= 0) r.trained = std::move(tr);
          }
        }
      }
    }
    best_cfg.max_epochs = r.train.max_epochs;
    r.train = best_cfg;
    log.event("phase2", "grid_search",
              {{"seed", sd}, {"n_support", std::to_string(n_support)}, {"cells", std::to_string(r.sweep.size())},
               {"lambda", io::num(r.train.prox.lambda)}, {"gamma", io::num(r.train.prox.gamma)},
               {"top_r", std::to_string(r.train.top_r)}, {"val_auc", io::num(best, 6)}});
  }
  if (!cfg.grid_search || cfg.search_epochs > 0) r.trained = retr::train_retrieval(train, val, p1.memory, r.train);
  for (const auto& e : r.trained.log) {
    if (e.epoch % cfg.log_period != 0) continue;
    log.event("phase2", "epoch",
              {{"seed", sd}, {"n_support", std::to_string(n_support)}, {"epoch", std::to_string(e.epoch)},
               {"objective", io::num(e.train_objective, 6)}, {"val_auc", io::num(e.val_auc, 6)},
               {"l0_pre", io::num(e.mean_l0_pre, 4)}, {"l0_post", io::num(e.mean_l0_post, 4)},
               {"jaccard", io::num(e.jaccard, 4)}, {"kappa", io::num(p1.memory.lifted_diag().kappa, 6)},
               {"mu", io::num(p1.memory.diag().mu, 6)}, {"eps_upper", io::num(p1.memory.eps_upper(), 6)}});
  }

  const auto val_out = retr::evaluate_examples(r.trained.net, m, val, r.train);
  const auto test_out = retr::evaluate_examples(r.trained.net, m, test, r.train);
  r.eval = evaluate_scores("retrieval", n_support, scores_of(val_out), labels_of(val), scores_of(test_out), labels_of(test));
  r.eval.metrics.mem_bytes_est = approx_retrieval_bytes(m, r.trained.net, r.train);
  for (std::size_t i = 0; i < test.size(); ++i) {
    r.test_solutions.push_back(test_out[i].solution);
    r.test_ids.push_back(test[i].id);
  }

  // Latency: solve + compose only, serial, descriptors and logits precomputed.
  retr::ProximalConfig pc = r.train.prox;
  if (!(pc.step_size > 0.0)) pc.step_size = retr::auto_step(m, pc);
  std::vector<Vec> logits;
  for (const auto& ex : test) logits.push_back(r.trained.net.logits(ex.z));
  const auto tl = Clock::now();
  double sink = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto sol = retr::retrieve(test[i].theta_hat, m, logits[i], pc, r.train.apply_top_r ? r.train.top_r : 0);
    sink += retr::compose_adapter(m, sol.w_tilde).sum();
  }
  r.eval.latency_ms = ms_since(tl) / static_cast<double>(test.size()) + 0.0 * sink;

  std::vector<double> oracle;
  for (const auto* t : corpus.in(synth::Partition::RetTest)) {
    const Vec th = adapters::ridge_adapter_full(*t, fm, cfg.ridge_alpha);
    const auto& y = t->query.y;
    if (std::find(y.begin(), y.end(), 0) == y.end() || std::find(y.begin(), y.end(), 1) == y.end()) continue;
    oracle.push_back(stats::auc(to_std(fm.apply_rows(t->query.x) * th), y));
  }
  r.oracle_ridge_auc = stats::mean(oracle);
  log.event("phase2", "done",
            {{"seed", sd}, {"n_support", std::to_string(n_support)}, {"epochs", std::to_string(r.trained.log.size())},
             {"best_epoch", std::to_string(r.trained.best_epoch)}, {"early_stopped", r.trained.early_stopped ? "1" : "0"},
             {"test_auc", io::num(r.eval.metrics.mean_task_auc, 6)}, {"oracle_auc", io::num(r.oracle_ridge_auc, 6)},
             {"ms", io::num(ms_since(t0), 4)}});
  return r;
}

namespace {

void metrics_header(io::CsvWriter& w) {
  w.header({"method", "n_support", "temperature", "n", "tp", "fp", "tn", "fn", "accuracy", "sensitivity",
            "specificity", "f1", "auc_pooled", "auc_mean_task", "ece", "health_mean", "health_median",
            "high_risk_fraction", "mem_bytes_est_approx"});
}

void metrics_row(io::CsvWriter& w, const MethodEval& e) {
  const auto& m = e.metrics;
  w.row({e.method, std::to_string(e.n_support), io::num(e.temperature), std::to_string(m.n), std::to_string(m.tp),
         std::to_string(m.fp), std::to_string(m.tn), std::to_string(m.fn), io::num(m.accuracy), io::num(m.sensitivity),
         io::num(m.specificity), io::num(m.f1), io::num(m.auc), io::num(m.mean_task_auc), io::num(m.ece),
         io::num(m.health_mean), io::num(m.health_median), io::num(m.high_risk_fraction), io::num(m.mem_bytes_est)});
}

void write_bins(const std::string& path, const MethodEval& e) {
  io::CsvWriter w(path);
  w.header({"method", "bin_lo", "bin_hi", "count", "mean_confidence", "frequency"});
  for (const auto& b : e.bins)
    w.row({e.method, io::num(b.lo), io::num(b.hi), std::to_string(b.count), io::num(b.mean_conf), io::num(b.freq)});
}

}  // namespace

void write_phase2(const std::string& dir, const Phase2Result& r) {
  io::ensure_dir(dir);
  {
    io::CsvWriter w(io::join_path(dir, "training_log.csv"));
    w.header({"epoch", "train_objective", "val_auc", "mean_l0_pre", "mean_l0_post", "jaccard"});
    for (const auto& e : r.trained.log)
      w.row({std::to_string(e.epoch), io::num(e.train_objective), io::num(e.val_auc), io::num(e.mean_l0_pre),
             io::num(e.mean_l0_post), io::num(e.jaccard)});
  }
  {
    io::CsvWriter w(io::join_path(dir, "metrics.csv"));
    metrics_header(w);
    metrics_row(w, r.eval);
  }
  write_bins(io::join_path(dir, "calibration_bins.csv"), r.eval);
  {
    io::CsvWriter w(io::join_path(dir, "task_auc.csv"));
    w.header({"task_id", "auc"});
    for (std::size_t i = 0; i < r.test_ids.size(); ++i) w.row({r.test_ids[i], io::num(r.eval.task_auc[i])});
  }
  retr::write_trace_csv(io::join_path(dir, "solver_trace.csv"), r.test_ids, r.test_solutions);
  if (!r.sweep.empty()) {
    io::CsvWriter w(io::join_path(dir, "tuning.csv"));
    w.header({"lambda", "gamma", "top_r", "val_auc"});
    for (const auto& c : r.sweep) w.row({io::num(c.lambda), io::num(c.gamma), std::to_string(c.top_r), io::num(c.val_auc)});
  }
  nlohmann::json j = r.trained.net.to_json();
  j["train_config"] = r.train;
  j["best_epoch"] = r.trained.best_epoch;
  io::write_text(io::join_path(dir, "net.json"), j.dump() + "\n");
}

// Baselines --------------------------------------------------------------------------------

std::vector<MethodEval> run_baselines(const RunConfig& cfg, const Corpus& corpus, int n_support, RunLog& log) {
  const FeatureMap& fm = corpus.world.feature_map;
  using Scorer = std::function<Vec(const synth::EpisodeTask&)>;
  const std::vector<std::pair<std::string, Scorer>> methods{
      {"ridge_finetune",
       [&](const synth::EpisodeTask& t) {
         return Vec(fm.apply_rows(t.query.x) * adapters::ridge_adapter(t, fm, cfg.ridge_alpha));
       }},
      {"nearest_centroid",
       [&](const synth::EpisodeTask& t) {
         const Mat f = fm.apply_rows(t.support.x);
         Vec c0 = Vec::Zero(f.cols()), c1 = Vec::Zero(f.cols());
         int n0 = 0, n1 = 0;
         for (std::size_t i = 0; i < t.support.size(); ++i) {
           if (t.support.y[i] == 1) {
             c1 += f.row(static_cast<Eigen::Index>(i)).transpose();
             ++n1;
           } else {
             c0 += f.row(static_cast<Eigen::Index>(i)).transpose();
             ++n0;
           }
         }
         c0 /= n0;
         c1 /= n1;
         const Mat q = fm.apply_rows(t.query.x);
         return Vec(2.0 * q * (c1 - c0) + Vec::Constant(q.rows(), c0.squaredNorm() - c1.squaredNorm()));
       }},
      {"oracle_ridge_full",
       [&](const synth::EpisodeTask& t) {
         return Vec(fm.apply_rows(t.query.x) * adapters::ridge_adapter_full(t, fm, cfg.ridge_alpha));
       }},
  };

  auto run_split = [&](synth::Partition p, const Scorer& f, std::vector<Vec>& scores, std::vector<std::vector<int>>& y,
                       double* ms) {
    const auto tasks = corpus.in(p);
    std::vector<synth::EpisodeTask> trunc;
    for (const auto* t : tasks) trunc.push_back(synth::truncate_support(*t, n_support));
    // The oracle sees the full support and the query by construction.
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < trunc.size(); ++i) scores.push_back(f(trunc[i]));
    if (ms) *ms = ms_since(t0) / static_cast<double>(trunc.size());
    for (const auto& t : trunc) y.push_back(t.query.y);
  };

  std::vector<MethodEval> out;
  for (const auto& [name, f] : methods) {
    std::vector<Vec> vs, ts;
    std::vector<std::vector<int>> vy, ty;
    double ms = 0.0;
    run_split(synth::Partition::RetVal, f, vs, vy, nullptr);
    run_split(synth::Partition::RetTest, f, ts, ty, &ms);
    auto e = evaluate_scores(name, n_support, vs, vy, ts, ty);
    e.latency_ms = ms;
    e.metrics.mem_bytes_est = 8.0 * (static_cast<double>(fm.output_dim()) * (n_support + 2));
    log.event("baselines", "method", {{"seed", std::to_string(corpus.gen.seed)}, {"method", name},
                                      {"n_support", std::to_string(n_support)},
                                      {"test_auc", io::num(e.metrics.mean_task_auc, 6)}});
    out.push_back(std::move(e));
  }
  return out;
}

void write_methods_csv(const std::string& path, const std::vector<MethodEval>& evals) {
  io::CsvWriter w(path);
  metrics_header(w);
  for (const auto& e : evals) metrics_row(w, e);
}

// Seeds and ablations ------------------------------------------------------------------------

SeedRun run_seed(const RunConfig& cfg, std::uint64_t seed, RunLog& log, bool with_sweep, bool with_risk) {
  SeedRun s;
  s.seed = seed;
  const Corpus corpus = build_corpus(cfg, seed);
  s.phase1 = run_phase1(cfg, corpus, seed, log);
  std::vector<int> sizes = with_sweep ? cfg.support_sizes : std::vector<int>{cfg.eval_support};
  if (std::find(sizes.begin(), sizes.end(), cfg.eval_support) == sizes.end()) sizes.push_back(cfg.eval_support);
  for (int n : sizes) s.sweep.push_back(run_phase2(cfg, corpus, s.phase1, n, log));
  s.baselines = run_baselines(cfg, corpus, cfg.eval_support, log);
  if (with_risk) {
    risk::BoundConfig bc;
    bc.r_sparse = cfg.r_sparse;
    bc.mode = cfg.r_sparse <= 2 ? proto::L0Mode::Exact : proto::L0Mode::Omp;
    const auto test = corpus.in(synth::Partition::RetTest);
    s.bounds = risk::check_bounds(test, s.phase1.memory, corpus.world.feature_map, bc);
    const auto summary = risk::summarize(s.bounds);
    log.event("riskbound", "summary", {{"seed", std::to_string(seed)}, {"line", "\"" + risk::summary_line(summary) + "\""}});
    const std::vector<const synth::EpisodeTask*> sub(test.begin(), test.begin() + std::min<std::size_t>(20, test.size()));
    s.gaps = risk::gap_scaling(corpus.world, sub, s.phase1.memory, bc, {50, 100, 200, 400}, 20000, 30,
                               derive_seed(seed, 0x6a9));
  }
  return s;
}

std::vector<SeedSummaryRow> seed_stability(const std::vector<SeedRun>& runs, int n_support) {
  std::vector<double> auc, f1, ece;
  for (const auto& r : runs) {
    const auto it = std::find_if(r.sweep.begin(), r.sweep.end(), [&](const Phase2Result& p) { return p.n_support == n_support; });
    if (it == r.sweep.end()) throw ValidationError("seed_stability: run without the requested support size");
    auc.push_back(it->eval.metrics.mean_task_auc);
    f1.push_back(it->eval.metrics.f1);
    ece.push_back(it->eval.metrics.ece);
  }
  auto row = [](const std::string& name, const std::vector<double>& v) {
    SeedSummaryRow s;
    s.metric = name;
    s.mean = stats::mean(v);
    s.std = v.size() > 1 ? stats::stddev_sample(v) : 0.0;
    s.min = *std::min_element(v.begin(), v.end());
    s.max = *std::max_element(v.begin(), v.end());
    s.range = s.max - s.min;
    return s;
  };
  return {row("auc", auc), row("f1", f1), row("ece", ece)};
}

// Motif stage ----------------------------------------------------------------------------------

namespace {

// Sequences from a random first-order chain with skewed symbol usage, so the
// fitted background has real local correlations.
std::vector<std::string> background_corpus(const MotifStageConfig& mc, Rng& rng) {
  const std::string_view alpha = motif::kAminoAcids;
  const std::size_t A = alpha.size();
  Mat trans(static_cast<Eigen::Index>(A + 1), static_cast<Eigen::Index>(A));
  for (Eigen::Index i = 0; i < trans.rows(); ++i) {
    for (Eigen::Index j = 0; j < trans.cols(); ++j) trans(i, j) = std::exp(0.8 * standard_normal(rng));
    trans.row(i) /= trans.row(i).sum();
  }
  std::vector<std::string> out;
  for (int s = 0; s < mc.n_train_sequences; ++s) {
    const int len = mc.min_len + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(mc.max_len - mc.min_len + 1)));
    std::string seq;
    Eigen::Index prev = static_cast<Eigen::Index>(A);
    for (int i = 0; i < len; ++i) {
      double u = uniform01(rng);
      Eigen::Index a = 0;
      for (; a + 1 < static_cast<Eigen::Index>(A); ++a) {
        if (u < trans(prev, a)) break;
        u -= trans(prev, a);
      }
      seq.push_back(alpha[static_cast<std::size_t>(a)]);
      prev = a;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

Vec activation_of(const std::vector<motif::Repertoire>& reps, const std::string& m, std::vector<int>& labels) {
  Vec a(static_cast<Eigen::Index>(reps.size()));
  labels.clear();
  for (std::size_t r = 0; r < reps.size(); ++r) {
    a[static_cast<Eigen::Index>(r)] = motif::repertoire_activation(reps[r], m);
    labels.push_back(reps[r].label);
  }
  return a;
}

}  // namespace

MotifStageResult run_motif_stage(const RunConfig& cfg, std::uint64_t seed, RunLog& log) {
  const auto& mc = cfg.motifs;
  if (mc.n_enriched < 1 || mc.n_enriched > mc.n_motifs) throw ValidationError("motif stage: need 1 <= n_enriched <= n_motifs");
  MotifStageResult r;
  Rng rng = make_rng(seed, 0x30717);
  r.background = motif::fit_background(background_corpus(mc, rng), std::string(motif::kAminoAcids),
                                       mc.background_order, mc.pseudocount);
  r.motifs = motif::random_motifs(static_cast<std::size_t>(mc.n_motifs), mc.motif_len, motif::kAminoAcids, rng);
  std::vector<int> idx(static_cast<std::size_t>(mc.n_motifs));
  std::iota(idx.begin(), idx.end(), 0);
  shuffle(idx, rng);
  r.enriched.assign(idx.begin(), idx.begin() + mc.n_enriched);
  std::sort(r.enriched.begin(), r.enriched.end());
  std::vector<std::string> planted;
  for (int c : r.enriched) planted.push_back(r.motifs[static_cast<std::size_t>(c)]);

  const auto reps = motif::simulate_cohort(r.background, mc.cohort, planted, mc.effect, rng);
  std::vector<int> labels;
  for (const auto& rep : reps) labels.push_back(rep.label);
  const Mat act = motif::activation_matrix(reps, r.motifs);
  motif::PermutationConfig pc = mc.perm;
  pc.seed = derive_seed(seed, 0x9e24);
  r.report = motif::two_stage_test(act, labels, mc.top_frac, pc, mc.n_boot_storey);
  const double m_tested = static_cast<double>(r.report.screened.size());
  for (std::size_t i = 0; i < r.report.screened.size(); ++i) {
    const bool hit = cfg.ablation.bonferroni_only ? r.report.p_values[i] * m_tested <= mc.q_threshold
                                                  : r.report.q_values[i] <= mc.q_threshold;
    if (hit) r.discoveries.push_back(r.report.screened[i]);
  }
  std::size_t false_hits = 0, true_hits = 0;
  for (int c : r.discoveries)
    (std::binary_search(r.enriched.begin(), r.enriched.end(), c) ? true_hits : false_hits) += 1;
  r.fdp = r.discoveries.empty() ? 0.0 : static_cast<double>(false_hits) / static_cast<double>(r.discoveries.size());
  r.power = static_cast<double>(true_hits) / static_cast<double>(r.enriched.size());
  log.event("motifs", "two_stage",
            {{"seed", std::to_string(seed)}, {"screened", std::to_string(r.report.screened.size())},
             {"discoveries", std::to_string(r.discoveries.size())}, {"fdp", io::num(r.fdp, 4)},
             {"power", io::num(r.power, 4)}, {"pi0", io::num(r.report.pi0, 4)},
             {"pi0_ci90", io::num(r.report.pi0_ci.lo, 4) + ":" + io::num(r.report.pi0_ci.hi, 4)},
             {"rule", cfg.ablation.bonferroni_only ? "bonferroni" : "storey_q"}});

  static const char* kCohortNames[] = {"cohort-1", "cohort-2", "cohort-3", "cohort-4", "cohort-5",
                                       "cohort-6", "cohort-7", "cohort-8", "cohort-9", "cohort-10"};
  motif::CohortConfig tc = mc.cohort;
  tc.n_repertoires = mc.tau_repertoires;
  for (int k = 0; k < mc.tau_cohorts; ++k) {
    Rng crng = make_rng(seed, 0x7a0000 + static_cast<std::uint64_t>(k));
    const std::string& motif_k = planted[static_cast<std::size_t>(k) % planted.size()];
    const auto creps = motif::simulate_cohort(r.background, tc, {motif_k}, mc.effect, crng);
    std::vector<int> y;
    const Vec a = activation_of(creps, motif_k, y);
    motif::TauConfig tcfg = mc.tau;
    tcfg.seed = derive_seed(seed, 0x7a5 + static_cast<std::uint64_t>(k));
    tcfg.throw_on_failure = false;
    if (cfg.ablation.fixed_tau) {
      tcfg.grid_lo = tcfg.grid_hi = 0.5;
      tcfg.grid_points = 1;
      tcfg.max_rounds = 1;
    }
    const std::string name = k < 10 ? kCohortNames[k] : "cohort-" + std::to_string(k + 1);
    r.tau.push_back(motif::calibrate_tau(a, y, tcfg, name));
    const auto& t = r.tau.back();
    log.event("motifs", "tau", {{"seed", std::to_string(seed)}, {"cohort", name}, {"tau_bar", io::num(t.tau_bar, 4)},
                                {"t", io::num(t.t_stat, 4)}, {"p", io::num(t.p_value, 4)},
                                {"delta_auc", io::num(t.delta_auc, 4)}, {"pass", t.pass ? "1" : "0"},
                                {"rounds", std::to_string(t.rounds)}});
  }

  if (mc.power_reps > 0 && !mc.power_effects.empty()) {
    motif::PermutationConfig pp = mc.perm;
    r.power_curve = motif::power_curve(r.background, mc.cohort, planted.front(), mc.power_effects, 0.05, mc.power_reps,
                                       pp, derive_seed(seed, 0x90e4));
  }
  return r;
}

void write_motif_stage(const std::string& dir, const MotifStageResult& r) {
  io::ensure_dir(dir);
  motif::write_motif_report_csv(io::join_path(dir, "motif_tests.csv"), r.report, r.motifs);
  motif::write_tau_csv(io::join_path(dir, "tau_calibration.csv"), r.tau);
  if (!r.power_curve.empty()) motif::write_power_csv(io::join_path(dir, "power_curve.csv"), r.power_curve);
  io::CsvWriter w(io::join_path(dir, "discoveries.csv"));
  w.header({"channel", "motif", "planted"});
  for (int c : r.discoveries)
    w.row({std::to_string(c), r.motifs[static_cast<std::size_t>(c)],
           std::binary_search(r.enriched.begin(), r.enriched.end(), c) ? "1" : "0"});
}

NullCalibration motif_null_calibration(std::size_t m, const MotifStageConfig& mc, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x2011);
  const auto bg = motif::fit_background(background_corpus(mc, rng), std::string(motif::kAminoAcids),
                                        mc.background_order, mc.pseudocount);
  const auto motifs = motif::random_motifs(m, mc.motif_len, motif::kAminoAcids, rng);
  const auto reps = motif::simulate_cohort(bg, mc.cohort, {}, 0.0, rng);
  std::vector<int> labels;
  for (const auto& r : reps) labels.push_back(r.label);
  motif::PermutationConfig pc = mc.perm;
  pc.seed = derive_seed(seed, 0x2012);
  const auto rep = motif::two_stage_test(motif::activation_matrix(reps, motifs), labels, 1.0, pc, mc.n_boot_storey);
  NullCalibration n;
  n.m = m;
  n.q_threshold = mc.q_threshold;
  n.fpr_at_q = static_cast<double>(std::count_if(rep.q_values.begin(), rep.q_values.end(),
                                                 [&](double q) { return q <= mc.q_threshold; })) /
               static_cast<double>(m);
  n.pi0 = rep.pi0;
  n.pi0_ci = rep.pi0_ci;
  return n;
}

// Ablations ---------------------------------------------------------------------------------------

std::vector<AblationRow> run_ablations(const RunConfig& cfg, const std::string& codes, std::uint64_t seed, RunLog& log) {
  std::string order = codes;
  if (order.find('A') == std::string::npos) order.insert(order.begin(), 'A');
  std::vector<AblationRow> rows;
  const AblationRow* ref = nullptr;
  for (char code : order) {
    RunConfig c = cfg;
    c.ablation = ablation_for(code);
    c.motifs.power_reps = 0;
    const Corpus corpus = build_corpus(c, seed);
    const auto p1 = run_phase1(c, corpus, seed, log);
    auto p2 = run_phase2(c, corpus, p1, c.eval_support, log);
    const auto ms = run_motif_stage(c, seed, log);
    AblationRow row;
    row.code = code;
    row.variant = ablation_description(code);
    row.eval = std::move(p2.eval);
    row.r = p1.r;
    row.K = p1.memory.K();
    row.motif_discoveries = ms.discoveries.size();
    row.motif_fdp = ms.fdp;
    double tau_auc = 0.0;
    for (const auto& t : ms.tau) tau_auc += t.test_auc;
    row.tau_test_auc = ms.tau.empty() ? 0.0 : tau_auc / static_cast<double>(ms.tau.size());
    rows.push_back(std::move(row));
    if (code == 'A') ref = nullptr;
  }
  for (const auto& r : rows)
    if (r.code == 'A') ref = &r;
  for (auto& r : rows) {
    if (&r == ref) continue;
    std::vector<double> diffs;
    for (std::size_t i = 0; i < r.eval.task_auc.size(); ++i) {
      const double a = ref->eval.task_auc[i], b = r.eval.task_auc[i];
      if (std::isfinite(a) && std::isfinite(b)) diffs.push_back(a - b);
    }
    r.auc_drop = (ref->eval.metrics.mean_task_auc - r.eval.metrics.mean_task_auc) / ref->eval.metrics.mean_task_auc;
    r.p_value = spectral::paired_bootstrap_p(diffs, 1000, derive_seed(seed, static_cast<std::uint64_t>(r.code)), 1e-12);
    log.event("ablate", "variant", {{"code", std::string(1, r.code)}, {"auc", io::num(r.eval.metrics.mean_task_auc, 6)},
                                    {"drop", io::num(r.auc_drop, 4)}, {"p", io::num(r.p_value, 4)}});
  }
  return rows;
}

// Replays ----------------------------------------------------------------------------------------

spectral::DimTestReport dim_test_replay() {
  // p_raw for r = 22 is reported as "< 0.001"; 0.0008 reproduces its p_adj of 0.004.
  return spectral::replay_reported({{18, 0.942, 0.366, false},
                                    {19, 0.949, 0.089, false},
                                    {20, 0.951, 0.006, true},
                                    {21, 0.955, 0.002, true},
                                    {22, 0.957, 0.0008, true}},
                                   0.01);
}

std::vector<TauReplayRow> tau_replay() {
  const std::vector<std::tuple<std::string, double, double>> rows{
      {"Lung", 0.483, 0.018}, {"THCA", 0.477, 0.021}, {"GBM", 0.492, 0.016}, {"ESCA", 0.501, 0.019}, {"PACA", 0.488, 0.020}};
  std::vector<TauReplayRow> out;
  for (const auto& [name, tau, se] : rows) {
    const auto tt = motif::tau_t_test(tau, se);
    out.push_back({name, tau, se, tt.t, tt.p});
  }
  return out;
}

// Commands ----------------------------------------------------------------------------------------

void cmd_generate(const RunConfig& cfg, RunLog& log) {
  for (auto seed : cfg.seeds) {
    const Corpus c = build_corpus(cfg, seed);
    const std::string dir = io::join_path(seed_dir(cfg, seed), "corpus");
    io::ensure_dir(dir);
    synth::write_corpus_csv(io::join_path(dir, "corpus.csv"), c.tasks);
    io::write_text(io::join_path(dir, "manifest.json"), synth::corpus_manifest(c.gen, c.tasks, c.assignment).dump(1) + "\n");
    log.event("generate", "corpus", {{"seed", std::to_string(seed)}, {"tasks", std::to_string(c.tasks.size())}});
  }
}

std::vector<Phase1Result> cmd_phase1(const RunConfig& cfg, RunLog& log) {
  std::vector<Phase1Result> out;
  for (auto seed : cfg.seeds) {
    const Corpus c = build_corpus(cfg, seed);
    out.push_back(run_phase1(cfg, c, seed, log));
    write_phase1(io::join_path(seed_dir(cfg, seed), "phase1"), out.back());
  }
  return out;
}

void emit_report(const ReportBundle& b, RunLog& log) {
  const RunConfig& cfg = b.cfg;
  io::ensure_dir(cfg.out_dir);
  nlohmann::json cj = cfg;
  cj["config_hash"] = cfg.hash();
  io::write_text(io::join_path(cfg.out_dir, "config.json"), cj.dump(1) + "\n");
  spectral::write_dim_test_csv(io::join_path(cfg.out_dir, "dim_test_replay.csv"), dim_test_replay());
  {
    io::CsvWriter w(io::join_path(cfg.out_dir, "tau_replay.csv"));
    w.header({"cohort", "tau_bar", "se", "t", "p_two_sided"});
    for (const auto& r : tau_replay())
      w.row({r.cohort, io::num(r.tau_bar), io::num(r.se), io::num(r.t), io::num(r.p)});
  }

  std::ostringstream summary;
  summary << "config_hash " << cfg.hash() << "\n";
  nlohmann::json timing = nlohmann::json::object();

  for (const auto& s : b.seeds) {
    const std::string dir = seed_dir(cfg, s.seed);
    write_phase1(io::join_path(dir, "phase1"), s.phase1);
    summary << "seed " << s.seed << ": r=" << s.phase1.r << " (pca " << s.phase1.r_center << ") K=" << s.phase1.memory.K()
            << " eps_hat=" << io::num(s.phase1.memory.eps_hat(), 4) << "\n";
    nlohmann::json& tj = timing["seed_" + std::to_string(s.seed)];
    for (const auto& p2 : s.sweep) {
      write_phase2(io::join_path(dir, "phase2_n" + std::to_string(p2.n_support)), p2);
      tj["retrieval_latency_ms_n" + std::to_string(p2.n_support)] = p2.eval.latency_ms;
      summary << "  n=" << p2.n_support << " auc=" << io::num(p2.eval.metrics.mean_task_auc, 4)
              << " f1=" << io::num(p2.eval.metrics.f1, 4) << " ece=" << io::num(p2.eval.metrics.ece, 4)
              << " oracle_ridge_auc=" << io::num(p2.oracle_ridge_auc, 4) << "\n";
    }
    if (s.sweep.size() > 0) {
      io::CsvWriter w(io::join_path(dir, "support_sweep.csv"));
      w.header({"support_size", "auc", "f1", "ece", "auc_pooled", "oracle_ridge_auc"});
      for (const auto& p2 : s.sweep)
        w.row({std::to_string(p2.n_support), io::num(p2.eval.metrics.mean_task_auc), io::num(p2.eval.metrics.f1),
               io::num(p2.eval.metrics.ece), io::num(p2.eval.metrics.auc), io::num(p2.oracle_ridge_auc)});
    }
    if (!s.baselines.empty()) {
      write_methods_csv(io::join_path(dir, "baselines.csv"), s.baselines);
      for (const auto& e : s.baselines) {
        tj["baseline_ms_per_task_" + e.method] = e.latency_ms;
        summary << "  baseline " << e.method << " auc=" << io::num(e.metrics.mean_task_auc, 4) << "\n";
      }
    }
    if (!s.bounds.empty()) {
      io::ensure_dir(io::join_path(dir, "riskbound"));
      risk::write_bound_csv(io::join_path(dir, "riskbound/bounds.csv"), s.bounds);
      summary << "  " << risk::summary_line(risk::summarize(s.bounds)) << "\n";
    }
    if (s.gaps) {
      io::ensure_dir(io::join_path(dir, "riskbound"));
      risk::write_gap_csv(io::join_path(dir, "riskbound/gap_scaling.csv"), *s.gaps);
      summary << "  gap scaling slope=" << io::num(s.gaps->loglog_slope, 4)
              << " within_2x=" << (s.gaps->within_2x ? "yes" : "no") << " (capacity term un-normalized, C=1)\n";
    }
  }

  const bool all_have_eval = !b.seeds.empty() && std::all_of(b.seeds.begin(), b.seeds.end(), [&](const SeedRun& s) {
    return std::any_of(s.sweep.begin(), s.sweep.end(), [&](const Phase2Result& p) { return p.n_support == cfg.eval_support; });
  });
  if (all_have_eval) {
    const auto rows = seed_stability(b.seeds, cfg.eval_support);
    io::CsvWriter w(io::join_path(cfg.out_dir, "seed_stability.csv"));
    w.header({"metric", "mean", "std", "min", "max", "range"});
    for (const auto& r : rows) {
      w.row({r.metric, io::num(r.mean), io::num(r.std), io::num(r.min), io::num(r.max), io::num(r.range)});
      summary << "seed stability " << r.metric << " mean=" << io::num(r.mean, 4) << " std=" << io::num(r.std, 4) << "\n";
    }
    io::CsvWriter box(io::join_path(cfg.out_dir, "seed_box.csv"));
    box.header({"seed", "auc", "f1", "ece"});
    for (const auto& s : b.seeds)
      for (const auto& p2 : s.sweep)
        if (p2.n_support == cfg.eval_support)
          box.row({std::to_string(s.seed), io::num(p2.eval.metrics.mean_task_auc), io::num(p2.eval.metrics.f1),
                   io::num(p2.eval.metrics.ece)});
  }

  if (!b.ablations.empty()) {
    io::CsvWriter w(io::join_path(cfg.out_dir, "ablation.csv"));
    w.header({"exp", "variant", "auc", "f1", "ece", "auc_drop", "p_paired_bootstrap", "r", "K", "motif_discoveries",
              "motif_fdp", "tau_test_auc"});
    for (const auto& r : b.ablations) {
      w.row({std::string(1, r.code), r.variant, io::num(r.eval.metrics.mean_task_auc), io::num(r.eval.metrics.f1),
             io::num(r.eval.metrics.ece), io::num(r.auc_drop), io::num(r.p_value), std::to_string(r.r),
             std::to_string(r.K), std::to_string(r.motif_discoveries), io::num(r.motif_fdp), io::num(r.tau_test_auc)});
      timing["ablation_latency_ms_" + std::string(1, r.code)] = r.eval.latency_ms;
    }
  }
  if (b.motifs) {
    write_motif_stage(io::join_path(cfg.out_dir, "motifs"), *b.motifs);
    summary << "motifs: discoveries=" << b.motifs->discoveries.size() << " fdp=" << io::num(b.motifs->fdp, 4)
            << " power=" << io::num(b.motifs->power, 4) << " pi0=" << io::num(b.motifs->report.pi0, 4) << "\n";
  }
  if (b.seeds.empty() && b.ablations.empty() && !b.motifs) summary << "no run artifacts; replays only\n";
  io::write_text(io::join_path(cfg.out_dir, "summary.txt"), summary.str());
  io::write_text(io::join_path(cfg.out_dir, "timing.json"), timing.dump(1) + "\n");
  log.event("report", "written", {{"dir", cfg.out_dir}, {"config_hash", cfg.hash()}});
}

}  // namespace protoadapt::pipe
