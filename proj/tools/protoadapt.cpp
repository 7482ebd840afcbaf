#include "protoadapt/io.hpp"
#include "protoadapt/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace protoadapt;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  int K = 0;
  int r_sparse = 0;
  int eval_support = 0;
  std::vector<int> support_sizes;
  std::size_t n_boot = 0;
  int max_epochs = 0;
  std::string front;
  bool grid_search = false;
  std::vector<std::string> sets;  // json-pointer=value overrides
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--out", f.out, "output directory");
  app->add_option("--seeds", f.seeds, "seed list");
  app->add_option("--K", f.K, "prototype count before merging");
  app->add_option("--r-sparse", f.r_sparse, "coverage sparsity");
  app->add_option("--eval-support", f.eval_support, "support size for the headline evaluation");
  app->add_option("--support-sizes", f.support_sizes, "support sizes for the few-shot sweep");
  app->add_option("--n-boot", f.n_boot, "bootstrap replicates");
  app->add_option("--max-epochs", f.max_epochs, "retrieval training epoch cap");
  app->add_option("--front", f.front, "descriptor front block: none, ode, mlp");
  app->add_flag("--grid-search", f.grid_search, "search lambda x gamma x top_r on validation");
  app->add_option("--set", f.sets, "override any config field, e.g. /train/lr=0.01 or /gen/noise_sigma=0.05");
}

pipe::RunConfig resolve(const Flags& f) {
  pipe::RunConfig c = f.config.empty() ? pipe::RunConfig{} : pipe::load_config(f.config);
  nlohmann::json j = c;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || s.empty() || s[0] != '/') throw ValidationError("--set expects /path=value, got " + s);
    const nlohmann::json::json_pointer ptr(s.substr(0, eq));
    const std::string raw = s.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    j[ptr] = v.is_discarded() ? nlohmann::json(raw) : v;
  }
  c = j.get<pipe::RunConfig>();
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.seeds.empty()) c.seeds = f.seeds;
  if (f.K > 0) c.K = f.K;
  if (f.r_sparse > 0) c.r_sparse = f.r_sparse;
  if (f.eval_support > 0) c.eval_support = f.eval_support;
  if (!f.support_sizes.empty()) c.support_sizes = f.support_sizes;
  if (f.n_boot > 0) c.n_boot = f.n_boot;
  if (f.max_epochs > 0) c.train.max_epochs = f.max_epochs;
  if (!f.front.empty()) c.train.front.kind = retr::parse_front(f.front);
  if (f.grid_search) c.grid_search = true;
  c.validate();
  return c;
}

pipe::RunLog open_log(const pipe::RunConfig& c) {
  io::ensure_dir(c.out_dir);
  return pipe::RunLog(io::join_path(c.out_dir, "run.log"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"protoadapt: prototype-conditioned fast-weight adaptation on synthetic episodic tasks"};
  app.require_subcommand(1);
  Flags f;
  std::string codes = "ABCDEFGH";
  bool sweep = false, null_cal = false, with_ablations = false;
  std::size_t null_m = 500;

  auto* gen = app.add_subcommand("generate", "generate and partition the synthetic corpus");
  auto* p1 = app.add_subcommand("phase1", "memory construction: adapters, rank tests, prototypes, certificate");
  auto* p2 = app.add_subcommand("phase2", "phase 1 then retrieval training and evaluation");
  auto* base = app.add_subcommand("baselines", "per-task ridge, nearest centroid, oracle ridge");
  auto* abl = app.add_subcommand("ablate", "ablation variants against the full system");
  auto* mot = app.add_subcommand("motifs", "two-stage motif testing and threshold calibration");
  auto* rb = app.add_subcommand("riskbound", "per-task risk-bound check and generalization-gap scaling");
  auto* rep = app.add_subcommand("report", "full run: every seed, support sweep, baselines, risk bound, motifs");
  for (auto* s : {gen, p1, p2, base, abl, mot, rb, rep}) add_common(s, f);
  p2->add_flag("--sweep", sweep, "train at every support size");
  abl->add_option("--codes", codes, "variant letters, A is always included");
  mot->add_flag("--null-calibration", null_cal, "also run the pure-null calibration");
  mot->add_option("--null-m", null_m, "channels in the null calibration");
  rep->add_flag("--ablations", with_ablations, "include the ablation table (first seed)");
  rep->add_option("--codes", codes, "ablation variant letters");

  CLI11_PARSE(app, argc, argv);

  try {
    const pipe::RunConfig cfg = resolve(f);
    pipe::RunLog log = open_log(cfg);
    log.event("cli", "start", {{"command", app.get_subcommands().front()->get_name()}, {"config_hash", cfg.hash()}});

    if (gen->parsed()) {
      pipe::cmd_generate(cfg, log);
    } else if (p1->parsed()) {
      pipe::ReportBundle b{cfg, {}, {}, std::nullopt};
      auto results = pipe::cmd_phase1(cfg, log);
      for (std::size_t i = 0; i < results.size(); ++i) {
        pipe::SeedRun s;
        s.seed = cfg.seeds[i];
        s.phase1 = std::move(results[i]);
        b.seeds.push_back(std::move(s));
      }
      pipe::emit_report(b, log);
    } else if (p2->parsed()) {
      pipe::ReportBundle b{cfg, {}, {}, std::nullopt};
      for (auto seed : cfg.seeds) b.seeds.push_back(pipe::run_seed(cfg, seed, log, sweep, false));
      pipe::emit_report(b, log);
    } else if (base->parsed()) {
      for (auto seed : cfg.seeds) {
        const auto corpus = pipe::build_corpus(cfg, seed);
        const auto evals = pipe::run_baselines(cfg, corpus, cfg.eval_support, log);
        const std::string dir = io::join_path(cfg.out_dir, "seed_" + std::to_string(seed));
        io::ensure_dir(dir);
        pipe::write_methods_csv(io::join_path(dir, "baselines.csv"), evals);
        for (const auto& e : evals)
          std::cout << "seed " << seed << " " << e.method << " auc=" << io::num(e.metrics.mean_task_auc, 4)
                    << " ms/task=" << io::num(e.latency_ms, 4) << "\n";
      }
    } else if (abl->parsed()) {
      pipe::ReportBundle b{cfg, {}, pipe::run_ablations(cfg, codes, cfg.seeds.front(), log), std::nullopt};
      pipe::emit_report(b, log);
    } else if (mot->parsed()) {
      pipe::ReportBundle b{cfg, {}, {}, pipe::run_motif_stage(cfg, cfg.seeds.front(), log)};
      pipe::emit_report(b, log);
      if (null_cal) {
        const auto n = pipe::motif_null_calibration(null_m, cfg.motifs, cfg.seeds.front());
        io::CsvWriter w(io::join_path(cfg.out_dir, "motifs/null_calibration.csv"));
        w.header({"m", "q_threshold", "fpr", "pi0", "pi0_ci_lo", "pi0_ci_hi"});
        w.row({std::to_string(n.m), io::num(n.q_threshold), io::num(n.fpr_at_q), io::num(n.pi0), io::num(n.pi0_ci.lo),
               io::num(n.pi0_ci.hi)});
        std::cout << "null calibration: fpr=" << io::num(n.fpr_at_q, 4) << " pi0=" << io::num(n.pi0, 4) << "\n";
      }
    } else if (rb->parsed()) {
      for (auto seed : cfg.seeds) {
        const auto corpus = pipe::build_corpus(cfg, seed);
        const auto p = pipe::run_phase1(cfg, corpus, seed, log);
        risk::BoundConfig bc;
        bc.r_sparse = cfg.r_sparse;
        bc.mode = cfg.r_sparse <= 2 ? proto::L0Mode::Exact : proto::L0Mode::Omp;
        const auto test = corpus.in(synth::Partition::RetTest);
        const auto bounds = risk::check_bounds(test, p.memory, corpus.world.feature_map, bc);
        const std::vector<const synth::EpisodeTask*> sub(test.begin(), test.begin() + std::min<std::size_t>(20, test.size()));
        const auto gaps = risk::gap_scaling(corpus.world, sub, p.memory, bc, {50, 100, 200, 400}, 20000, 30,
                                            derive_seed(seed, 0x6a9));
        const std::string dir = io::join_path(cfg.out_dir, "seed_" + std::to_string(seed) + "/riskbound");
        io::ensure_dir(dir);
        risk::write_bound_csv(io::join_path(dir, "bounds.csv"), bounds);
        risk::write_gap_csv(io::join_path(dir, "gap_scaling.csv"), gaps);
        std::cout << "seed " << seed << ": " << risk::summary_line(risk::summarize(bounds))
                  << " gap_slope=" << io::num(gaps.loglog_slope, 4) << "\n";
      }
    } else if (rep->parsed()) {
      pipe::ReportBundle b{cfg, {}, {}, std::nullopt};
      for (auto seed : cfg.seeds) b.seeds.push_back(pipe::run_seed(cfg, seed, log, true, true));
      if (with_ablations) b.ablations = pipe::run_ablations(cfg, codes, cfg.seeds.front(), log);
      b.motifs = pipe::run_motif_stage(cfg, cfg.seeds.front(), log);
      pipe::emit_report(b, log);
    }
    if (std::ifstream in(io::join_path(cfg.out_dir, "summary.txt")); in && !gen->parsed() && !base->parsed() && !rb->parsed())
      std::cout << in.rdbuf();
  } catch (const std::exception& e) {
    std::cerr << "protoadapt: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
