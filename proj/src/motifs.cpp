#include "protoadapt/motifs.hpp"

#include "protoadapt/io.hpp"
#include "protoadapt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace protoadapt::motif {

// Background -----------------------------------------------------------------

const std::vector<double>& MarkovBackground::conditional(int pos, std::string_view context) const {
  const auto it = table_.find({pos, std::string(context)});
  return it == table_.end() ? uniform_ : it->second;
}

double MarkovBackground::prob(int pos, std::string_view context, char symbol) const {
  const int i = index_[static_cast<unsigned char>(symbol)];
  if (i < 0) throw ValidationError(std::string("symbol outside alphabet: ") + symbol);
  return conditional(pos, context)[static_cast<std::size_t>(i)];
}

std::string MarkovBackground::sample(Rng& rng) const {
  const int len = lengths_[uniform_index(rng, lengths_.size())];
  std::string s;
  s.reserve(static_cast<std::size_t>(len));
  for (int pos = 0; pos < len; ++pos) {
    const std::size_t c = static_cast<std::size_t>(std::min(pos, order_));
    const auto& dist = conditional(pos, std::string_view(s).substr(s.size() - c));
    double u = uniform01(rng);
    std::size_t a = 0;
    for (; a + 1 < dist.size(); ++a) {
      if (u < dist[a]) break;
      u -= dist[a];
    }
    s.push_back(alphabet_[a]);
  }
  return s;
}

MarkovBackground fit_background(const std::vector<std::string>& sequences, std::string alphabet, int order,
                                double pseudocount) {
  if (sequences.empty()) throw ValidationError("fit_background: empty corpus");
  if (alphabet.empty()) throw ValidationError("fit_background: empty alphabet");
  if (order < 0 || !(pseudocount >= 0.0)) throw ValidationError("fit_background: order and pseudocount must be >= 0");
  MarkovBackground bg;
  bg.order_ = order;
  bg.alphabet_ = std::move(alphabet);
  bg.pseudocount_ = pseudocount;
  bg.index_.fill(-1);
  for (std::size_t i = 0; i < bg.alphabet_.size(); ++i) {
    auto& slot = bg.index_[static_cast<unsigned char>(bg.alphabet_[i])];
    if (slot >= 0) throw ValidationError("fit_background: repeated alphabet symbol");
    slot = static_cast<int>(i);
  }
  const std::size_t A = bg.alphabet_.size();
  bg.uniform_.assign(A, 1.0 / static_cast<double>(A));

  std::map<std::pair<int, std::string>, std::vector<double>> counts;
  for (const auto& s : sequences) {
    for (std::size_t pos = 0; pos < s.size(); ++pos) {
      const int a = bg.index_[static_cast<unsigned char>(s[pos])];
      if (a < 0) throw ValidationError(std::string("fit_background: symbol outside alphabet: ") + s[pos]);
      const std::size_t c = std::min<std::size_t>(pos, static_cast<std::size_t>(order));
      auto& row = counts[{static_cast<int>(pos), s.substr(pos - c, c)}];
      if (row.empty()) row.assign(A, 0.0);
      row[static_cast<std::size_t>(a)] += 1.0;
    }
    bg.lengths_.push_back(static_cast<int>(s.size()));
  }
  for (auto& [key, row] : counts) {
    const double total = std::accumulate(row.begin(), row.end(), 0.0) + pseudocount * static_cast<double>(A);
    for (double& v : row) v = (v + pseudocount) / total;
    bg.table_.emplace(key, std::move(row));
  }
  return bg;
}

// Activations and screening ---------------------------------------------------

double motif_match(std::string_view seq, std::string_view motif) {
  if (motif.empty()) throw ValidationError("motif_match: empty motif");
  if (seq.size() < motif.size()) return 0.0;
  std::size_t best = 0;
  for (std::size_t i = 0; i + motif.size() <= seq.size() && best < motif.size(); ++i) {
    std::size_t hit = 0;
    for (std::size_t j = 0; j < motif.size(); ++j) hit += seq[i + j] == motif[j];
    best = std::max(best, hit);
  }
  return static_cast<double>(best) / static_cast<double>(motif.size());
}

double repertoire_activation(const Repertoire& rep, std::string_view motif) {
  if (rep.sequences.empty()) throw ValidationError("repertoire_activation: empty repertoire");
  double s = 0.0;
  for (const auto& q : rep.sequences) s += motif_match(q, motif);
  return s / static_cast<double>(rep.sequences.size());
}

Mat activation_matrix(const std::vector<Repertoire>& reps, const std::vector<std::string>& motifs, Exec exec) {
  Mat a(static_cast<Eigen::Index>(motifs.size()), static_cast<Eigen::Index>(reps.size()));
  for_each_index(exec, motifs.size(), [&](std::size_t c) {
    for (std::size_t r = 0; r < reps.size(); ++r)
      a(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(r)) = repertoire_activation(reps[r], motifs[c]);
  });
  return a;
}

std::vector<int> screen_channels(const Mat& activations, double top_frac) {
  if (activations.size() == 0) throw ValidationError("screen_channels: empty activation matrix");
  if (!(top_frac > 0.0 && top_frac <= 1.0)) throw ValidationError("screen_channels: top_frac must lie in (0, 1]");
  const auto C = static_cast<std::size_t>(activations.rows());
  const auto keep = static_cast<std::size_t>(std::ceil(top_frac * static_cast<double>(C) - 1e-9));
  const Vec score = activations.rowwise().maxCoeff();
  std::vector<int> idx(C);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return score[a] > score[b]; });
  idx.resize(std::max<std::size_t>(keep, 1));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Permutation tests -------------------------------------------------------------

PermResult permutation_pvalue(double observed, const NullDraw& draw, const PermutationConfig& cfg) {
  if (cfg.b_min < 1 || cfg.b_max < cfg.b_min || cfg.block < 1)
    throw ValidationError("permutation_pvalue: need 1 <= b_min <= b_max and block >= 1");
  if (!std::isfinite(observed)) throw NumericalError("permutation_pvalue: non-finite observed statistic");
  std::size_t count = 0, B = 0;
  double p_prev = -1.0;
  std::vector<char> hit;
  while (B < cfg.b_max) {
    const std::size_t n = std::min(cfg.block, cfg.b_max - B);
    hit.assign(n, 0);
    bool finite = true;
    for_each_index(cfg.exec, n, [&](std::size_t b) {
      Rng rng(derive_seed(cfg.seed, B + b));
      const double v = draw(rng);
      if (!std::isfinite(v)) finite = false;
      hit[b] = v >= observed;
    });
    if (!finite) throw NumericalError("permutation_pvalue: non-finite null statistic");
    for (char h : hit) count += static_cast<std::size_t>(h);
    B += n;
    const double p = static_cast<double>(1 + count) / static_cast<double>(B + 1);
    if (B >= cfg.b_min && p_prev >= 0.0 && std::abs(p - p_prev) < cfg.stability) break;
    p_prev = p;
  }
  return {static_cast<double>(1 + count) / static_cast<double>(B + 1), B};
}

double exhaustive_pvalue(double observed, const std::vector<double>& null_stats) {
  if (null_stats.empty()) throw ValidationError("exhaustive_pvalue: empty null");
  const auto ge = std::count_if(null_stats.begin(), null_stats.end(), [&](double v) { return v >= observed; });
  return static_cast<double>(ge) / static_cast<double>(null_stats.size());
}

double mean_difference(const Vec& activation, const std::vector<int>& labels) {
  double s1 = 0.0, s0 = 0.0;
  int n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      s1 += activation[static_cast<Eigen::Index>(i)];
      ++n1;
    } else {
      s0 += activation[static_cast<Eigen::Index>(i)];
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) throw ValidationError("mean_difference: both labels required");
  return s1 / n1 - s0 / n0;
}

PermResult channel_pvalue(const Vec& activation, const std::vector<int>& labels, const PermutationConfig& cfg) {
  if (static_cast<std::size_t>(activation.size()) != labels.size())
    throw ValidationError("channel_pvalue: activation / label length mismatch");
  const double obs = mean_difference(activation, labels);
  return permutation_pvalue(
      obs,
      [&](Rng& rng) {
        std::vector<int> perm = labels;
        shuffle(perm, rng);
        return mean_difference(activation, perm);
      },
      cfg);
}

// Storey ------------------------------------------------------------------------

double storey_pi0(const std::vector<double>& p, double lambda) {
  if (p.empty()) throw ValidationError("storey_pi0: empty p-value list");
  if (!(lambda > 0.0 && lambda < 1.0)) throw ValidationError("storey_pi0: lambda must lie in (0, 1)");
  std::size_t above = 0;
  for (double v : p) {
    if (!(v > 0.0 && v <= 1.0)) throw ValidationError("storey_pi0: p-values must lie in (0, 1]");
    above += v > lambda;
  }
  return std::min(1.0, static_cast<double>(above) / ((1.0 - lambda) * static_cast<double>(p.size())));
}

std::vector<double> q_values(const std::vector<double>& p, double pi0) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> q(m);
  double run = std::numeric_limits<double>::infinity();
  for (std::size_t j = m; j-- > 0;) {
    run = std::min(run, pi0 * static_cast<double>(m) * p[order[j]] / static_cast<double>(j + 1));
    q[order[j]] = run;
  }
  return q;
}

StoreyResult storey(const std::vector<double>& p, double lambda, std::size_t n_boot, std::uint64_t seed, Exec exec) {
  StoreyResult r;
  r.pi0 = storey_pi0(p, lambda);
  r.q = q_values(p, r.pi0);
  const auto plan = bootstrap::ResamplePlan::random(n_boot, seed);
  const auto reps = bootstrap::replicates(
      plan, p.size(), p.size(),
      [&](std::span<const std::size_t> idx) {
        std::size_t above = 0;
        for (std::size_t i : idx) above += p[i] > lambda;
        return std::min(1.0, static_cast<double>(above) / ((1.0 - lambda) * static_cast<double>(idx.size())));
      },
      exec);
  r.ci90 = bootstrap::percentile_interval(reps, 0.90);
  return r;
}

MotifTestReport two_stage_test(const Mat& activations, const std::vector<int>& labels, double top_frac,
                               const PermutationConfig& cfg, std::size_t n_boot_storey) {
  MotifTestReport rep;
  rep.screened = screen_channels(activations, top_frac);
  for (int c : rep.screened) {
    PermutationConfig pc = cfg;
    pc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(c));
    const auto r = channel_pvalue(activations.row(c).transpose(), labels, pc);
    rep.p_values.push_back(r.p);
    rep.b_used.push_back(r.b_used);
  }
  const auto st = storey(rep.p_values, 0.5, n_boot_storey, derive_seed(cfg.seed, 0x5702e7), cfg.exec);
  rep.q_values = st.q;
  rep.pi0 = st.pi0;
  rep.pi0_ci = st.ci90;
  return rep;
}

// Threshold calibration ------------------------------------------------------------

TauTest tau_t_test(double tau_bar, double se, double center) {
  TauTest r;
  if (!(se >= 0.0)) throw ValidationError("tau_t_test: SE must be >= 0");
  if (se == 0.0) {
    r.zero_variance = true;
    return r;
  }
  r.t = (tau_bar - center) / (se / std::sqrt(3.0));
  r.p = stats::student_t_two_sided_p(r.t, 2.0);
  return r;
}

double tau_standard_error(const std::array<double, 3>& taus) {
  const double m = (taus[0] + taus[1] + taus[2]) / 3.0;
  double ss = 0.0;
  for (double t : taus) ss += (t - m) * (t - m);
  return std::sqrt(ss / 6.0);
}

std::vector<double> rank_normalize(const Vec& x) {
  const std::size_t n = static_cast<std::size_t>(x.size());
  if (n < 2) throw ValidationError("rank_normalize: need at least two values");
  auto r = stats::average_ranks(std::span<const double>(x.data(), n));
  for (double& v : r) v = (v - 1.0) / static_cast<double>(n - 1);
  return r;
}

double threshold_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                     const std::vector<std::size_t>& rows, double tau) {
  std::vector<double> d;
  std::vector<int> y;
  for (std::size_t i : rows) {
    d.push_back(scores[i] >= tau ? 1.0 : 0.0);
    y.push_back(labels[i]);
  }
  return stats::auc(d, y);
}

namespace {

std::vector<double> make_grid(double lo, double hi, int n) {
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1);
  return g;
}

}  // namespace

TauCalibration calibrate_tau(const Vec& activation, const std::vector<int>& labels, const TauConfig& cfg,
                             std::string name) {
  if (static_cast<std::size_t>(activation.size()) != labels.size())
    throw ValidationError("calibrate_tau: activation / label length mismatch");
  if (cfg.grid_points < 1 || !(cfg.grid_lo <= cfg.grid_hi) || cfg.max_rounds < 1)
    throw ValidationError("calibrate_tau: invalid grid or round cap");

  // Stratified split and stratified inner folds.
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  Rng rng = make_rng(cfg.seed, 0x7a0);
  shuffle(pos, rng);
  shuffle(neg, rng);
  const auto n_cal_pos = static_cast<std::size_t>(std::llround(cfg.cal_frac * static_cast<double>(pos.size())));
  const auto n_cal_neg = static_cast<std::size_t>(std::llround(cfg.cal_frac * static_cast<double>(neg.size())));
  if (n_cal_pos < 3 || n_cal_neg < 3 || pos.size() - n_cal_pos < 1 || neg.size() - n_cal_neg < 1)
    throw ValidationError("calibrate_tau: calibration split too small for stratified 3-fold CV");
  std::vector<std::size_t> cal, test;
  std::array<std::vector<std::size_t>, 3> folds;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (i < n_cal_pos) {
      cal.push_back(pos[i]);
      folds[i % 3].push_back(pos[i]);
    } else {
      test.push_back(pos[i]);
    }
  }
  for (std::size_t i = 0; i < neg.size(); ++i) {
    if (i < n_cal_neg) {
      cal.push_back(neg[i]);
      folds[i % 3].push_back(neg[i]);
    } else {
      test.push_back(neg[i]);
    }
  }
  const std::vector<double> score = rank_normalize(activation);

  TauCalibration out;
  out.name = std::move(name);
  double center = kGridCenter;
  double half = 0.5 * (cfg.grid_hi - cfg.grid_lo);
  for (int round = 1; round <= cfg.max_rounds; ++round) {
    out.grid = make_grid(std::max(0.0, center - half), std::min(1.0, center + half), cfg.grid_points);
    for (int k = 0; k < 3; ++k) {
      std::vector<std::size_t> train;
      for (int j = 0; j < 3; ++j)
        if (j != k) train.insert(train.end(), folds[j].begin(), folds[j].end());
      double best_auc = -1.0, best_tau = out.grid.front();
      for (double tau : out.grid) {
        const double a = threshold_auc(score, labels, train, tau);
        // Ties go to the threshold nearest the grid centre.
        if (a > best_auc + 1e-12 || (std::abs(a - best_auc) <= 1e-12 && std::abs(tau - center) < std::abs(best_tau - center))) {
          best_auc = a;
          best_tau = tau;
        }
      }
      out.fold_tau[static_cast<std::size_t>(k)] = best_tau;
    }
    out.tau_bar = (out.fold_tau[0] + out.fold_tau[1] + out.fold_tau[2]) / 3.0;
    out.se = tau_standard_error(out.fold_tau);
    const TauTest tt = tau_t_test(out.tau_bar, out.se, center);
    out.t_stat = tt.t;
    out.p_value = tt.p;
    out.zero_variance = tt.zero_variance;
    out.cal_auc = threshold_auc(score, labels, cal, out.tau_bar);
    out.test_auc = threshold_auc(score, labels, test, out.tau_bar);
    out.delta_auc = std::abs(out.cal_auc - out.test_auc);
    out.rounds = round;
    out.pass = out.p_value >= cfg.alpha && out.delta_auc <= cfg.auc_gap;
    if (out.pass) return out;
    center = out.tau_bar;
    half *= 1.0 - cfg.shrink;
  }
  if (cfg.throw_on_failure)
    throw ConvergenceError("calibrate_tau: no passing calibration after " + std::to_string(cfg.max_rounds) +
                           " rounds (last p=" + io::num(out.p_value, 4) + ", delta_auc=" + io::num(out.delta_auc, 4) +
                           ")");
  return out;
}

// Cohorts and power ------------------------------------------------------------------

std::vector<std::string> random_motifs(std::size_t n, int k, std::string_view alphabet, Rng& rng) {
  if (k < 1 || alphabet.empty()) throw ValidationError("random_motifs: need k >= 1 and a non-empty alphabet");
  if (std::pow(static_cast<double>(alphabet.size()), k) < static_cast<double>(n))
    throw ValidationError("random_motifs: more motifs requested than distinct k-mers");
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string s;
    for (int i = 0; i < k; ++i) s.push_back(alphabet[uniform_index(rng, alphabet.size())]);
    if (seen.insert(s).second) out.push_back(s);
  }
  return out;
}

std::vector<Repertoire> simulate_cohort(const MarkovBackground& bg, const CohortConfig& cfg,
                                        const std::vector<std::string>& enriched, double effect, Rng& rng) {
  if (cfg.n_repertoires < 2 || cfg.seqs_per_repertoire < 1) throw ValidationError("simulate_cohort: cohort too small");
  if (!(effect >= 0.0 && effect <= 1.0)) throw ValidationError("simulate_cohort: effect must lie in [0, 1]");
  const int n_pos = static_cast<int>(std::lround(cfg.frac_positive * cfg.n_repertoires));
  std::vector<Repertoire> reps(static_cast<std::size_t>(cfg.n_repertoires));
  for (int r = 0; r < cfg.n_repertoires; ++r) {
    auto& rep = reps[static_cast<std::size_t>(r)];
    rep.label = r < n_pos ? 1 : 0;
    for (int s = 0; s < cfg.seqs_per_repertoire; ++s) {
      std::string seq = bg.sample(rng);
      if (rep.label == 1) {
        for (const auto& m : enriched) {
          if (uniform01(rng) >= effect || seq.size() < m.size()) continue;
          const std::size_t at = uniform_index(rng, seq.size() - m.size() + 1);
          seq.replace(at, m.size(), m);
        }
      }
      rep.sequences.push_back(std::move(seq));
    }
  }
  return reps;
}

std::vector<PowerPoint> power_curve(const MarkovBackground& bg, const CohortConfig& cohort, const std::string& motif,
                                    const std::vector<double>& effects, double alpha, int n_rep,
                                    const PermutationConfig& perm, std::uint64_t seed) {
  if (effects.empty()) throw ValidationError("power_curve: empty effect grid");
  if (n_rep < 1) throw ValidationError("power_curve: n_rep must be >= 1");
  std::vector<PowerPoint> out;
  for (std::size_t e = 0; e < effects.size(); ++e) {
    std::vector<char> hit(static_cast<std::size_t>(n_rep), 0);
    for_each_index_dynamic(perm.exec, hit.size(), [&](std::size_t rep) {
      const std::uint64_t stream = (static_cast<std::uint64_t>(e) << 32) | rep;
      Rng rng = make_rng(seed, stream);
      const auto reps = simulate_cohort(bg, cohort, {motif}, effects[e], rng);
      Vec act(static_cast<Eigen::Index>(reps.size()));
      std::vector<int> labels;
      for (std::size_t r = 0; r < reps.size(); ++r) {
        act[static_cast<Eigen::Index>(r)] = repertoire_activation(reps[r], motif);
        labels.push_back(reps[r].label);
      }
      PermutationConfig pc = perm;
      pc.exec = Exec::Serial;
      pc.seed = derive_seed(seed, stream ^ 0x9e3779b9ULL);
      hit[rep] = channel_pvalue(act, labels, pc).p <= alpha;
    });
    const double rate = static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / n_rep;
    out.push_back({effects[e], rate, n_rep});
  }
  return out;
}

// Output ---------------------------------------------------------------------------

void write_motif_report_csv(const std::string& path, const MotifTestReport& r, const std::vector<std::string>& motifs) {
  io::CsvWriter w(path);
  w.header({"channel", "motif", "p_value", "q_value", "b_used", "pi0_hat", "pi0_ci90_lo", "pi0_ci90_hi"});
  for (std::size_t i = 0; i < r.screened.size(); ++i) {
    const int c = r.screened[i];
    w.row({std::to_string(c), motifs.empty() ? "" : motifs[static_cast<std::size_t>(c)], io::num(r.p_values[i]),
           io::num(r.q_values[i]), std::to_string(r.b_used[i]), io::num(r.pi0), io::num(r.pi0_ci.lo),
           io::num(r.pi0_ci.hi)});
  }
}

void write_tau_csv(const std::string& path, const std::vector<TauCalibration>& rows) {
  io::CsvWriter w(path);
  w.header({"cohort", "tau_bar", "se", "t", "p_value", "delta_auc", "pass", "zero_variance", "rounds", "cal_auc",
            "test_auc"});
  for (const auto& r : rows)
    w.row({r.name, io::num(r.tau_bar), io::num(r.se), io::num(r.t_stat), io::num(r.p_value), io::num(r.delta_auc),
           r.pass ? "yes" : "no", r.zero_variance ? "yes" : "no", std::to_string(r.rounds), io::num(r.cal_auc),
           io::num(r.test_auc)});
}

void write_power_csv(const std::string& path, const std::vector<PowerPoint>& pts) {
  io::CsvWriter w(path);
  w.header({"effect", "detection_rate", "n_rep"});
  for (const auto& p : pts) w.row({io::num(p.effect), io::num(p.rate), std::to_string(p.n_rep)});
}

}  // namespace protoadapt::motif
