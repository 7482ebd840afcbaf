#include "protoadapt/spectral.hpp"

#include "protoadapt/adapters.hpp"
#include "protoadapt/io.hpp"
#include "protoadapt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace protoadapt::spectral {

namespace {

Vec sorted_eigenvalues(const Mat& sym) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym, Eigen::EigenvaluesOnly);
  Vec ev = es.eigenvalues().reverse();
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = std::max(ev[i], 0.0);
  return ev;
}

// Top-r share, with the zero-mass convention used inside resampling loops.
double zeta_or_one(const double* desc, Eigen::Index n, int r) {
  double top = 0.0, total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    total += desc[i];
    if (i < r) top += desc[i];
  }
  return total > 0.0 ? top / total : 1.0;
}

DimTestReport run_test(const Vec& observed, std::size_t n_reps, int r_center, const FisherTestConfig& cfg,
                       const std::function<void(std::size_t, Vec&)>& replicate) {
  const auto d = static_cast<int>(observed.size());
  const std::vector<int> cands = candidate_ranks(r_center, d, cfg.half_width);
  std::vector<double> obs_zeta;
  for (int r : cands) obs_zeta.push_back(energy_ratio(to_std(observed), r));

  // counts[b * C + c] = 1 if replicate b's zeta for candidate c is at or below the level.
  const std::size_t C = cands.size();
  std::vector<unsigned char> below(n_reps * C, 0);
  for_each_index(cfg.exec, n_reps, [&](std::size_t b) {
    Vec ev(d);
    replicate(b, ev);
    for (std::size_t c = 0; c < C; ++c)
      below[b * C + c] = zeta_or_one(ev.data(), ev.size(), cands[c]) <= cfg.level ? 1 : 0;
  });

  DimTestReport rep;
  rep.alpha = cfg.alpha;
  rep.n_boot = n_reps;
  rep.level = cfg.level;
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t count = 0;
    for (std::size_t b = 0; b < n_reps; ++b) count += below[b * C + c];
    DimCandidate dc;
    dc.r_cand = cands[c];
    dc.zeta_emp = obs_zeta[c];
    dc.p_raw = (1.0 + static_cast<double>(count)) / (static_cast<double>(n_reps) + 1.0);
    rep.candidates.push_back(dc);
  }
  adjudicate(rep);
  return rep;
}

}  // namespace

PcaRank pca_rank(const Mat& theta, double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw ValidationError("pca_rank: rho must lie in (0, 1)");
  if (theta.size() == 0 || theta.isZero(0.0)) throw ValidationError("pca_rank: all-zero adapter matrix");
  if (!theta.allFinite()) throw NumericalError("pca_rank: non-finite adapter matrix");
  const Eigen::Index d = theta.cols();
  Eigen::JacobiSVD<Mat> svd(theta);
  PcaRank out;
  out.singular_values = Vec::Zero(d);
  out.singular_values.head(svd.singularValues().size()) = svd.singularValues();
  const Vec sq = out.singular_values.array().square();
  const double total = sq.sum();
  out.cumulative_energy.resize(d);
  double run = 0.0;
  out.r = static_cast<int>(d);
  bool found = false;
  for (Eigen::Index k = 0; k < d; ++k) {
    run += sq[k];
    out.cumulative_energy[k] = run / total;
    if (!found && out.cumulative_energy[k] >= rho - 1e-12) {
      out.r = static_cast<int>(k + 1);
      found = true;
    }
  }
  return out;
}

std::vector<RankCurvePoint> rank_curve(const Mat& theta, double rho, const std::vector<int>& sizes, std::uint64_t seed) {
  std::vector<std::size_t> order(static_cast<std::size_t>(theta.rows()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0x7c);
  shuffle(order, rng);
  std::vector<RankCurvePoint> out;
  for (int n : sizes) {
    if (n < 1 || n > theta.rows()) throw ValidationError("rank_curve: size outside [1, N]");
    Mat sub(n, theta.cols());
    for (int i = 0; i < n; ++i) sub.row(i) = theta.row(static_cast<Eigen::Index>(order[static_cast<std::size_t>(i)]));
    out.push_back({n, pca_rank(sub, rho).r});
  }
  return out;
}

double default_fisher_reg(const Mat& gradients) {
  if (gradients.rows() == 0) return 0.0;
  const double trace = gradients.squaredNorm() / static_cast<double>(gradients.rows());
  return 1e-6 * trace / static_cast<double>(gradients.cols());
}

FisherSpectrum fisher_from_gradients(const Mat& gradients, double reg) {
  if (gradients.rows() == 0) throw ValidationError("fisher: no gradients");
  if (!gradients.allFinite()) throw NumericalError("fisher: non-finite gradients");
  if (reg < 0.0) reg = default_fisher_reg(gradients);
  Mat f = gradients.transpose() * gradients / static_cast<double>(gradients.rows());
  f.diagonal().array() += reg;
  FisherSpectrum s;
  s.eigenvalues = sorted_eigenvalues(f);
  s.ridge_reg = reg;
  s.n_support = static_cast<std::size_t>(gradients.rows());
  return s;
}

FisherSpectrum fisher_spectrum(const synth::EpisodeTask& task, const ProbeHead& probe, const FeatureMap& fm,
                               double reg) {
  if (task.support.size() == 0) throw ValidationError("fisher_spectrum: empty support");
  const Mat grads = probe_sample_gradients(probe, fm.apply_rows(task.support.x), task.support.y);
  return fisher_from_gradients(grads, reg);
}

double energy_ratio(std::span<const double> eigenvalues, int r) {
  if (r < 1 || static_cast<std::size_t>(r) > eigenvalues.size()) throw ValidationError("energy_ratio: r out of range");
  double top = 0.0, total = 0.0;
  for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
    total += eigenvalues[i];
    if (i < static_cast<std::size_t>(r)) top += eigenvalues[i];
  }
  if (!(total > 0.0)) throw NumericalError("energy_ratio: spectrum has zero total energy");
  return top / total;
}

void adjudicate(DimTestReport& report) {
  report.selected_r.reset();
  for (auto& c : report.candidates) {
    c.p_adj = std::min(1.0, kCandidateFamily * c.p_raw);
    // The adjusted value is a product of decimals; compare with a few ulps of slack.
    c.reject = c.p_adj <= report.alpha * (1.0 + 1e-12);
    if (c.reject && !report.selected_r) report.selected_r = c.r_cand;
  }
}

std::vector<int> candidate_ranks(int r_center, int d, int half_width) {
  std::vector<int> out;
  for (int r = r_center - half_width; r <= r_center + half_width; ++r)
    if (r >= 1 && r <= d) out.push_back(r);
  if (out.empty()) throw ValidationError("no valid candidate ranks around " + std::to_string(r_center));
  return out;
}

DimTestReport fisher_energy_test(const FisherSpectrum& spectrum, int r_center, const FisherTestConfig& cfg) {
  const Vec& ev = spectrum.eigenvalues;
  if (ev.size() == 0 || !(ev.sum() > 0.0)) throw NumericalError("fisher_energy_test: zero-energy spectrum");
  const bootstrap::ResamplePlan plan{cfg.plan, cfg.n_boot, cfg.seed};
  const auto pool = static_cast<std::size_t>(ev.size());
  const std::size_t n = bootstrap::replicate_count(plan, pool, pool);
  return run_test(ev, n, r_center, cfg, [&](std::size_t b, Vec& out) {
    std::vector<std::size_t> idx(pool);
    bootstrap::resample_indices(plan, b, pool, idx);
    std::vector<double> v(pool);
    for (std::size_t i = 0; i < pool; ++i) v[i] = ev[static_cast<Eigen::Index>(idx[i])];
    std::sort(v.begin(), v.end(), std::greater<>());
    out = to_vec(v);
  });
}

DimTestReport fisher_energy_test_gradients(const Mat& gradients, double reg, int r_center, const FisherTestConfig& cfg) {
  const FisherSpectrum observed = fisher_from_gradients(gradients, reg);
  if (!(observed.eigenvalues.sum() > 0.0)) throw NumericalError("fisher_energy_test: zero-energy spectrum");
  const double used_reg = observed.ridge_reg;
  const bootstrap::ResamplePlan plan{cfg.plan, cfg.n_boot, cfg.seed};
  const auto pool = static_cast<std::size_t>(gradients.rows());
  const std::size_t n = bootstrap::replicate_count(plan, pool, pool);
  return run_test(observed.eigenvalues, n, r_center, cfg, [&](std::size_t b, Vec& out) {
    std::vector<std::size_t> idx(pool);
    bootstrap::resample_indices(plan, b, pool, idx);
    Mat f = Mat::Zero(gradients.cols(), gradients.cols());
    for (std::size_t i : idx) {
      const auto row = gradients.row(static_cast<Eigen::Index>(i));
      f.noalias() += row.transpose() * row;
    }
    f /= static_cast<double>(pool);
    f.diagonal().array() += used_reg;
    out = sorted_eigenvalues(f);
  });
}

DimTestReport replay_reported(const std::vector<ReportedCandidate>& rows, double alpha) {
  DimTestReport rep;
  rep.alpha = alpha;
  for (const auto& r : rows) {
    DimCandidate c;
    c.r_cand = r.r_cand;
    c.zeta_emp = r.zeta_emp;
    c.p_raw = r.p_raw;
    rep.candidates.push_back(c);
  }
  adjudicate(rep);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& c = rep.candidates[i];
    if (c.reject != rows[i].reported_reject) {
      c.flagged = true;
      c.note = std::string("reported ") + (rows[i].reported_reject ? "reject" : "retain") + " but p_adj=" +
               io::num(c.p_adj, 3) + (c.reject ? " <= " : " > ") + "alpha=" + io::num(alpha, 3);
    }
  }
  return rep;
}

void write_dim_test_csv(const std::string& path, const DimTestReport& report) {
  io::CsvWriter w(path);
  w.header({"r_cand", "zeta_emp", "p_raw", "p_adj", "reject", "selected", "flagged", "note"});
  for (const auto& c : report.candidates) {
    const bool sel = report.selected_r && *report.selected_r == c.r_cand;
    w.row({std::to_string(c.r_cand), io::num(c.zeta_emp, 6), io::num(c.p_raw, 6), io::num(c.p_adj, 6),
           c.reject ? "yes" : "no", sel ? "yes" : "no", c.flagged ? "yes" : "no", c.note});
  }
}

std::vector<CiRow> fisher_ci_vs_support(const Mat& gradients, const std::vector<int>& support_sizes, int n_leading,
                                        const bootstrap::ResamplePlan& plan, double reg, Exec exec) {
  const Eigen::Index d = gradients.cols();
  if (n_leading < 1 || n_leading > d) throw ValidationError("fisher_ci_vs_support: n_leading out of range");
  std::vector<CiRow> out;
  for (int ns : support_sizes) {
    if (ns < 2) throw ValidationError("fisher_ci_vs_support: support size below 2");
    if (ns > gradients.rows()) throw ValidationError("fisher_ci_vs_support: support size exceeds available samples");
    bootstrap::ResamplePlan p = plan;
    p.seed = derive_seed(plan.seed, static_cast<std::uint64_t>(ns));
    const auto pool = static_cast<std::size_t>(gradients.rows());
    const auto sample = static_cast<std::size_t>(ns);
    const std::size_t n = bootstrap::replicate_count(p, pool, sample);
    Mat lead(static_cast<Eigen::Index>(n), n_leading);
    for_each_index(exec, n, [&](std::size_t b) {
      std::vector<std::size_t> idx(sample);
      bootstrap::resample_indices(p, b, pool, idx);
      Mat f = Mat::Zero(d, d);
      for (std::size_t i : idx) {
        const auto row = gradients.row(static_cast<Eigen::Index>(i));
        f.noalias() += row.transpose() * row;
      }
      f /= static_cast<double>(sample);
      f.diagonal().array() += reg;
      lead.row(static_cast<Eigen::Index>(b)) = sorted_eigenvalues(f).head(n_leading).transpose();
    });
    for (int k = 0; k < n_leading; ++k) {
      const std::vector<double> col = to_std(lead.col(k));
      CiRow row;
      row.n_support = ns;
      row.eig_index = k + 1;
      row.p5 = stats::quantile(col, 0.05);
      row.p95 = stats::quantile(col, 0.95);
      row.width = row.p95 - row.p5;
      out.push_back(row);
    }
  }
  return out;
}

JlReport jl_outside_energy(const Mat& theta_holdout, const std::vector<Mat>& fisher_forms, int r, const JlConfig& cfg) {
  const Eigen::Index d = theta_holdout.cols();
  if (cfg.s <= r) throw ValidationError("jl_outside_energy: target dimension must exceed r");
  if (cfg.s > d) throw ValidationError("jl_outside_energy: target dimension exceeds d");
  if (cfg.n_maps < 1) throw ValidationError("jl_outside_energy: need at least one map");
  if (fisher_forms.empty()) throw ValidationError("jl_outside_energy: no Fisher forms");
  if (!(cfg.threshold >= 0.01 && cfg.threshold <= 0.05))
    throw ValidationError("jl_outside_energy: threshold must lie in [0.01, 0.05]");

  JlReport rep;
  rep.per_map.assign(static_cast<std::size_t>(cfg.n_maps), 0.0);
  for_each_index(cfg.exec, rep.per_map.size(), [&](std::size_t m) {
    Rng rng = make_rng(cfg.seed, m);
    Mat R;
    if (cfg.kind == MapKind::Gaussian) {
      R = normal_matrix(rng, cfg.s, d, 1.0 / std::sqrt(static_cast<double>(cfg.s)));
    } else {
      Eigen::HouseholderQR<Mat> qr(normal_matrix(rng, d, d));
      R = Mat(qr.householderQ()).leftCols(cfg.s).transpose();
    }
    const Mat projected = theta_holdout * R.transpose();
    const Mat axes = adapters::principal_axes(projected).leftCols(r);
    double outside = 0.0, total = 0.0;
    for (const Mat& f : fisher_forms) {
      const Mat fs = R * f * R.transpose();
      const double tr = fs.trace();
      outside += tr - (axes.transpose() * fs * axes).trace();
      total += tr;
    }
    rep.per_map[m] = total > 0.0 ? std::max(0.0, outside / total) : 0.0;
  });
  rep.mean = stats::mean(rep.per_map);
  const auto plan = bootstrap::ResamplePlan::random(cfg.n_boot, derive_seed(cfg.seed, 0x11));
  const auto reps = bootstrap::replicates(
      plan, rep.per_map.size(), rep.per_map.size(),
      [&](std::span<const std::size_t> idx) {
        double s = 0.0;
        for (std::size_t i : idx) s += rep.per_map[i];
        return s / static_cast<double>(idx.size());
      },
      cfg.exec);
  rep.upper95 = stats::quantile(reps, 0.95);
  rep.accepted = rep.upper95 <= cfg.threshold;
  return rep;
}

Vec heldout_reconstruction_errors(const Mat& theta, int r, int n_folds) {
  const Eigen::Index n = theta.rows(), d = theta.cols();
  if (r < 0 || r > d) throw ValidationError("heldout_reconstruction_errors: r out of range");
  const int folds = static_cast<int>(std::min<Eigen::Index>(n_folds, n));
  Vec err(n);
  for (int f = 0; f < folds; ++f) {
    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < n; ++i) (i % folds == f ? test : train).push_back(i);
    Mat tr(static_cast<Eigen::Index>(train.size()), d);
    for (std::size_t k = 0; k < train.size(); ++k) tr.row(static_cast<Eigen::Index>(k)) = theta.row(train[k]);
    const Mat p = adapters::principal_axes(tr).leftCols(r);
    for (Eigen::Index i : test) {
      const Vec t = theta.row(i).transpose();
      err[i] = (t - p * (p.transpose() * t)).squaredNorm();
    }
  }
  return err;
}

double paired_bootstrap_p(std::span<const double> diffs, std::size_t n_boot, std::uint64_t seed, double tol, Exec exec) {
  std::vector<double> d(diffs.begin(), diffs.end());
  bool all_zero = true;
  for (double& v : d) {
    if (std::abs(v) <= tol) v = 0.0;
    if (v != 0.0) all_zero = false;
  }
  if (all_zero) return 1.0;
  const auto plan = bootstrap::ResamplePlan::random(n_boot, seed);
  const auto reps = bootstrap::replicates(
      plan, d.size(), d.size(),
      [&](std::span<const std::size_t> idx) {
        double s = 0.0;
        for (std::size_t i : idx) s += d[i];
        return s / static_cast<double>(idx.size());
      },
      exec);
  std::size_t count = 0;
  for (double m : reps) count += m <= 0.0 ? 1 : 0;
  return (1.0 + static_cast<double>(count)) / (static_cast<double>(n_boot) + 1.0);
}

SequentialResult sequential_r_selection(const Mat& theta, int r_center, std::size_t n_boot, std::uint64_t seed,
                                        double alpha, Exec exec) {
  if (theta.rows() < 3) throw ValidationError("sequential_r_selection: need at least 3 tasks");
  const auto d = static_cast<int>(theta.cols());
  std::vector<int> cands;
  for (int r : candidate_ranks(r_center, d))
    if (r < d) cands.push_back(r);
  if (cands.empty()) throw ValidationError("sequential_r_selection: no candidate with room to grow");
  const double tol = 1e-12 * theta.squaredNorm() / static_cast<double>(theta.rows());

  SequentialResult out;
  Vec prev = heldout_reconstruction_errors(theta, cands.front());
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const int r = cands[k];
    const Vec next = heldout_reconstruction_errors(theta, r + 1);
    const Vec diff = prev - next;
    SequentialStep st;
    st.r = r;
    st.mean_improvement = diff.mean();
    st.p_value = paired_bootstrap_p(to_std(diff), n_boot, derive_seed(seed, static_cast<std::uint64_t>(r)), tol, exec);
    st.reject = st.p_value < alpha;
    out.steps.push_back(st);
    if (!st.reject) {
      out.selected_r = r;
      return out;
    }
    prev = next;
  }
  out.selected_r = cands.back() + 1;
  return out;
}

}  // namespace protoadapt::spectral
