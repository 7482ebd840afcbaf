#include "protoadapt/prototypes.hpp"

#include "protoadapt/io.hpp"
#include "protoadapt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace protoadapt::proto {

namespace {

nlohmann::json mat_json(const Mat& m) {
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(to_std(m.row(i).transpose()));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Mat mat_from_json(const nlohmann::json& j) {
  Mat m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  const auto data = j.at("data").get<std::vector<std::vector<double>>>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index k = 0; k < m.cols(); ++k) m(i, k) = data[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  return m;
}

nlohmann::json real_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

// Nearest centroid, ties to the lowest index.
int nearest(const Mat& centroids, const Eigen::Ref<const Vec>& x, double* dist2) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double dd = (centroids.row(k).transpose() - x).squaredNorm();
    if (dd < bd) {
      bd = dd;
      best = static_cast<int>(k);
    }
  }
  if (dist2) *dist2 = bd;
  return best;
}

struct Run {
  Mat centroids;
  std::vector<int> labels;
  double sse = 0.0;
};

Run lloyd(const Mat& x, int K, std::uint64_t seed, int max_iter) {
  const Eigen::Index n = x.rows();
  Rng rng = make_rng(seed, 0);
  Mat c(K, x.cols());
  // k-means++ seeding
  c.row(0) = x.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
  Vec d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (x.row(i) - c.row(0)).squaredNorm();
  for (int k = 1; k < K; ++k) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double target = uniform01(rng) * total, acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
    }
    c.row(k) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], (x.row(i) - c.row(k)).squaredNorm());
  }

  Run run;
  run.labels.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int l = nearest(c, x.row(i).transpose(), nullptr);
      if (l != run.labels[static_cast<std::size_t>(i)]) {
        run.labels[static_cast<std::size_t>(i)] = l;
        changed = true;
      }
    }
    if (!changed && it > 0) break;
    Mat sum = Mat::Zero(K, x.cols());
    std::vector<int> count(static_cast<std::size_t>(K), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(run.labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++count[static_cast<std::size_t>(run.labels[static_cast<std::size_t>(i)])];
    }
    for (int k = 0; k < K; ++k) {
      if (count[static_cast<std::size_t>(k)] > 0) {
        c.row(k) = sum.row(k) / count[static_cast<std::size_t>(k)];
        continue;
      }
      // Empty cluster: move it onto the point worst served by its centroid.
      Eigen::Index far = 0;
      double fd = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double dd = (x.row(i) - c.row(run.labels[static_cast<std::size_t>(i)])).squaredNorm();
        if (dd > fd) {
          fd = dd;
          far = i;
        }
      }
      c.row(k) = x.row(far);
      run.labels[static_cast<std::size_t>(far)] = k;
    }
  }
  run.sse = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double dd = 0.0;
    run.labels[static_cast<std::size_t>(i)] = nearest(c, x.row(i).transpose(), &dd);
    run.sse += dd;
  }
  run.centroids = c;
  return run;
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

std::string fmt(double v) { return io::num(v, 6); }

}  // namespace

Projector fit_projector(const Mat& theta_seed, int r, bool canonicalize, adapters::ScaleMode mode) {
  const Eigen::Index d = theta_seed.cols();
  if (r < 1 || r > d) throw ValidationError("fit_projector: r out of range");
  Projector p;
  p.r = r;
  p.canon = canonicalize ? adapters::fit_canonicalizer(theta_seed, mode) : adapters::Canonicalizer::identity(d);
  p.pca_basis = adapters::principal_axes(p.canon.apply_rows(theta_seed)).leftCols(r);
  const Mat lifted = p.canon.inverse_matrix() * p.pca_basis;
  Eigen::HouseholderQR<Mat> qr(lifted);
  p.q = Mat(qr.householderQ()).leftCols(r);
  const Mat rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  for (int k = 0; k < r; ++k)
    if (rr(k, k) < 0.0) p.q.col(k) *= -1.0;
  return p;
}

nlohmann::json to_json(const Projector& p) {
  return {{"r", p.r}, {"canonicalizer", adapters::to_json(p.canon)}, {"pca_basis", mat_json(p.pca_basis)},
          {"q", mat_json(p.q)}};
}

Projector projector_from_json(const nlohmann::json& j) {
  Projector p;
  p.r = j.at("r").get<int>();
  p.canon = adapters::canonicalizer_from_json(j.at("canonicalizer"));
  p.pca_basis = mat_from_json(j.at("pca_basis"));
  p.q = mat_from_json(j.at("q"));
  return p;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw ValidationError("adjusted_rand_index: length mismatch");
  const int ka = a.empty() ? 0 : *std::max_element(a.begin(), a.end()) + 1;
  const int kb = b.empty() ? 0 : *std::max_element(b.begin(), b.end()) + 1;
  Mat table = Mat::Zero(ka, kb);
  for (std::size_t i = 0; i < a.size(); ++i) table(a[i], b[i]) += 1.0;
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (Eigen::Index i = 0; i < ka; ++i)
    for (Eigen::Index j = 0; j < kb; ++j) sum_ij += choose2(table(i, j));
  for (Eigen::Index i = 0; i < ka; ++i) sum_a += choose2(table.row(i).sum());
  for (Eigen::Index j = 0; j < kb; ++j) sum_b += choose2(table.col(j).sum());
  const double total = choose2(static_cast<double>(a.size()));
  if (total == 0.0) return 1.0;
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (sum_ij - expected) / (max_index - expected);
}

KMeansResult kmeans(const Mat& points, int K, int n_restarts, std::uint64_t seed, int max_iter, Exec exec) {
  if (points.rows() == 0) throw ValidationError("kmeans: no points");
  if (K < 1 || K > points.rows()) throw ValidationError("kmeans: K must lie in [1, N]");
  if (n_restarts < 1) throw ValidationError("kmeans: need at least one restart");
  std::vector<Run> runs(static_cast<std::size_t>(n_restarts));
  for_each_index_dynamic(exec, runs.size(), [&](std::size_t i) {
    runs[i] = lloyd(points, K, derive_seed(seed, i), max_iter);
  });
  KMeansResult out;
  std::size_t best = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].sse < runs[best].sse) best = i;
    out.restart_labels.push_back(runs[i].labels);
    out.restart_sse.push_back(runs[i].sse);
  }
  out.centroids = runs[best].centroids;
  out.labels = runs[best].labels;
  out.sse = runs[best].sse;
  double acc = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      acc += adjusted_rand_index(runs[i].labels, runs[j].labels);
      ++pairs;
    }
  out.stability = pairs ? acc / pairs : 1.0;
  return out;
}

Diagnostics diagnostics(const Mat& m) {
  if (m.rows() < 1) throw ValidationError("diagnostics: empty memory");
  Diagnostics d;
  Eigen::JacobiSVD<Mat> svd(m);
  const Vec s = svd.singularValues();
  const double smax = s[0];
  const double smin = s[s.size() - 1];
  const double floor = std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(m.rows(), m.cols())) * smax;
  d.kappa = (smin <= floor || smin == 0.0) ? std::numeric_limits<double>::infinity() : smax / smin;
  const Vec norms = m.rowwise().norm();
  d.mu = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = i + 1; j < m.rows(); ++j) {
      if (norms[i] == 0.0 || norms[j] == 0.0) continue;
      d.mu = std::max(d.mu, std::min(1.0, std::abs(m.row(i).dot(m.row(j))) / (norms[i] * norms[j])));
    }
  return d;
}

PrototypeMemory::PrototypeMemory(Mat m, Projector projector) : m_(std::move(m)), projector_(std::move(projector)) {
  if (m_.rows() >= 1) diag_ = diagnostics(m_);
}

void PrototypeMemory::set_rows(Mat m) {
  if (frozen_) throw FrozenError("prototype memory is frozen");
  m_ = std::move(m);
  diag_ = m_.rows() >= 1 ? diagnostics(m_) : Diagnostics{};
}

void PrototypeMemory::set_certificate(const CoverageCertificate& c) {
  if (!frozen_) throw ValidationError("certificate requires a frozen memory");
  if (certificate_) throw FrozenError("coverage certificate already set");
  certificate_ = c;
}

double PrototypeMemory::eps_hat() const {
  if (!certificate_) throw ValidationError("memory has no coverage certificate");
  return certificate_->eps_hat;
}

double PrototypeMemory::eps_upper() const {
  if (!certificate_) throw ValidationError("memory has no coverage certificate");
  return certificate_->pct90.hi;
}

ClusterResult cluster_prototypes(const Mat& theta_seed, const Projector& projector, int K, int n_restarts,
                                 std::uint64_t seed, Exec exec) {
  if (theta_seed.rows() == 0) throw ValidationError("cluster_prototypes: empty seed set");
  if (K > theta_seed.rows()) throw ValidationError("cluster_prototypes: K exceeds the number of seed tasks");
  const Mat coords = projector.coords_rows(theta_seed);
  const KMeansResult km = kmeans(coords, K, n_restarts, seed, 100, exec);
  Mat m(K, theta_seed.cols());
  for (int k = 0; k < K; ++k) m.row(k) = projector.lift(km.centroids.row(k).transpose()).transpose();
  ClusterResult out{PrototypeMemory(std::move(m), projector), km.sse, km.stability};
  return out;
}

L0Fit l0_fit(const Vec& u, const Mat& m_lifted, int r_sparse, L0Mode mode) {
  const Eigen::Index K = m_lifted.rows();
  if (m_lifted.cols() != u.size()) throw ValidationError("l0_fit: dimension mismatch");
  if (r_sparse < 0 || r_sparse > std::min<Eigen::Index>(K, u.size()))
    throw ValidationError("l0_fit: r_sparse must not exceed min(K, r)");
  const Vec norms = m_lifted.rowwise().norm();
  for (Eigen::Index k = 0; k < K; ++k)
    if (!(norms[k] > 0.0)) throw NumericalError("l0_fit: degenerate (zero) atom at row " + std::to_string(k));

  auto solve = [&](const std::vector<int>& sup, Vec& coef) {
    Mat a(u.size(), static_cast<Eigen::Index>(sup.size()));
    for (std::size_t c = 0; c < sup.size(); ++c) a.col(static_cast<Eigen::Index>(c)) = m_lifted.row(sup[c]).transpose();
    coef = a.completeOrthogonalDecomposition().solve(u);
    return (u - a * coef).norm();
  };

  L0Fit out;
  out.w = Vec::Zero(K);
  out.residual = u.norm();
  if (r_sparse == 0 || out.residual == 0.0) return out;

  if (mode == L0Mode::Omp) {
    std::vector<int> sup;
    Vec res = u, coef;
    for (int step = 0; step < r_sparse; ++step) {
      int best = -1;
      double bc = 0.0;
      for (Eigen::Index k = 0; k < K; ++k) {
        if (std::find(sup.begin(), sup.end(), static_cast<int>(k)) != sup.end()) continue;
        const double c = std::abs(m_lifted.row(k).dot(res)) / norms[k];
        if (c > bc) {
          bc = c;
          best = static_cast<int>(k);
        }
      }
      if (best < 0 || bc <= 1e-14 * u.norm()) break;
      sup.push_back(best);
      const double rn = solve(sup, coef);
      Mat a(u.size(), static_cast<Eigen::Index>(sup.size()));
      for (std::size_t c = 0; c < sup.size(); ++c) a.col(static_cast<Eigen::Index>(c)) = m_lifted.row(sup[c]).transpose();
      res = u - a * coef;
      if (rn <= out.residual) {
        out.residual = rn;
        out.w.setZero();
        for (std::size_t c = 0; c < sup.size(); ++c) out.w[sup[c]] = coef[static_cast<Eigen::Index>(c)];
        out.support = sup;
      }
      if (rn == 0.0) break;
    }
    return out;
  }

  // Exact: every support of size min(r_sparse, K), lexicographic order.
  const int s = static_cast<int>(std::min<Eigen::Index>(r_sparse, K));
  std::vector<int> sup(static_cast<std::size_t>(s));
  std::iota(sup.begin(), sup.end(), 0);
  Vec coef;
  while (true) {
    const double rn = solve(sup, coef);
    if (rn < out.residual) {
      out.residual = rn;
      out.w.setZero();
      for (std::size_t c = 0; c < sup.size(); ++c) out.w[sup[c]] = coef[static_cast<Eigen::Index>(c)];
      out.support = sup;
    }
    int i = s - 1;
    while (i >= 0 && sup[static_cast<std::size_t>(i)] == static_cast<int>(K) - s + i) --i;
    if (i < 0) break;
    ++sup[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < s; ++k) sup[static_cast<std::size_t>(k)] = sup[static_cast<std::size_t>(k - 1)] + 1;
  }
  return out;
}

std::vector<double> coverage_residuals(const PrototypeMemory& memory, const Mat& theta, int r_sparse, L0Mode mode,
                                       Exec exec) {
  const Mat lifted = memory.lifted();
  std::vector<double> out(static_cast<std::size_t>(theta.rows()));
  for_each_index(exec, out.size(), [&](std::size_t i) {
    const Vec u = memory.projector().project(theta.row(static_cast<Eigen::Index>(i)).transpose());
    out[i] = l0_fit(u, lifted, r_sparse, mode).residual;
  });
  return out;
}

CoverageCertificate certificate_from_residuals(const std::vector<double>& residuals, const bootstrap::ResamplePlan& plan,
                                               Exec exec) {
  if (residuals.empty()) throw ValidationError("coverage certificate: no tasks");
  auto median_of = [&](std::span<const std::size_t> idx) {
    std::vector<double> v;
    v.reserve(idx.size());
    for (std::size_t i : idx) v.push_back(residuals[i]);
    return stats::median(v);
  };
  CoverageCertificate c;
  c.eps_hat = stats::median(residuals);
  const auto reps = bootstrap::replicates(plan, residuals.size(), residuals.size(), median_of, exec);
  const auto jack = residuals.size() >= 2 ? bootstrap::jackknife(residuals.size(), median_of) : std::vector<double>{};
  c.pct90 = bootstrap::percentile_interval(reps, 0.90);
  c.bca90 = bootstrap::bca_interval(c.eps_hat, reps, jack, 0.90);
  c.n_boot = reps.size();
  c.replicate_min = *std::min_element(reps.begin(), reps.end());
  c.replicate_max = *std::max_element(reps.begin(), reps.end());
  return c;
}

CoverageCertificate coverage_certificate(const PrototypeMemory& memory, const Mat& theta, int r_sparse,
                                         const bootstrap::ResamplePlan& plan, L0Mode mode, Exec exec) {
  if (!memory.frozen()) throw ValidationError("coverage_certificate: memory must be frozen");
  if (theta.rows() == 0) throw ValidationError("coverage_certificate: no pretraining adapters");
  return certificate_from_residuals(coverage_residuals(memory, theta, r_sparse, mode, exec), plan, exec);
}

PrototypeMemory merge_prototypes(PrototypeMemory memory, const MergeConfig& cfg, const Mat* theta_for_log) {
  if (memory.frozen()) throw FrozenError("merge_prototypes: memory is frozen");
  auto coverage = [&](const PrototypeMemory& m) {
    return stats::median(coverage_residuals(m, *theta_for_log, std::min(cfg.r_sparse, m.K()), L0Mode::Omp));
  };
  const bool log_cov = theta_for_log && cfg.r_sparse > 0;
  while (memory.K() >= 2) {
    const Mat& m = memory.M();
    const Vec norms = m.rowwise().norm();
    int bi = -1, bj = -1;
    double best = -1.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = i + 1; j < m.rows(); ++j) {
        if (norms[i] == 0.0 || norms[j] == 0.0) continue;
        const double c = std::min(1.0, std::abs(m.row(i).dot(m.row(j))) / (norms[i] * norms[j]));
        if (c > best) {
          best = c;
          bi = static_cast<int>(i);
          bj = static_cast<int>(j);
        }
      }
    if (bi < 0 || best <= cfg.mu_threshold) break;
    const double before = log_cov ? coverage(memory) : 0.0;
    const Vec a = m.row(bi).transpose() / norms[bi];
    Vec b = m.row(bj).transpose() / norms[bj];
    if (a.dot(b) < 0.0) b = -b;
    Vec dir = a + b;
    dir /= dir.norm();
    Mat next(m.rows() - 1, m.cols());
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      if (i == bj) continue;
      if (i == bi)
        next.row(k++) = dir.transpose() * (0.5 * (norms[bi] + norms[bj]));
      else
        next.row(k++) = m.row(i);
    }
    const int k_before = memory.K();
    memory.set_rows(std::move(next));
    std::ostringstream line;
    line << "merge rows " << bi << " " << bj << " cos=" << fmt(best) << " K=" << k_before << "->" << memory.K();
    if (log_cov) line << " coverage " << fmt(before) << "->" << fmt(coverage(memory));
    memory.merge_log.push_back(line.str());
  }
  const Diagnostics& d = memory.diag();
  if (memory.K() >= 2 && d.kappa > cfg.kappa_threshold)
    memory.merge_log.push_back("warning kappa=" + fmt(d.kappa) + " exceeds threshold " + fmt(cfg.kappa_threshold));
  return memory;
}

void write_memory(const std::string& dir, const PrototypeMemory& memory) {
  io::ensure_dir(dir);
  {
    io::CsvWriter w(io::join_path(dir, "memory.csv"));
    std::vector<std::string> head{"prototype"};
    for (Eigen::Index j = 0; j < memory.dim(); ++j) head.push_back("theta" + std::to_string(j));
    w.header(head);
    for (int k = 0; k < memory.K(); ++k) {
      std::vector<std::string> row{std::to_string(k)};
      for (Eigen::Index j = 0; j < memory.dim(); ++j) row.push_back(io::num(memory.M()(k, j), 17));
      w.row(row);
    }
  }
  nlohmann::json j;
  j["K"] = memory.K();
  j["r"] = memory.r();
  j["M"] = mat_json(memory.M());
  j["projector"] = to_json(memory.projector());
  j["kappa"] = real_json(memory.diag().kappa);
  j["mu"] = memory.diag().mu;
  if (memory.K() >= 2) {
    const Diagnostics ld = memory.lifted_diag();
    j["kappa_lifted"] = real_json(ld.kappa);
  }
  j["frozen"] = memory.frozen();
  if (const auto& c = memory.certificate()) {
    j["certificate"] = {{"eps_hat", c->eps_hat},       {"pct90", {c->pct90.lo, c->pct90.hi}},
                        {"bca90", {c->bca90.lo, c->bca90.hi}}, {"n_boot", c->n_boot},
                        {"replicate_min", c->replicate_min},   {"replicate_max", c->replicate_max}};
  }
  j["merge_log"] = memory.merge_log;
  io::write_text(io::join_path(dir, "memory.json"), j.dump(2) + "\n");
  std::string log;
  for (const auto& l : memory.merge_log) log += l + "\n";
  io::write_text(io::join_path(dir, "merge_log.txt"), log);
}

PrototypeMemory read_memory(const std::string& dir) {
  std::ifstream f(io::join_path(dir, "memory.json"));
  if (!f) throw Error("cannot read prototype memory from " + dir);
  const nlohmann::json j = nlohmann::json::parse(f);
  PrototypeMemory m(mat_from_json(j.at("M")), projector_from_json(j.at("projector")));
  m.merge_log = j.at("merge_log").get<std::vector<std::string>>();
  if (j.at("frozen").get<bool>()) m.freeze();
  if (j.contains("certificate")) {
    const auto& c = j.at("certificate");
    CoverageCertificate cc;
    cc.eps_hat = c.at("eps_hat").get<double>();
    cc.pct90 = {c.at("pct90")[0].get<double>(), c.at("pct90")[1].get<double>()};
    cc.bca90 = {c.at("bca90")[0].get<double>(), c.at("bca90")[1].get<double>()};
    cc.n_boot = c.at("n_boot").get<std::size_t>();
    cc.replicate_min = c.at("replicate_min").get<double>();
    cc.replicate_max = c.at("replicate_max").get<double>();
    m.set_certificate(cc);
  }
  return m;
}

}  // namespace protoadapt::proto
