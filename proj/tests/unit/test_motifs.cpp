#include "protoadapt/motifs.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace protoadapt;
using namespace protoadapt::motif;

namespace {

std::vector<std::string> toy_corpus() { return {"ABAB", "ABBA", "BAAB", "AAAA", "BBB"}; }

MarkovBackground protein_background(std::uint64_t seed, int n = 300) {
  Rng rng = make_rng(seed, 0);
  std::vector<std::string> seqs;
  for (int i = 0; i < n; ++i) {
    std::string s;
    const int len = 12 + static_cast<int>(uniform_index(rng, 6));
    for (int j = 0; j < len; ++j) s.push_back(kAminoAcids[uniform_index(rng, kAminoAcids.size())]);
    seqs.push_back(s);
  }
  return fit_background(seqs);
}

}  // namespace

TEST_CASE("background probabilities equal hand counts with pseudocounts") {
  const auto bg = fit_background(toy_corpus(), "AB", 1, 0.5);
  // Position 0, empty context: A starts 3 of 5 sequences.
  CHECK(bg.prob(0, "", 'A') == doctest::Approx((3 + 0.5) / (5 + 1.0)));
  // Position 1 after A: ABAB, ABBA, AAAA -> B twice, A once.
  CHECK(bg.prob(1, "A", 'B') == doctest::Approx((2 + 0.5) / (3 + 1.0)));
  // Position 3 after A: ABAB -> B, BAAB -> B, AAAA -> A.
  CHECK(bg.prob(3, "A", 'B') == doctest::Approx((2 + 0.5) / (3 + 1.0)));
  // Unseen context falls back to uniform.
  CHECK(bg.prob(2, "Z", 'A') == doctest::Approx(0.5));
  for (int pos = 0; pos < 4; ++pos)
    for (std::string ctx : {"", "A", "B"}) {
      const auto& d = bg.conditional(pos, ctx);
      CHECK(std::accumulate(d.begin(), d.end(), 0.0) == doctest::Approx(1.0));
    }
  CHECK_THROWS_AS(fit_background({"ABC"}, "AB", 1, 0.5), ValidationError);
  CHECK_THROWS_AS(fit_background({}, "AB", 1, 0.5), ValidationError);

  Rng rng = make_rng(1, 1);
  for (int i = 0; i < 50; ++i) {
    const auto s = bg.sample(rng);
    CHECK(std::find(bg.lengths().begin(), bg.lengths().end(), static_cast<int>(s.size())) != bg.lengths().end());
    CHECK(s.find_first_not_of("AB") == std::string::npos);
  }
}

TEST_CASE("motif match and screening against a sort oracle") {
  CHECK(motif_match("XXABCXX", "ABC") == 1.0);
  CHECK(motif_match("XXABDXX", "ABC") == doctest::Approx(2.0 / 3));
  CHECK(motif_match("AB", "ABC") == 0.0);

  Rng rng = make_rng(4, 0);
  Mat act = normal_matrix(rng, 37, 6);
  act(5, 0) = act(9, 0) = 10.0;  // a tie at the top
  for (double frac : {0.1, 0.25, 0.5, 1.0}) {
    const auto got = screen_channels(act, frac);
    std::vector<std::pair<double, int>> ranked;
    for (int c = 0; c < act.rows(); ++c) ranked.push_back({-act.row(c).maxCoeff(), c});
    std::sort(ranked.begin(), ranked.end());
    const auto k = static_cast<std::size_t>(std::ceil(frac * 37 - 1e-9));
    std::vector<int> expect;
    for (std::size_t i = 0; i < k; ++i) expect.push_back(ranked[i].second);
    std::sort(expect.begin(), expect.end());
    CHECK(got == expect);
  }
  CHECK_THROWS_AS(screen_channels(act, 0.0), ValidationError);
}

TEST_CASE("sign-flip null: exhaustive enumeration and Monte Carlo agree") {
  const std::vector<double> x{0.8, 1.3, -0.2};
  const double obs = (x[0] + x[1] + x[2]) / 3;
  std::vector<double> null;
  for (int mask = 0; mask < 8; ++mask) {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += (mask >> i & 1 ? -1 : 1) * x[i];
    null.push_back(s / 3);
  }
  // The identity and the flip of -0.2 reach the observed mean: 2 of 8.
  CHECK(exhaustive_pvalue(obs, null) == doctest::Approx(2.0 / 8));

  PermutationConfig cfg;
  cfg.b_min = cfg.b_max = 20000;
  cfg.seed = 11;
  const auto r = permutation_pvalue(
      obs,
      [&](Rng& rng) {
        double s = 0;
        for (double v : x) s += (uniform01(rng) < 0.5 ? -1 : 1) * v;
        return s / 3;
      },
      cfg);
  CHECK(r.b_used == 20000);
  CHECK(std::abs(r.p - 0.25) < 4 * std::sqrt(0.25 * 0.75 / 20000));

  cfg.exec = Exec::Serial;
  const auto serial = permutation_pvalue(obs, [&](Rng& rng) { return uniform01(rng); }, cfg);
  cfg.exec = Exec::Parallel;
  CHECK(permutation_pvalue(obs, [&](Rng& rng) { return uniform01(rng); }, cfg).p == serial.p);

  cfg.b_min = 10;
  cfg.b_max = 5;
  CHECK_THROWS_AS(permutation_pvalue(obs, [](Rng&) { return 0.0; }, cfg), ValidationError);
}

TEST_CASE("adaptive permutation stops between the floor and the cap") {
  Rng rng = make_rng(8, 0);
  Vec act = normal_vector(rng, 40);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[i] = i % 2;
  PermutationConfig cfg;
  cfg.seed = 3;
  const auto r = channel_pvalue(act, labels, cfg);
  CHECK(r.b_used >= cfg.b_min);
  CHECK(r.b_used <= cfg.b_max);
  CHECK(r.p > 0.0);
  CHECK(r.p <= 1.0);
  CHECK(channel_pvalue(act, labels, cfg).p == r.p);
}

TEST_CASE("q-values equal the literal step-up formula") {
  Rng rng = make_rng(21, 0);
  std::vector<double> p;
  for (int i = 0; i < 57; ++i) p.push_back(std::pow(uniform01(rng), 2) * 0.999 + 1e-4);
  p[3] = p[10];  // a tie
  const double pi0 = storey_pi0(p, 0.5);
  std::size_t above = std::count_if(p.begin(), p.end(), [](double v) { return v > 0.5; });
  CHECK(pi0 == doctest::Approx(std::min(1.0, above / (0.5 * 57))));
  const auto q = q_values(p, pi0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    // q_i = min over p_j >= p_i of pi0 m p_j / rank(p_j), rank by count at or below.
    double best = 1e300;
    for (double pj : p) {
      if (pj < p[i]) continue;
      const double rank = static_cast<double>(std::count_if(p.begin(), p.end(), [&](double v) { return v <= pj; }));
      best = std::min(best, pi0 * 57 * pj / rank);
    }
    CHECK(q[i] == doctest::Approx(best).epsilon(1e-12));
  }
  const auto st = storey(p, 0.5, 400, 5, Exec::Parallel);
  CHECK(st.pi0 == pi0);
  CHECK(st.ci90.lo <= st.ci90.hi);
  CHECK(storey(p, 0.5, 400, 5, Exec::Serial).ci90.lo == st.ci90.lo);
  CHECK_THROWS_AS(storey_pi0({0.0, 0.5}), ValidationError);
}

TEST_CASE("threshold t statistics reproduce the published table rows") {
  struct Row {
    double tau, se, t_abs;
  };
  for (const Row& r : {Row{0.483, 0.018, 1.636}, Row{0.477, 0.021, 1.897}, Row{0.492, 0.016, 0.866},
                       Row{0.501, 0.019, 0.091}, Row{0.488, 0.020, 1.039}}) {
    const auto tt = tau_t_test(r.tau, r.se);
    CHECK(std::abs(tt.t) == doctest::Approx(r.t_abs).epsilon(1e-3));
    CHECK(tt.p > 0.05);
  }
  // t with 2 dof has closed-form tails: p = 1 - |t| / sqrt(2 + t^2).
  const auto tt = tau_t_test(0.6, 0.05);
  CHECK(tt.p == doctest::Approx(1 - std::abs(tt.t) / std::sqrt(2 + tt.t * tt.t)));
  CHECK(tau_standard_error({0.4, 0.5, 0.6}) == doctest::Approx(std::sqrt(0.02 / 6)));

  const auto zero = tau_t_test(0.5, 0.0);
  CHECK(zero.zero_variance);
  CHECK(zero.p == 1.0);
}

TEST_CASE("tau calibration on a separable channel") {
  const int n = 200;
  Vec act(n);
  std::vector<int> labels(n);
  Rng rng = make_rng(31, 0);
  for (int i = 0; i < n; ++i) {
    labels[i] = i % 2;
    act[i] = labels[i] + 0.01 * standard_normal(rng);
  }
  TauConfig cfg;
  cfg.seed = 2;
  const auto c = calibrate_tau(act, labels, cfg, "sep");
  // Every grid threshold in (0.1, 0.5] separates perfectly; ties go to the centre.
  CHECK(c.fold_tau == std::array<double, 3>{0.5, 0.5, 0.5});
  CHECK(c.zero_variance);
  CHECK(c.pass);
  CHECK(c.cal_auc == 1.0);
  CHECK(c.test_auc == 1.0);
  CHECK(c.rounds == 1);

  std::vector<double> s{0.1, 0.9, 0.4, 0.6};
  std::vector<int> y{0, 1, 1, 0};
  // tau = 0.5: TPR 1/2, FPR 1/2 -> 0.5; tau = 0.3: TPR 1, FPR 1/2 -> 0.75.
  CHECK(threshold_auc(s, y, {0, 1, 2, 3}, 0.5) == doctest::Approx(0.5));
  CHECK(threshold_auc(s, y, {0, 1, 2, 3}, 0.3) == doctest::Approx(0.75));

  Vec tiny(6);
  tiny << 1, 2, 3, 4, 5, 6;
  CHECK_THROWS_AS(calibrate_tau(tiny, {0, 1, 0, 1, 0, 1}, cfg), ValidationError);
}

TEST_CASE("null channels give super-uniform p-values and pi0 near one") {
  const auto bg = protein_background(41);
  Rng rng = make_rng(41, 1);
  CohortConfig cc;
  cc.seqs_per_repertoire = 20;
  const auto reps = simulate_cohort(bg, cc, {}, 0.0, rng);
  const auto motifs = random_motifs(200, 4, kAminoAcids, rng);
  const Mat act = activation_matrix(reps, motifs);
  std::vector<int> labels;
  for (const auto& r : reps) labels.push_back(r.label);
  PermutationConfig pc;
  pc.b_min = pc.b_max = 999;
  pc.seed = 9;
  const auto rep = two_stage_test(act, labels, 1.0, pc, 500);
  REQUIRE(rep.p_values.size() == 200);
  for (double a : {0.05, 0.1, 0.2}) {
    const double frac =
        static_cast<double>(std::count_if(rep.p_values.begin(), rep.p_values.end(), [&](double p) { return p <= a; })) /
        200;
    // Binomial(200, a) upper 99.9% bound.
    CHECK(frac <= a + 3.1 * std::sqrt(a * (1 - a) / 200));
  }
  CHECK(rep.pi0 >= 0.75);
}

TEST_CASE("power: size near alpha at zero effect, full power at a large effect, replicable") {
  const auto bg = protein_background(51);
  CohortConfig cc;
  cc.seqs_per_repertoire = 20;
  PermutationConfig pc;
  pc.b_min = pc.b_max = 499;
  const auto pts = power_curve(bg, cc, "WYWC", {0.0, 0.6}, 0.05, 200, pc, 77);
  CHECK(pts[0].rate <= 0.05 + 3.1 * std::sqrt(0.05 * 0.95 / 200));
  CHECK(pts[1].rate >= 0.95);
  const auto again = power_curve(bg, cc, "WYWC", {0.0, 0.6}, 0.05, 200, pc, 77);
  CHECK(again[0].rate == pts[0].rate);
  CHECK(again[1].rate == pts[1].rate);
}
