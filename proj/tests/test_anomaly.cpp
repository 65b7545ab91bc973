#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "evanet/anomaly.hpp"
#include "evanet/stats.hpp"
#include "testutil.hpp"

using namespace evanet;

namespace {

// Independent tail probability of Student's t by Simpson quadrature of the
// density, no incomplete-beta machinery involved.
double t_tail_by_quadrature(double t, double df) {
  const double norm = std::exp(std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df)) /
                      std::sqrt(df * 3.14159265358979323846);
  auto pdf = [&](double x) {
    return norm * std::pow(1.0 + x * x / df, -0.5 * (df + 1.0));
  };
  const double hi = 5000.0;  // far enough that the df=3 tail is < 1e-11
  const std::size_t n = 400000;  // even
  const double h = (hi - t) / static_cast<double>(n);
  double acc = pdf(t) + pdf(hi);
  for (std::size_t i = 1; i < n; ++i) acc += pdf(t + h * i) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

}  // namespace

TEST_CASE("bag arithmetic") {
  CHECK(bag(40.0, 40.0) == 0.0);
  CHECK(bag(47.4, 40.0) == doctest::Approx(7.4).epsilon(1e-15));
  CHECK(bag(35.0, 40.0) == doctest::Approx(-5.0));
  CHECK_THROWS_AS(bag(30.0, 0.0), DomainError);
  // Antisymmetric up to sign when arguments swap.
  CHECK(bag(47.4, 40.0) == doctest::Approx(-bag(40.0, 47.4)));
}

TEST_CASE("pae: exact values and the square identity with align_loss") {
  Rng rng(4);
  Tensor z = Tensor::uniform({6}, -2, 2, rng);
  CHECK(pae(z, z) == 0.0);

  std::vector<double> d(6, 0.0);
  d[1] = 3.0;
  d[4] = 4.0;
  CHECK(pae(add(z, Tensor::from_data({6}, d)), z) == doctest::Approx(5.0).epsilon(1e-14));

  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = Tensor::uniform({8}, -3, 3, rng);
    Tensor b = Tensor::uniform({8}, -3, 3, rng);
    const double e = pae(a, b);
    CHECK(std::fabs(e * e - align_loss(a, b).item()) < 1e-10);
  }
  CHECK_THROWS_AS(pae(z, Tensor::zeros({5})), ShapeError);
}

TEST_CASE("welch t-test: identical samples, extreme separation, frozen reference") {
  std::vector<double> a = {1, 2, 3, 4, 5};
  WelchResult same = welch_t_test(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == doctest::Approx(1.0));

  Rng rng(9);
  std::vector<double> base(30), shifted(30);
  for (std::size_t i = 0; i < 30; ++i) {
    base[i] = rng.normal();
    shifted[i] = base[i] + 100.0;
  }
  CHECK(welch_t_test(base, shifted).p < 1e-10);

  // Recorded reference: a = [1..5], b = [3..7] gives t = -2 at df = 8,
  // two-sided p ≈ 0.0805; the quadrature oracle pins the digits.
  std::vector<double> b = {3, 4, 5, 6, 7};
  WelchResult r = welch_t_test(a, b);
  CHECK(r.t == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(r.df == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(r.p == doctest::Approx(0.0805).epsilon(2e-3));
  const double oracle = 2.0 * t_tail_by_quadrature(2.0, 8.0);
  CHECK(r.p == doctest::Approx(oracle).epsilon(1e-8));
}

TEST_CASE("welch t-test: degenerate and invalid inputs") {
  std::vector<double> flat = {2.0, 2.0, 2.0};
  WelchResult r = welch_t_test(flat, flat);
  CHECK(r.degenerate);
  CHECK(r.p == 1.0);
  WelchResult r2 = welch_t_test(flat, {5.0, 5.0, 5.0});
  CHECK(r2.degenerate);
  CHECK(r2.p == 0.0);
  CHECK_THROWS_AS(welch_t_test({1.0}, flat), DomainError);
}

TEST_CASE("student t survival function against quadrature across the range") {
  for (double df : {3.0, 8.0, 25.0, 120.0}) {
    for (double t : {0.0, 0.5, 1.0, 2.5, 4.0}) {
      const double got = student_t_sf(t, df);
      const double want = t_tail_by_quadrature(t, df);
      CHECK(std::fabs(got - want) < 1e-8);
    }
  }
  CHECK(student_t_two_sided_p(0.0, 10.0) == doctest::Approx(1.0));
}

TEST_CASE("score_cohorts: determinism, stats, ordering flags, degenerate input") {
  testutil::TempDir tmp("anomaly");

  SynthConfig healthy_cfg;
  healthy_cfg.n_subjects = 4;
  healthy_cfg.epochs_per_subject = 2;
  healthy_cfg.seed = 11;
  CohortManifest healthy_m = synth_cohort_to_dir(healthy_cfg, tmp.file("healthy"));

  SynthConfig mci_cfg = healthy_cfg;
  mci_cfg.pathology_severity = 0.5;
  mci_cfg.seed = 12;
  CohortManifest mci_m = synth_cohort_to_dir(mci_cfg, tmp.file("mci"));
  SynthConfig ad_cfg = healthy_cfg;
  ad_cfg.pathology_severity = 1.0;
  ad_cfg.seed = 13;
  CohortManifest ad_m = synth_cohort_to_dir(ad_cfg, tmp.file("ad"));

  Dataset healthy = Dataset::load(healthy_m);
  Dataset pathological = Dataset::load(mci_m);
  {
    Dataset ad_data = Dataset::load(ad_m);
    pathological.epochs.insert(pathological.epochs.end(), ad_data.epochs.begin(),
                               ad_data.epochs.end());
    std::size_t base = pathological.subjects.empty()
                           ? 0
                           : pathological.epochs.size() - ad_data.epochs.size();
    for (auto subject : ad_data.subjects) {
      subject.id = "ad_" + subject.id;
      for (auto& idx : subject.epoch_indices) idx += base;
      pathological.subjects.push_back(subject);
    }
    for (auto& s : pathological.subjects)
      if (s.id.rfind("ad_", 0) != 0 && s.label == CohortLabel::mci) s.id = "mci_" + s.id;
  }

  ModelConfig cfg;
  cfg.encoder.n_layers = 1;
  cfg.encoder.d_model = 16;
  cfg.encoder.n_heads = 2;
  cfg.latent_dim = 8;
  cfg.age_embed_dim = 16;
  cfg.prototype_hidden = 16;
  Rng init(5);
  EvaNetParams params = EvaNetParams::init(cfg, init);

  AnomalyReport r1 = score_cohorts(params, cfg, healthy, &pathological);
  AnomalyReport r2 = score_cohorts(params, cfg, healthy, &pathological);
  CHECK(r1.per_subject_csv() == r2.per_subject_csv());
  CHECK(r1.cohort_summary_csv() == r2.cohort_summary_csv());
  CHECK(r1.significance_table() == r2.significance_table());
  CHECK(r1.violin_long_csv() == r2.violin_long_csv());

  REQUIRE(r1.cohorts.size() == 3);
  CHECK(r1.stats_for(CohortLabel::healthy)->n == 4);
  CHECK(r1.stats_for(CohortLabel::mci)->n == 4);
  CHECK(r1.stats_for(CohortLabel::ad)->n == 4);
  CHECK(r1.tests.size() == 3);  // healthy/mci, healthy/ad, mci/ad
  for (const auto& t : r1.tests) {
    CHECK(t.bag_test.p >= 0.0);
    CHECK(t.bag_test.p <= 1.0);
    CHECK(t.pae_test.p >= 0.0);
    CHECK(t.pae_test.p <= 1.0);
  }
  // Flags mirror the actual means, whatever an untrained model produced.
  const auto* h = r1.stats_for(CohortLabel::healthy);
  const auto* m = r1.stats_for(CohortLabel::mci);
  const auto* a = r1.stats_for(CohortLabel::ad);
  CHECK(r1.bag_ordering == (h->bag_mean < m->bag_mean && m->bag_mean < a->bag_mean));
  CHECK(r1.pae_ordering == (h->pae_mean < m->pae_mean && m->pae_mean < a->pae_mean));

  // Per-subject scores: bag == pred − age and pae >= 0.
  for (const auto& s : r1.subjects) {
    CHECK(s.bag == s.predicted - s.age);
    CHECK(s.pae >= 0.0);
  }

  SUBCASE("healthy-only report omits the tests with a reason") {
    AnomalyReport solo = score_cohorts(params, cfg, healthy, nullptr);
    CHECK(solo.cohorts.size() == 1);
    CHECK(solo.tests.empty());
    CHECK(solo.subjects.size() == 4);
  }
}
