#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "evanet/optim.hpp"
#include "evanet/training.hpp"
#include "testutil.hpp"

using namespace evanet;

TEST_CASE("adamw: no-op on zero gradients without weight decay") {
  Tensor w = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt({w}, cfg);
  w.zero_grad();
  opt.step();
  CHECK(w.values()[0] == 1.0);
  CHECK(w.values()[1] == -2.0);
  CHECK(w.values()[2] == 0.5);
}

TEST_CASE("adamw: closed-form first step") {
  Tensor w = Tensor::scalar(0.0, true);
  AdamWConfig cfg;
  cfg.base_lr = 0.1;
  cfg.weight_decay = 0.0;
  AdamW opt({w}, cfg);
  // grad = 1: with bias correction m̂ = v̂ = 1, so the step is −lr/(1+ε).
  sum(w).backward();
  opt.step();
  CHECK(std::fabs(w.values()[0] - (-0.1)) < 1e-8);
}

TEST_CASE("adamw: converges on a quadratic bowl") {
  Tensor w = Tensor::scalar(3.0, true);
  AdamWConfig cfg;
  cfg.base_lr = 0.05;
  cfg.weight_decay = 0.0;
  AdamW opt({w}, cfg);
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    sum(square(w)).backward();
    opt.step();
  }
  CHECK(std::fabs(w.values()[0]) < 1e-3);
}

TEST_CASE("adamw: missing gradient is an error") {
  Tensor w = Tensor::scalar(1.0, true);
  Tensor detached = Tensor::scalar(2.0, false);
  AdamW opt({detached});
  CHECK_THROWS_AS(opt.step(), Error);
  (void)w;
}

TEST_CASE("cosine annealing endpoints and midpoint") {
  CHECK(cosine_lr(0, 200, 1e-4) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(std::fabs(cosine_lr(200, 200, 1e-4)) < 1e-19);
  CHECK(cosine_lr(100, 200, 1e-4) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(201, 200, 1e-4), DomainError);
}

TEST_CASE("early stopping boundary behaviour") {
  SUBCASE("strictly decreasing never stops") {
    EarlyStopper s(20);
    for (int i = 0; i < 100; ++i) CHECK(!s.observe(100.0 - i));
  }
  SUBCASE("constant history stops at epoch 21") {
    EarlyStopper s(20);
    for (int i = 1; i <= 20; ++i) CHECK(!s.observe(1.0));
    CHECK(s.observe(1.0));
    CHECK(s.epochs_seen() == 21);
  }
  SUBCASE("improvement every 19 epochs never stops") {
    EarlyStopper s(20);
    double best = 100.0;
    for (int epoch = 0; epoch < 200; ++epoch) {
      const double loss = (epoch % 19 == 0) ? (best -= 1.0) : best + 0.5;
      CHECK(!s.observe(loss));
    }
  }
  SUBCASE("best checkpoint epoch is retained") {
    EarlyStopper s(2);
    s.observe(5.0);
    s.observe(3.0);
    s.observe(4.0);
    CHECK(s.best() == 3.0);
    CHECK(s.best_epoch() == 2);
  }
}

TEST_CASE("kfold: singleton folds at k = n") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("s" + std::to_string(i));
  auto folds = kfold_split(ids, 10, 7);
  REQUIRE(folds.size() == 10);
  std::set<std::string> seen;
  for (const auto& f : folds) {
    CHECK(f.test_ids.size() == 1);
    CHECK(f.train_ids.size() == 9);
    seen.insert(f.test_ids[0]);
  }
  CHECK(seen.size() == 10);
}

TEST_CASE("kfold: partition properties over random cohorts") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.next_below(60);
    const std::size_t k = 2 + rng.next_below(std::min<std::uint64_t>(n - 1, 9));
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("subj" + std::to_string(i));
    auto folds = kfold_split(ids, k, trial);
    REQUIRE(folds.size() == k);
    std::set<std::string> all_test;
    std::size_t min_size = n, max_size = 0;
    for (const auto& f : folds) {
      min_size = std::min(min_size, f.test_ids.size());
      max_size = std::max(max_size, f.test_ids.size());
      std::set<std::string> train(f.train_ids.begin(), f.train_ids.end());
      for (const auto& id : f.test_ids) {
        CHECK(train.find(id) == train.end());
        CHECK(all_test.insert(id).second);  // test sets are pairwise disjoint
      }
      CHECK(f.train_ids.size() + f.test_ids.size() == n);
    }
    CHECK(all_test.size() == n);
    CHECK(max_size - min_size <= 1);
  }
  CHECK_THROWS_AS(kfold_split({"a", "b"}, 3, 0), DomainError);
}

TEST_CASE("kfold: fixed seed gives identical assignment") {
  std::vector<std::string> ids;
  for (int i = 0; i < 23; ++i) ids.push_back("s" + std::to_string(i));
  auto a = kfold_split(ids, 5, 42);
  auto b = kfold_split(ids, 5, 42);
  for (std::size_t f = 0; f < 5; ++f) {
    CHECK(a[f].test_ids == b[f].test_ids);
    CHECK(a[f].train_ids == b[f].train_ids);
  }
}

TEST_CASE("regression metrics: exact cases") {
  Metrics perfect = regression_metrics({1, 2, 3}, {1, 2, 3});
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);
  REQUIRE(perfect.r2.has_value());
  CHECK(*perfect.r2 == 1.0);

  Metrics constant = regression_metrics({2.0, 2.0}, {1.0, 3.0});
  REQUIRE(constant.r2.has_value());
  CHECK(*constant.r2 == doctest::Approx(0.0).epsilon(1e-15));

  Metrics hand = regression_metrics({1, 2}, {2, 4});
  CHECK(hand.mae == doctest::Approx(1.5));
  CHECK(hand.rmse == doctest::Approx(std::sqrt(2.5)));
  REQUIRE(hand.r2.has_value());
  CHECK(*hand.r2 == doctest::Approx(-1.5));

  Metrics degenerate = regression_metrics({1, 2}, {3, 3});
  CHECK(!degenerate.r2.has_value());

  CHECK_THROWS_AS(regression_metrics({}, {}), ShapeError);
  CHECK_THROWS_AS(regression_metrics({1}, {1, 2}), ShapeError);
}

TEST_CASE("rmse dominates mae on random data") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.next_below(40);
    std::vector<double> preds(n), targets(n);
    for (std::size_t i = 0; i < n; ++i) {
      preds[i] = rng.uniform(-50, 50);
      targets[i] = rng.uniform(-50, 50);
    }
    Metrics m = regression_metrics(preds, targets);
    CHECK(m.rmse >= m.mae);
    CHECK(m.mae >= 0.0);
    if (m.r2) CHECK(*m.r2 <= 1.0);
  }
}

TEST_CASE("run_cv smoke: two folds on a tiny synthetic cohort") {
  testutil::TempDir tmp("cv-smoke");
  SynthConfig synth;
  synth.n_subjects = 8;
  synth.epochs_per_subject = 2;
  synth.seed = 11;
  CohortManifest manifest = synth_cohort_to_dir(synth, tmp.file("cohort"));
  Dataset data = Dataset::load(manifest);

  TrainConfig cfg;
  cfg.model.encoder.n_layers = 1;
  cfg.model.encoder.d_model = 16;
  cfg.model.encoder.n_heads = 2;
  cfg.model.encoder.attention_mode = AttentionMode::probsparse_sampled_measure;
  cfg.model.latent_dim = 8;
  cfg.model.age_embed_dim = 16;
  cfg.model.prototype_hidden = 16;
  cfg.folds = 2;
  cfg.max_epochs = 2;
  cfg.batch_size = 8;
  cfg.base_lr = 1e-3;
  cfg.seed = 5;
  cfg.workers = 2;

  CvSummary summary = run_cv(data, cfg, tmp.file("run"));
  REQUIRE(summary.folds.size() == 2);
  std::set<std::string> tested;
  for (const auto& f : summary.folds) {
    CHECK(f.train_loss.size() == 2);
    CHECK(f.val_loss.size() == 2);
    CHECK(f.subject.rmse >= f.subject.mae);
    CHECK(f.epoch.rmse >= f.epoch.mae);
    CHECK(!f.checkpoint_path.empty());
    CHECK(f.n_test_subjects == 4);
  }

  // Same seed, fresh run directory: identical training trajectories.
  CvSummary again = run_cv(data, cfg, tmp.file("run2"));
  for (std::size_t f = 0; f < 2; ++f) {
    CHECK(again.folds[f].train_loss == summary.folds[f].train_loss);
    CHECK(again.folds[f].val_loss == summary.folds[f].val_loss);
    CHECK(again.folds[f].subject.mae == summary.folds[f].subject.mae);
  }

  // Aggregate of identical folds collapses to the fold value with zero std.
  CvSummary identical;
  identical.folds = {summary.folds[0], summary.folds[0]};
  std::vector<double> maes = {identical.folds[0].subject.mae, identical.folds[1].subject.mae};
  CHECK(maes[0] == maes[1]);
}
