#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "evanet/data.hpp"
#include "evanet/model.hpp"

namespace evanet {

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> r2;  // absent when the targets have zero variance
};

Metrics regression_metrics(const std::vector<double>& preds, const std::vector<double>& targets);

struct FoldSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

// Subject-level partition into k folds: disjoint, union = all subjects,
// sizes differing by at most one, order fixed by the seed.
std::vector<FoldSplit> kfold_split(const std::vector<std::string>& subject_ids, std::size_t k,
                                   std::uint64_t seed);

struct TrainConfig {
  ModelConfig model;
  std::size_t folds = 10;
  std::size_t max_epochs = 200;
  std::size_t batch_size = 64;
  double base_lr = 1e-4;
  double min_lr = 0.0;
  double weight_decay = 1e-5;
  std::size_t patience = 20;
  double val_fraction = 0.1;  // of each fold's training subjects, for early stopping
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // fold-level parallelism; 0 = min(folds, hardware)

  void validate() const;
};

struct FoldReport {
  std::size_t fold = 0;
  std::vector<double> train_loss;  // per epoch, batch-mean l_total
  std::vector<double> val_loss;    // per epoch, eval-mode L_pred
  std::size_t stopped_epoch = 0;   // 1-based epoch count actually run
  std::size_t best_epoch = 0;
  std::string checkpoint_path;
  // Headline metrics are subject-level (mean of per-epoch predictions per
  // subject); epoch-level values are reported alongside.
  Metrics subject;
  Metrics epoch;
  std::size_t n_train_subjects = 0, n_val_subjects = 0, n_test_subjects = 0;

  std::string to_json_line() const;
};

struct CvSummary {
  std::vector<FoldReport> folds;
  double mae_mean = 0.0, mae_std = 0.0;
  double rmse_mean = 0.0, rmse_std = 0.0;
  std::optional<double> r2_mean, r2_std;

  std::string summary_csv() const;  // fold,mae,rmse,r2 plus mean/std rows
};

// In-memory cohort: epochs grouped by subject, loaded once from a manifest.
struct Dataset {
  struct Subject {
    std::string id;
    double age = 0.0;
    CohortLabel label = CohortLabel::healthy;
    std::vector<std::size_t> epoch_indices;
  };
  std::vector<EegEpoch> epochs;
  std::vector<Subject> subjects;

  static Dataset load(const CohortManifest& manifest);
  const Subject& subject_by_id(const std::string& id) const;
};

// Full protocol: subject-level k-fold CV, a seeded val split inside each
// training set for early stopping, AdamW + cosine annealing, best-checkpoint
// restore, and per-fold metrics. Folds may run on parallel workers; every
// fold owns its own RNG streams so reports are scheduling-independent.
CvSummary run_cv(const Dataset& data, const TrainConfig& cfg, const std::string& run_dir,
                 std::ostream* log = nullptr);

}  // namespace evanet
