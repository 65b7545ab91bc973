#include "evanet/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "evanet/optim.hpp"

#include <json.hpp>

namespace evanet {

namespace fs = std::filesystem;
using json = nlohmann::json;

Metrics regression_metrics(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.empty() || preds.size() != targets.size())
    throw ShapeError("regression_metrics: need equal nonempty prediction/target lists, got " +
                     std::to_string(preds.size()) + " and " + std::to_string(targets.size()));
  const double n = static_cast<double>(preds.size());
  double abs_sum = 0.0, sq_sum = 0.0, target_sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - targets[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
    target_sum += targets[i];
  }
  const double target_mean = target_sum / n;
  double ss_tot = 0.0;
  for (double t : targets) ss_tot += (t - target_mean) * (t - target_mean);

  Metrics m;
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  if (ss_tot > 0.0) m.r2 = 1.0 - sq_sum / ss_tot;
  return m;
}

std::vector<FoldSplit> kfold_split(const std::vector<std::string>& subject_ids, std::size_t k,
                                   std::uint64_t seed) {
  if (k == 0) throw DomainError("kfold_split: k must be positive");
  if (subject_ids.size() < k)
    throw DomainError("kfold_split: k = " + std::to_string(k) + " exceeds " +
                      std::to_string(subject_ids.size()) + " subjects");
  std::vector<std::string> shuffled = subject_ids;
  Rng rng = Rng::derive(seed, 0xf01d);
  for (std::size_t i = shuffled.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(shuffled[i - 1], shuffled[j]);
  }
  const std::size_t n = shuffled.size();
  std::vector<FoldSplit> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].test_ids.assign(shuffled.begin() + pos, shuffled.begin() + pos + size);
    pos += size;
  }
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t g = 0; g < k; ++g) {
      if (g == f) continue;
      folds[f].train_ids.insert(folds[f].train_ids.end(), folds[g].test_ids.begin(),
                                folds[g].test_ids.end());
    }
  }
  return folds;
}

void TrainConfig::validate() const {
  model.validate();
  if (folds < 2) throw DomainError("TrainConfig: folds must be >= 2");
  if (max_epochs < 1) throw DomainError("TrainConfig: max_epochs must be >= 1");
  if (batch_size < 1) throw DomainError("TrainConfig: batch_size must be >= 1");
  if (!(base_lr > 0.0)) throw DomainError("TrainConfig: base_lr must be positive");
  if (val_fraction <= 0.0 || val_fraction >= 1.0)
    throw DomainError("TrainConfig: val_fraction must lie in (0, 1)");
}

Dataset Dataset::load(const CohortManifest& manifest) {
  manifest.validate();
  Dataset data;
  std::map<std::string, std::size_t> index_of;
  for (const auto& row : manifest.rows) {
    data.epochs.push_back(manifest.load_row(row));
    auto [it, inserted] = index_of.try_emplace(row.subject_id, data.subjects.size());
    if (inserted) data.subjects.push_back({row.subject_id, row.age, row.label, {}});
    data.subjects[it->second].epoch_indices.push_back(data.epochs.size() - 1);
  }
  return data;
}

const Dataset::Subject& Dataset::subject_by_id(const std::string& id) const {
  for (const auto& s : subjects)
    if (s.id == id) return s;
  throw Error("Dataset: unknown subject '" + id + "'");
}

std::string FoldReport::to_json_line() const {
  json j;
  j["fold"] = fold;
  j["train_loss"] = train_loss;
  j["val_loss"] = val_loss;
  j["stopped_epoch"] = stopped_epoch;
  j["best_epoch"] = best_epoch;
  j["checkpoint"] = checkpoint_path;
  j["mae"] = subject.mae;
  j["rmse"] = subject.rmse;
  j["r2"] = subject.r2 ? json(*subject.r2) : json(nullptr);
  j["epoch_mae"] = epoch.mae;
  j["epoch_rmse"] = epoch.rmse;
  j["epoch_r2"] = epoch.r2 ? json(*epoch.r2) : json(nullptr);
  j["n_train_subjects"] = n_train_subjects;
  j["n_val_subjects"] = n_val_subjects;
  j["n_test_subjects"] = n_test_subjects;
  return j.dump();
}

std::string CvSummary::summary_csv() const {
  std::ostringstream out;
  out << "fold,mae,rmse,r2\n";
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& f : folds) {
    out << f.fold << ',' << fmt(f.subject.mae) << ',' << fmt(f.subject.rmse) << ','
        << (f.subject.r2 ? fmt(*f.subject.r2) : "nan") << '\n';
  }
  out << "mean," << fmt(mae_mean) << ',' << fmt(rmse_mean) << ','
      << (r2_mean ? fmt(*r2_mean) : "nan") << '\n';
  out << "std," << fmt(mae_std) << ',' << fmt(rmse_std) << ',' << (r2_std ? fmt(*r2_std) : "nan")
      << '\n';
  return out.str();
}

namespace {

struct MeanStd {
  double mean = 0.0, sd = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  for (double x : xs) acc += (x - r.mean) * (x - r.mean);
  r.sd = std::sqrt(acc / static_cast<double>(xs.size()));
  return r;
}

FoldReport train_one_fold(const Dataset& data, const TrainConfig& cfg, const FoldSplit& split,
                          std::size_t fold_index, const std::string& run_dir, std::ostream* log,
                          std::mutex* log_mutex) {
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(*log_mutex);
    (*log) << "[fold " << fold_index << "] " << msg << std::endl;
  };

  // Validation subjects come out of the fold's training subjects, seeded.
  std::vector<std::string> train_ids = split.train_ids;
  Rng val_rng = Rng::derive(cfg.seed, 0x11a1 + fold_index);
  for (std::size_t i = train_ids.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(val_rng.next_below(i));
    std::swap(train_ids[i - 1], train_ids[j]);
  }
  std::size_t n_val = static_cast<std::size_t>(
      std::round(cfg.val_fraction * static_cast<double>(train_ids.size())));
  n_val = std::max<std::size_t>(1, std::min(n_val, train_ids.size() - 1));
  std::vector<std::string> val_ids(train_ids.begin(), train_ids.begin() + n_val);
  train_ids.erase(train_ids.begin(), train_ids.begin() + n_val);

  auto collect = [&data](const std::vector<std::string>& ids) {
    std::vector<std::size_t> out;
    for (const auto& id : ids) {
      const auto& subject = data.subject_by_id(id);
      out.insert(out.end(), subject.epoch_indices.begin(), subject.epoch_indices.end());
    }
    return out;
  };
  std::vector<std::size_t> train_samples = collect(train_ids);
  const std::vector<std::size_t> val_samples = collect(val_ids);

  Rng init_rng = Rng::derive(cfg.seed, 0x1417 + fold_index);
  Rng train_rng = Rng::derive(cfg.seed, 0x7a41 + fold_index);
  Rng shuffle_rng = Rng::derive(cfg.seed, 0x54f1 + fold_index);

  EvaNetParams params = EvaNetParams::init(cfg.model, init_rng);
  AdamWConfig opt_cfg;
  opt_cfg.base_lr = cfg.base_lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW optimizer(params.all(), opt_cfg);

  auto val_pred_loss = [&]() {
    double acc = 0.0;
    for (std::size_t idx : val_samples) {
      const EegEpoch& e = data.epochs[idx];
      const double d = forward_eval(e, params, cfg.model).predicted_age - e.age;
      acc += d * d;
    }
    return acc / static_cast<double>(val_samples.size());
  };

  FoldReport report;
  report.fold = fold_index;
  report.n_train_subjects = train_ids.size();
  report.n_val_subjects = val_ids.size();
  report.n_test_subjects = split.test_ids.size();

  EarlyStopper stopper(cfg.patience);
  EvaNetParams best = params.clone();
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.max_epochs, cfg.base_lr, cfg.min_lr);
    for (std::size_t i = train_samples.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.next_below(i));
      std::swap(train_samples[i - 1], train_samples[j]);
    }
    double loss_acc = 0.0;
    for (std::size_t start = 0; start < train_samples.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, train_samples.size());
      std::vector<const EegEpoch*> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(&data.epochs[train_samples[i]]);
      optimizer.zero_grad();
      const LossBreakdown b = forward_train(batch, params, cfg.model, train_rng);
      optimizer.step(lr);
      loss_acc += b.l_total * static_cast<double>(batch.size());
    }
    report.train_loss.push_back(loss_acc / static_cast<double>(train_samples.size()));
    report.val_loss.push_back(val_pred_loss());

    const bool stop = stopper.observe(report.val_loss.back());
    if (stopper.improved_last()) best = params.clone();
    say("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.max_epochs) +
        " train " + std::to_string(report.train_loss.back()) + " val " +
        std::to_string(report.val_loss.back()) + (stopper.improved_last() ? " *" : ""));
    if (stop) break;
  }
  report.stopped_epoch = stopper.epochs_seen();
  report.best_epoch = stopper.best_epoch();
  params = best;

  const fs::path fold_dir = fs::path(run_dir) / ("fold" + std::to_string(fold_index));
  fs::create_directories(fold_dir);
  report.checkpoint_path = (fold_dir / "best.evaw").string();
  params.save(report.checkpoint_path);

  // Held-out fold: epoch-level and subject-level (mean of per-epoch
  // predictions) metrics.
  std::vector<double> epoch_preds, epoch_targets, subject_preds, subject_targets;
  for (const auto& id : split.test_ids) {
    const auto& subject = data.subject_by_id(id);
    double acc = 0.0;
    for (std::size_t idx : subject.epoch_indices) {
      const double pred = forward_eval(data.epochs[idx], params, cfg.model).predicted_age;
      epoch_preds.push_back(pred);
      epoch_targets.push_back(data.epochs[idx].age);
      acc += pred;
    }
    subject_preds.push_back(acc / static_cast<double>(subject.epoch_indices.size()));
    subject_targets.push_back(subject.age);
  }
  report.subject = regression_metrics(subject_preds, subject_targets);
  report.epoch = regression_metrics(epoch_preds, epoch_targets);
  say("test mae " + std::to_string(report.subject.mae) + " rmse " +
      std::to_string(report.subject.rmse) +
      (report.subject.r2 ? " r2 " + std::to_string(*report.subject.r2) : ""));
  return report;
}

}  // namespace

CvSummary run_cv(const Dataset& data, const TrainConfig& cfg, const std::string& run_dir,
                 std::ostream* log) {
  cfg.validate();
  std::vector<std::string> ids;
  ids.reserve(data.subjects.size());
  for (const auto& s : data.subjects) ids.push_back(s.id);
  const std::vector<FoldSplit> splits = kfold_split(ids, cfg.folds, cfg.seed);
  fs::create_directories(run_dir);

  std::size_t workers = cfg.workers;
  if (workers == 0)
    workers = std::max<std::size_t>(
        1, std::min<std::size_t>(cfg.folds, std::thread::hardware_concurrency()));

  CvSummary summary;
  summary.folds.resize(cfg.folds);
  std::mutex log_mutex;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::size_t next_fold = 0;
  std::mutex queue_mutex;

  auto worker = [&]() {
    for (;;) {
      std::size_t fold;
      {
        std::lock_guard<std::mutex> lock(queue_mutex);
        if (next_fold >= cfg.folds) return;
        fold = next_fold++;
      }
      try {
        summary.folds[fold] =
            train_one_fold(data, cfg, splits[fold], fold, run_dir, log, &log_mutex);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) {
          try {
            std::throw_with_nested(Error("run_cv: fold " + std::to_string(fold) + " failed"));
          } catch (...) {
            failure = std::current_exception();
          }
        }
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  for (std::size_t w = 0; w + 1 < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<double> maes, rmses, r2s;
  bool all_r2 = true;
  for (const auto& f : summary.folds) {
    maes.push_back(f.subject.mae);
    rmses.push_back(f.subject.rmse);
    if (f.subject.r2)
      r2s.push_back(*f.subject.r2);
    else
      all_r2 = false;
  }
  const MeanStd mae = mean_std(maes), rmse = mean_std(rmses);
  summary.mae_mean = mae.mean;
  summary.mae_std = mae.sd;
  summary.rmse_mean = rmse.mean;
  summary.rmse_std = rmse.sd;
  if (all_r2 && !r2s.empty()) {
    const MeanStd r2 = mean_std(r2s);
    summary.r2_mean = r2.mean;
    summary.r2_std = r2.sd;
  }

  std::ofstream jl(fs::path(run_dir) / "fold_reports.jsonl");
  for (const auto& f : summary.folds) jl << f.to_json_line() << '\n';
  std::ofstream csv(fs::path(run_dir) / "summary.csv");
  csv << summary.summary_csv();
  return summary;
}

}  // namespace evanet
