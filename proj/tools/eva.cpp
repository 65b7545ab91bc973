// eva: synthesize cohorts, train with cross-validation, evaluate, score
// anomalies, and benchmark attention scaling. One binary, five subcommands.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "evanet/anomaly.hpp"
#include "evanet/config.hpp"
#include "evanet/data.hpp"
#include "evanet/model.hpp"
#include "evanet/training.hpp"

using namespace evanet;
namespace fs = std::filesystem;

namespace {

struct UsageError : Error {
  using Error::Error;
};

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

// Timestamped, append-only run directory under `base`.
std::string make_run_dir(const std::string& base, const std::string& command) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  for (int k = 0;; ++k) {
    fs::path dir = fs::path(base) / (command + "-" + stamp + (k ? "-" + std::to_string(k) : ""));
    if (!fs::exists(dir)) {
      fs::create_directories(dir);
      return dir.string();
    }
  }
}

// Every tunable named in the configuration surface, with its default.
const std::vector<std::pair<std::string, std::string>>& known_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"seed", "0"},
      {"folds", "10"},
      {"max_epochs", "200"},
      {"batch_size", "64"},
      {"lr", "0.0001"},
      {"min_lr", "0"},
      {"weight_decay", "1e-05"},
      {"patience", "20"},
      {"val_fraction", "0.1"},
      {"workers", "0"},
      {"d_model", "128"},
      {"layers", "4"},
      {"heads", "8"},
      {"sampling_factor", "5"},
      {"ff_width", "0"},
      {"attention_mode", "probsparse_sampled_measure"},
      {"input_scale", "400000"},
      {"latent_dim", "64"},
      {"age_embed_dim", "64"},
      {"prototype_hidden", "128"},
      {"beta", "0.001"},
      {"gamma", "0.7"},
      {"no_vib", "false"},
      {"no_align", "false"},
  };
  return keys;
}

KeyValueConfig load_config_file(const std::string& path) {
  KeyValueConfig kv = KeyValueConfig::parse_file(path);
  for (const auto& key : kv.keys()) {
    bool known = false;
    for (const auto& [k, d] : known_keys()) known = known || k == key;
    if (!known) throw UsageError("config: unknown key '" + key + "' in " + path);
  }
  return kv;
}

ModelConfig model_config_from(const KeyValueConfig& kv) {
  ModelConfig cfg;
  cfg.encoder.d_model = kv.get_size("d_model", 128);
  cfg.encoder.n_layers = kv.get_size("layers", 4);
  cfg.encoder.n_heads = kv.get_size("heads", 8);
  cfg.encoder.sampling_factor = kv.get_double("sampling_factor", 5.0);
  cfg.encoder.ff_width = kv.get_size("ff_width", 0);
  cfg.encoder.attention_mode =
      attention_mode_from_string(kv.get_string("attention_mode", "probsparse_sampled_measure"));
  cfg.encoder.input_scale = kv.get_double("input_scale", 4e5);
  cfg.latent_dim = kv.get_size("latent_dim", 64);
  cfg.age_embed_dim = kv.get_size("age_embed_dim", 64);
  cfg.prototype_hidden = kv.get_size("prototype_hidden", 128);
  cfg.beta = kv.get_double("beta", 1e-3);
  cfg.gamma = kv.get_double("gamma", 0.7);
  cfg.no_vib = kv.get_bool("no_vib", false);
  cfg.no_align = kv.get_bool("no_align", false);
  if (cfg.no_align && cfg.gamma > 0.0)
    throw UsageError("no_align = true conflicts with gamma > 0; drop one");
  if (cfg.no_vib && cfg.beta > 0.0)
    throw UsageError("no_vib = true conflicts with beta > 0; drop one");
  return cfg;
}

TrainConfig train_config_from(const KeyValueConfig& kv) {
  TrainConfig cfg;
  cfg.model = model_config_from(kv);
  cfg.folds = kv.get_size("folds", 10);
  cfg.max_epochs = kv.get_size("max_epochs", 200);
  cfg.batch_size = kv.get_size("batch_size", 64);
  cfg.base_lr = kv.get_double("lr", 1e-4);
  cfg.min_lr = kv.get_double("min_lr", 0.0);
  cfg.weight_decay = kv.get_double("weight_decay", 1e-5);
  cfg.patience = kv.get_size("patience", 20);
  cfg.val_fraction = kv.get_double("val_fraction", 0.1);
  cfg.seed = kv.get_u64("seed", 0);
  cfg.workers = kv.get_size("workers", 0);
  return cfg;
}

// Full echo: every known key at its effective value.
std::string resolved_config_text(const KeyValueConfig& kv) {
  KeyValueConfig full;
  for (const auto& [key, fallback] : known_keys())
    full.set(key, kv.has(key) ? kv.get_string(key, fallback) : fallback);
  return full.render();
}

struct CommonOpts {
  std::string config_path;
  KeyValueConfig kv;
};

// Registers --config plus per-key override flags; returns a callback that
// resolves file < flags into opts.kv after parsing.
void add_config_options(CLI::App* cmd, CommonOpts& opts,
                        std::map<std::string, std::pair<CLI::Option*, std::string*>>& overrides) {
  cmd->add_option("--config", opts.config_path, "key = value configuration file");
  for (const auto& [key, fallback] : known_keys()) {
    auto* storage = new std::string(fallback);  // lives for the process
    CLI::Option* opt =
        cmd->add_option("--" + key, *storage, "override config key '" + key + "'");
    overrides[key] = {opt, storage};
  }
}

KeyValueConfig resolve_config(const CommonOpts& opts,
                              const std::map<std::string, std::pair<CLI::Option*, std::string*>>&
                                  overrides) {
  KeyValueConfig kv =
      opts.config_path.empty() ? KeyValueConfig() : load_config_file(opts.config_path);
  for (const auto& [key, pair] : overrides) {
    if (pair.first->count() > 0) kv.set(key, *pair.second);
  }
  return kv;
}

Dataset load_dataset(const std::string& manifest_path) {
  return Dataset::load(CohortManifest::load(manifest_path));
}

int cmd_synth(std::size_t subjects, std::size_t epochs, std::uint64_t seed, double severity,
              const std::string& out_dir) {
  SynthConfig cfg;
  cfg.n_subjects = subjects;
  cfg.epochs_per_subject = epochs;
  cfg.seed = seed;
  cfg.pathology_severity = severity;
  CohortManifest manifest = synth_cohort_to_dir(cfg, out_dir);
  KeyValueConfig echo;
  echo.set("subjects", std::to_string(subjects));
  echo.set("epochs", std::to_string(epochs));
  echo.set("seed", std::to_string(seed));
  echo.set("severity", fmt_double(severity));
  write_text(fs::path(out_dir) / "resolved.config", echo.render());
  std::cout << "wrote " << manifest.rows.size() << " epochs for " << subjects << " subjects ("
            << to_string(cfg.label()) << ") under " << out_dir << "\n";
  return 0;
}

int cmd_train(const KeyValueConfig& kv, const std::string& manifest_path,
              const std::string& out_base, bool quiet) {
  TrainConfig cfg = train_config_from(kv);
  const std::string run_dir = make_run_dir(out_base, "train");
  write_text(fs::path(run_dir) / "resolved.config", resolved_config_text(kv));
  Dataset data = load_dataset(manifest_path);
  std::cout << "run dir: " << run_dir << "\n"
            << "subjects: " << data.subjects.size() << ", epochs: " << data.epochs.size() << "\n";
  CvSummary summary = run_cv(data, cfg, run_dir, quiet ? nullptr : &std::cout);
  std::cout << "cv mae " << summary.mae_mean << " ± " << summary.mae_std << ", rmse "
            << summary.rmse_mean << " ± " << summary.rmse_std;
  if (summary.r2_mean) std::cout << ", r2 " << *summary.r2_mean << " ± " << *summary.r2_std;
  std::cout << "\nreports: " << run_dir << "/fold_reports.jsonl\n";
  return 0;
}

int cmd_eval(const KeyValueConfig& kv, const std::string& checkpoint,
             const std::string& manifest_path, const std::string& out_base) {
  ModelConfig cfg = model_config_from(kv);
  Rng init(kv.get_u64("seed", 0));
  EvaNetParams params = EvaNetParams::init(cfg, init);
  params.load(checkpoint);
  Dataset data = load_dataset(manifest_path);

  const std::string run_dir = make_run_dir(out_base, "eval");
  write_text(fs::path(run_dir) / "resolved.config", resolved_config_text(kv));

  std::ostringstream epoch_csv;
  epoch_csv << "subject_id,age,epoch_index,pred\n";
  std::ostringstream subject_csv;
  subject_csv << "subject_id,age,pred\n";
  std::vector<double> subj_preds, subj_ages, epoch_preds, epoch_ages;
  for (const auto& subject : data.subjects) {
    double acc = 0.0;
    for (std::size_t k = 0; k < subject.epoch_indices.size(); ++k) {
      const double pred =
          forward_eval(data.epochs[subject.epoch_indices[k]], params, cfg).predicted_age;
      epoch_csv << subject.id << ',' << fmt_double(subject.age) << ',' << k << ','
                << fmt_double(pred) << '\n';
      epoch_preds.push_back(pred);
      epoch_ages.push_back(subject.age);
      acc += pred;
    }
    const double mean = acc / static_cast<double>(subject.epoch_indices.size());
    subject_csv << subject.id << ',' << fmt_double(subject.age) << ',' << fmt_double(mean) << '\n';
    subj_preds.push_back(mean);
    subj_ages.push_back(subject.age);
  }
  write_text(fs::path(run_dir) / "epoch_predictions.csv", epoch_csv.str());
  write_text(fs::path(run_dir) / "subject_predictions.csv", subject_csv.str());

  const Metrics subject = regression_metrics(subj_preds, subj_ages);
  const Metrics epoch = regression_metrics(epoch_preds, epoch_ages);
  std::ostringstream metrics;
  metrics << "level,mae,rmse,r2\n";
  metrics << "subject," << fmt_double(subject.mae) << ',' << fmt_double(subject.rmse) << ','
          << (subject.r2 ? fmt_double(*subject.r2) : "nan") << '\n';
  metrics << "epoch," << fmt_double(epoch.mae) << ',' << fmt_double(epoch.rmse) << ','
          << (epoch.r2 ? fmt_double(*epoch.r2) : "nan") << '\n';
  write_text(fs::path(run_dir) / "metrics.csv", metrics.str());
  std::cout << "subject-level mae " << subject.mae << " rmse " << subject.rmse;
  if (subject.r2) std::cout << " r2 " << *subject.r2;
  std::cout << "\nrun dir: " << run_dir << "\n";
  return 0;
}

int cmd_score(const KeyValueConfig& kv, const std::string& checkpoint,
              const std::string& healthy_path, const std::vector<std::string>& pathological_paths,
              bool violin, const std::string& out_base) {
  ModelConfig cfg = model_config_from(kv);
  Rng init(kv.get_u64("seed", 0));
  EvaNetParams params = EvaNetParams::init(cfg, init);
  params.load(checkpoint);

  Dataset healthy = load_dataset(healthy_path);
  Dataset pathological;
  for (const auto& path : pathological_paths) {
    Dataset part = load_dataset(path);
    const std::size_t base = pathological.epochs.size();
    pathological.epochs.insert(pathological.epochs.end(), part.epochs.begin(), part.epochs.end());
    for (auto subject : part.subjects) {
      for (auto& idx : subject.epoch_indices) idx += base;
      pathological.subjects.push_back(std::move(subject));
    }
  }

  const std::string run_dir = make_run_dir(out_base, "score");
  write_text(fs::path(run_dir) / "resolved.config", resolved_config_text(kv));
  AnomalyReport report = score_cohorts(params, cfg, healthy,
                                       pathological.subjects.empty() ? nullptr : &pathological);
  write_text(fs::path(run_dir) / "subject_scores.csv", report.per_subject_csv());
  write_text(fs::path(run_dir) / "cohort_summary.csv", report.cohort_summary_csv());
  write_text(fs::path(run_dir) / "significance.txt", report.significance_table());
  if (violin) write_text(fs::path(run_dir) / "violin.csv", report.violin_long_csv());
  std::cout << report.cohort_summary_csv() << report.significance_table()
            << "run dir: " << run_dir << "\n";
  return 0;
}

int cmd_bench(const std::string& lengths_csv, const std::string& modes_csv, std::size_t head_dim,
              double sampling_factor, std::uint64_t seed, const std::string& out_base) {
  std::vector<std::size_t> lengths;
  {
    std::stringstream ss(lengths_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      lengths.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  std::vector<std::string> modes;
  {
    std::stringstream ss(modes_csv);
    std::string item;
    while (std::getline(ss, item, ',')) modes.push_back(item);
  }
  if (lengths.empty() || modes.empty()) throw UsageError("bench: empty --lengths or --modes");

  const std::string run_dir = make_run_dir(out_base, "bench");
  {
    KeyValueConfig echo;
    echo.set("lengths", lengths_csv);
    echo.set("modes", modes_csv);
    echo.set("head_dim", std::to_string(head_dim));
    echo.set("sampling_factor", fmt_double(sampling_factor));
    echo.set("seed", std::to_string(seed));
    write_text(fs::path(run_dir) / "resolved.config", echo.render());
  }
  std::ostringstream csv;
  csv << "mode,T,u,mac_count,wall_ms\n";
  for (const auto& mode_name : modes) {
    const AttentionMode mode = attention_mode_from_string(mode_name);
    for (std::size_t t : lengths) {
      Rng rng(seed + t);
      Tensor q = Tensor::uniform({t, head_dim}, -1, 1, rng);
      Tensor k = Tensor::uniform({t, head_dim}, -1, 1, rng);
      Tensor v = Tensor::uniform({t, head_dim}, -1, 1, rng);
      const std::size_t u = std::max<std::size_t>(
          1, std::min<std::size_t>(
                 t, static_cast<std::size_t>(
                        std::ceil(sampling_factor * std::log(static_cast<double>(t))))));
      std::uint64_t macs = 0;
      const auto start = std::chrono::steady_clock::now();
      std::size_t u_used = t;
      if (mode == AttentionMode::exact_full) {
        full_attention(q, k, v, &macs);
      } else {
        Rng attn_rng(seed ^ t);
        const std::size_t measure_keys =
            mode == AttentionMode::probsparse_exact_measure ? 0 : u;
        ProbSparseResult r = probsparse_attention(q, k, v, u, measure_keys, attn_rng);
        macs = r.mac_count;
        u_used = u;
      }
      const double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
              .count();
      csv << mode_name << ',' << t << ',' << u_used << ',' << macs << ',' << fmt_double(wall_ms)
          << '\n';
    }
  }
  write_text(fs::path(run_dir) / "bench.csv", csv.str());
  std::cout << csv.str() << "run dir: " << run_dir << "\n";
  return 0;
}

int cmd_trajectory(const KeyValueConfig& kv, const std::string& checkpoint, double age_min,
                   double age_max, double step, const std::string& out_base) {
  if (!(age_min > 0.0) || !(age_max > age_min) || !(step > 0.0))
    throw UsageError("trajectory: require 0 < age-min < age-max and step > 0");
  ModelConfig cfg = model_config_from(kv);
  Rng init(kv.get_u64("seed", 0));
  EvaNetParams params = EvaNetParams::init(cfg, init);
  params.load(checkpoint);
  std::vector<double> grid;
  for (double y = age_min; y <= age_max + 1e-12; y += step) grid.push_back(y);
  const std::string run_dir = make_run_dir(out_base, "trajectory");
  write_text(fs::path(run_dir) / "resolved.config", resolved_config_text(kv));
  write_text(fs::path(run_dir) / "trajectory.csv",
             trajectory_csv(trajectory_dump(params.prototype, grid)));
  std::cout << "trajectory over " << grid.size() << " ages -> " << run_dir << "/trajectory.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EVA-Net: efficient variational alignment network for EEG brain age"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic EEG cohort");
  std::size_t subjects = 100, synth_epochs = 30;
  std::uint64_t synth_seed = 0;
  double severity = 0.0;
  std::string synth_out = "cohort";
  synth->add_option("--subjects", subjects, "number of subjects");
  synth->add_option("--epochs", synth_epochs, "epochs per subject");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--severity", severity, "pathology severity (0 = healthy)");
  synth->add_option("--out-dir", synth_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "k-fold cross-validated training");
  CommonOpts train_opts;
  std::map<std::string, std::pair<CLI::Option*, std::string*>> train_over;
  add_config_options(train, train_opts, train_over);
  std::string train_manifest, train_out = "runs";
  bool quiet = false;
  train->add_option("--manifest", train_manifest, "cohort manifest CSV")->required();
  train->add_option("--out", train_out, "base directory for run directories");
  train->add_flag("--quiet", quiet, "suppress per-epoch progress");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  CommonOpts eval_opts;
  std::map<std::string, std::pair<CLI::Option*, std::string*>> eval_over;
  add_config_options(eval, eval_opts, eval_over);
  std::string eval_ckpt, eval_manifest, eval_out = "runs";
  eval->add_option("--checkpoint", eval_ckpt, "EVAW checkpoint")->required();
  eval->add_option("--manifest", eval_manifest, "cohort manifest CSV")->required();
  eval->add_option("--out", eval_out, "base directory for run directories");

  // score
  auto* score = app.add_subcommand("score", "BAG/PAE anomaly report over cohorts");
  CommonOpts score_opts;
  std::map<std::string, std::pair<CLI::Option*, std::string*>> score_over;
  add_config_options(score, score_opts, score_over);
  std::string score_ckpt, score_healthy, score_out = "runs";
  std::vector<std::string> score_pathological;
  bool violin = false;
  score->add_option("--checkpoint", score_ckpt, "EVAW checkpoint")->required();
  score->add_option("--healthy", score_healthy, "healthy manifest CSV")->required();
  score->add_option("--pathological", score_pathological, "pathological manifest CSV (repeatable)");
  score->add_flag("--violin", violin, "emit violin-plot-ready long-format CSV");
  score->add_option("--out", score_out, "base directory for run directories");

  // bench
  auto* bench = app.add_subcommand("bench", "attention scaling benchmark");
  std::string lengths = "500,1000,2000,4000";
  std::string modes = "exact_full,probsparse_sampled_measure";
  std::size_t head_dim = 16;
  double bench_c = 5.0;
  std::uint64_t bench_seed = 0;
  std::string bench_out = "runs";
  bench->add_option("--lengths", lengths, "comma-separated sequence lengths");
  bench->add_option("--modes", modes, "comma-separated attention modes");
  bench->add_option("--head-dim", head_dim, "per-head dimension");
  bench->add_option("--sampling-factor", bench_c, "sampling factor c");
  bench->add_option("--seed", bench_seed, "input seed");
  bench->add_option("--out", bench_out, "base directory for run directories");

  // trajectory
  auto* traj = app.add_subcommand("trajectory", "dump the learned prototype trajectory");
  CommonOpts traj_opts;
  std::map<std::string, std::pair<CLI::Option*, std::string*>> traj_over;
  add_config_options(traj, traj_opts, traj_over);
  std::string traj_ckpt, traj_out = "runs";
  double age_min = 10.0, age_max = 85.0, age_step = 1.0;
  traj->add_option("--checkpoint", traj_ckpt, "EVAW checkpoint")->required();
  traj->add_option("--age-min", age_min, "grid start (years)");
  traj->add_option("--age-max", age_max, "grid end (years)");
  traj->add_option("--step", age_step, "grid step (years)");
  traj->add_option("--out", traj_out, "base directory for run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (synth->parsed())
      return cmd_synth(subjects, synth_epochs, synth_seed, severity, synth_out);
    if (train->parsed())
      return cmd_train(resolve_config(train_opts, train_over), train_manifest, train_out, quiet);
    if (eval->parsed())
      return cmd_eval(resolve_config(eval_opts, eval_over), eval_ckpt, eval_manifest, eval_out);
    if (score->parsed())
      return cmd_score(resolve_config(score_opts, score_over), score_ckpt, score_healthy,
                       score_pathological, violin, score_out);
    if (bench->parsed())
      return cmd_bench(lengths, modes, head_dim, bench_c, bench_seed, bench_out);
    if (traj->parsed())
      return cmd_trajectory(resolve_config(traj_opts, traj_over), traj_ckpt, age_min, age_max,
                            age_step, traj_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
