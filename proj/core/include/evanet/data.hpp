#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evanet/error.hpp"
#include "evanet/rng.hpp"

namespace evanet {

enum class CohortLabel { healthy, mci, ad };

std::string to_string(CohortLabel label);
CohortLabel label_from_string(const std::string& s);

// One 19-channel, 4-second window at 250 Hz. Samples are volts, row-major
// with channels outer. Construction through create() enforces the type
// invariants; epochs that fail them never exist.
struct EegEpoch {
  static constexpr std::size_t kChannels = 19;
  static constexpr std::size_t kSamples = 1000;
  static constexpr double kSampleRateHz = 250.0;
  static constexpr double kAmplitudeLimitVolts = 150e-6;  // peak-to-peak, per channel

  std::string subject_id;
  double age = 0.0;
  CohortLabel label = CohortLabel::healthy;
  std::vector<double> samples;  // kChannels × kSamples

  static EegEpoch create(std::string subject_id, double age, CohortLabel label,
                         std::vector<double> samples);

  double sample(std::size_t channel, std::size_t t) const {
    return samples[channel * kSamples + t];
  }
  double peak_to_peak(std::size_t channel) const;
};

// Epoch binary file: magic "EVAE", version u16, n_channels u16, n_samples u32,
// little-endian f32 samples (channels outer). f32 on disk, f64 in memory.
void write_epoch(const EegEpoch& epoch, const std::string& path);
EegEpoch read_epoch(const std::string& path, std::string subject_id = "", double age = 1.0,
                    CohortLabel label = CohortLabel::healthy);

// Quantize to the nearest f32 so a write/read cycle is bit-exact.
double quantize_f32(double v);

struct ManifestRow {
  std::string subject_id;
  double age = 0.0;
  CohortLabel label = CohortLabel::healthy;
  std::string epoch_path;  // relative to the manifest's directory
};

struct CohortManifest {
  std::vector<ManifestRow> rows;
  std::string base_dir;  // set by load(); joined with row paths

  static CohortManifest load(const std::string& path);
  void save(const std::string& path) const;
  void validate() const;  // duplicate (subject, path) pairs, ages, labels

  std::vector<std::string> subject_ids() const;  // unique, first-appearance order
  std::size_t count_label(CohortLabel label) const;
  std::string resolve(const ManifestRow& row) const;
  EegEpoch load_row(const ManifestRow& row) const;
};

// §-style epoching of a continuous recording: non-overlapping windows, any
// window whose per-channel peak-to-peak exceeds the threshold is dropped,
// the trailing remainder is dropped.
struct EpochingResult {
  std::vector<EegEpoch> epochs;
  std::size_t windows_formed = 0;
  std::size_t windows_rejected = 0;
  std::string warning;  // set when the recording is shorter than one window
};

EpochingResult epoch_and_reject(const std::vector<double>& continuous, std::size_t n_channels,
                                std::size_t n_samples, const std::string& subject_id, double age,
                                CohortLabel label, std::size_t window = EegEpoch::kSamples,
                                double threshold_volts = EegEpoch::kAmplitudeLimitVolts);

struct SynthConfig {
  std::size_t n_subjects = 100;
  double age_min = 10.0;
  double age_max = 85.0;
  std::size_t epochs_per_subject = 30;
  std::uint64_t seed = 0;
  double pathology_severity = 0.0;  // 0 = healthy; > 0 injects slowing

  void validate() const;
  CohortLabel label() const;  // healthy / mci (0 < s <= 0.5) / ad (s > 0.5)
};

// Synthetic subject: age drawn from a truncated normal (mean 44.3, sd 16)
// and epochs built as alpha oscillation (peak 11 Hz at age 10 falling to
// 8.5 Hz at age 85) + 1/f^χ background with χ rising with age + white sensor
// noise. Severity scales theta/delta power up and alpha power down.
// Subject k is reproducible in isolation from (seed, k).
struct SynthSubject {
  std::string subject_id;
  double age = 0.0;
  std::vector<EegEpoch> epochs;
};

// forced_age pins the subject's age instead of drawing it (spectral tests).
SynthSubject synth_subject(const SynthConfig& cfg, std::size_t subject_index,
                           std::optional<double> forced_age = std::nullopt);

// Generate a whole cohort to disk: epochs/*.epo plus manifest.csv. The
// output directory must not already contain a manifest (runs never overwrite).
CohortManifest synth_cohort_to_dir(const SynthConfig& cfg, const std::string& out_dir);

}  // namespace evanet
