#include "evanet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace evanet {

namespace fs = std::filesystem;

std::string to_string(CohortLabel label) {
  switch (label) {
    case CohortLabel::healthy: return "healthy";
    case CohortLabel::mci: return "mci";
    case CohortLabel::ad: return "ad";
  }
  return "healthy";
}

CohortLabel label_from_string(const std::string& s) {
  if (s == "healthy") return CohortLabel::healthy;
  if (s == "mci") return CohortLabel::mci;
  if (s == "ad") return CohortLabel::ad;
  throw ParseError("unknown cohort label '" + s + "' (expected healthy|mci|ad)");
}

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// ---- EegEpoch ----

EegEpoch EegEpoch::create(std::string subject_id, double age, CohortLabel label,
                          std::vector<double> samples) {
  if (samples.size() != kChannels * kSamples) {
    throw ShapeError("EegEpoch: expected " + std::to_string(kChannels) + "x" +
                     std::to_string(kSamples) + " samples, got " +
                     std::to_string(samples.size()) + " values");
  }
  if (!(age > 0.0)) throw DomainError("EegEpoch: age must be positive, got " + std::to_string(age));
  for (double v : samples) {
    if (!std::isfinite(v)) throw DomainError("EegEpoch: non-finite sample value");
  }
  EegEpoch e;
  e.subject_id = std::move(subject_id);
  e.age = age;
  e.label = label;
  e.samples = std::move(samples);
  for (std::size_t c = 0; c < kChannels; ++c) {
    const double p2p = e.peak_to_peak(c);
    if (p2p > kAmplitudeLimitVolts) {
      throw DomainError("EegEpoch: channel " + std::to_string(c) + " peak-to-peak " +
                        std::to_string(p2p * 1e6) + " uV exceeds the 150 uV limit");
    }
  }
  return e;
}

double EegEpoch::peak_to_peak(std::size_t channel) const {
  const double* row = samples.data() + channel * kSamples;
  double lo = row[0], hi = row[0];
  for (std::size_t t = 1; t < kSamples; ++t) {
    lo = std::min(lo, row[t]);
    hi = std::max(hi, row[t]);
  }
  return hi - lo;
}

// ---- epoch file IO ----

namespace {

constexpr char kEpochMagic[4] = {'E', 'V', 'A', 'E'};
constexpr std::uint16_t kEpochVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::string& buf, std::size_t pos) {
  return static_cast<std::uint8_t>(buf[pos]) |
         (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1])) << 8);
}

std::uint32_t get_u32(const std::string& buf, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
  return v;
}

}  // namespace

void write_epoch(const EegEpoch& epoch, const std::string& path) {
  std::string out;
  out.append(kEpochMagic, 4);
  put_u16(out, kEpochVersion);
  put_u16(out, static_cast<std::uint16_t>(EegEpoch::kChannels));
  put_u32(out, static_cast<std::uint32_t>(EegEpoch::kSamples));
  for (double v : epoch.samples) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    put_u32(out, bits);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("write_epoch: cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write_epoch: short write: " + path);
}

EegEpoch read_epoch(const std::string& path, std::string subject_id, double age,
                    CohortLabel label) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_epoch: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 12) throw ParseError("read_epoch: truncated header at offset " +
                                        std::to_string(buf.size()) + " in " + path);
  if (std::memcmp(buf.data(), kEpochMagic, 4) != 0)
    throw ParseError("read_epoch: bad magic at offset 0 in " + path);
  const std::uint16_t version = get_u16(buf, 4);
  if (version != kEpochVersion)
    throw ParseError("read_epoch: unsupported version " + std::to_string(version) +
                     " at offset 4 in " + path);
  const std::size_t n_channels = get_u16(buf, 6);
  const std::size_t n_samples = get_u32(buf, 8);
  if (n_channels != EegEpoch::kChannels || n_samples != EegEpoch::kSamples) {
    throw ParseError("read_epoch: unexpected shape " + std::to_string(n_channels) + "x" +
                     std::to_string(n_samples) + " at offset 6 in " + path);
  }
  const std::size_t need = 12 + 4 * n_channels * n_samples;
  if (buf.size() != need)
    throw ParseError("read_epoch: payload size mismatch (file " + std::to_string(buf.size()) +
                     " bytes, expected " + std::to_string(need) + ") in " + path);

  std::vector<double> samples(n_channels * n_samples);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::uint32_t bits = get_u32(buf, 12 + 4 * i);
    samples[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return EegEpoch::create(std::move(subject_id), age, label, std::move(samples));
}

// ---- manifest ----

void CohortManifest::validate() const {
  std::unordered_set<std::string> paths;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (!(r.age > 0.0))
      throw ParseError("manifest row " + std::to_string(i + 1) + ": nonpositive age");
    if (r.epoch_path.empty())
      throw ParseError("manifest row " + std::to_string(i + 1) + ": empty epoch path");
    if (!paths.insert(r.epoch_path).second)
      throw ParseError("manifest row " + std::to_string(i + 1) + ": duplicate epoch path '" +
                       r.epoch_path + "'");
  }
}

CohortManifest CohortManifest::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("manifest: cannot open: " + path);
  CohortManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line != "subject_id,age,label,epoch_path")
        throw ParseError("manifest: unexpected header '" + line + "' in " + path);
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 4)
      throw ParseError("manifest row " + std::to_string(lineno - 1) + ": expected 4 fields, got " +
                       std::to_string(fields.size()));
    ManifestRow row;
    row.subject_id = fields[0];
    try {
      row.age = std::stod(fields[1]);
    } catch (const std::exception&) {
      throw ParseError("manifest row " + std::to_string(lineno - 1) + ": bad age '" + fields[1] + "'");
    }
    row.label = label_from_string(fields[2]);
    row.epoch_path = fields[3];
    m.rows.push_back(std::move(row));
  }
  m.validate();
  return m;
}

void CohortManifest::save(const std::string& path) const {
  validate();
  std::ostringstream out;
  out << "subject_id,age,label,epoch_path\n";
  for (const auto& r : rows) {
    char age_buf[32];
    std::snprintf(age_buf, sizeof age_buf, "%.17g", r.age);
    out << r.subject_id << ',' << age_buf << ',' << to_string(r.label) << ',' << r.epoch_path
        << '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("manifest: cannot open for writing: " + path);
  f << out.str();
  if (!f) throw IoError("manifest: short write: " + path);
}

std::vector<std::string> CohortManifest::subject_ids() const {
  std::vector<std::string> ids;
  std::unordered_set<std::string> seen;
  for (const auto& r : rows)
    if (seen.insert(r.subject_id).second) ids.push_back(r.subject_id);
  return ids;
}

std::size_t CohortManifest::count_label(CohortLabel label) const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.label == label;
  return n;
}

std::string CohortManifest::resolve(const ManifestRow& row) const {
  if (base_dir.empty() || fs::path(row.epoch_path).is_absolute()) return row.epoch_path;
  return (fs::path(base_dir) / row.epoch_path).string();
}

EegEpoch CohortManifest::load_row(const ManifestRow& row) const {
  return read_epoch(resolve(row), row.subject_id, row.age, row.label);
}

// ---- epoching ----

EpochingResult epoch_and_reject(const std::vector<double>& continuous, std::size_t n_channels,
                                std::size_t n_samples, const std::string& subject_id, double age,
                                CohortLabel label, std::size_t window, double threshold_volts) {
  if (n_channels != EegEpoch::kChannels)
    throw ShapeError("epoch_and_reject: expected " + std::to_string(EegEpoch::kChannels) +
                     " channels, got " + std::to_string(n_channels));
  if (continuous.size() != n_channels * n_samples)
    throw ShapeError("epoch_and_reject: buffer holds " + std::to_string(continuous.size()) +
                     " values, expected " + std::to_string(n_channels * n_samples));
  for (double v : continuous)
    if (!std::isfinite(v)) throw DomainError("epoch_and_reject: non-finite sample");

  EpochingResult result;
  if (n_samples < window) {
    result.warning = "recording shorter than one window (" + std::to_string(n_samples) + " < " +
                     std::to_string(window) + " samples); no epochs produced";
    return result;
  }
  const std::size_t n_windows = n_samples / window;
  for (std::size_t w = 0; w < n_windows; ++w) {
    ++result.windows_formed;
    bool ok = true;
    for (std::size_t c = 0; c < n_channels && ok; ++c) {
      const double* row = continuous.data() + c * n_samples + w * window;
      double lo = row[0], hi = row[0];
      for (std::size_t t = 1; t < window; ++t) {
        lo = std::min(lo, row[t]);
        hi = std::max(hi, row[t]);
      }
      ok = (hi - lo) <= threshold_volts;
    }
    if (!ok) {
      ++result.windows_rejected;
      continue;
    }
    std::vector<double> samples(n_channels * window);
    for (std::size_t c = 0; c < n_channels; ++c)
      std::copy_n(continuous.data() + c * n_samples + w * window, window,
                  samples.data() + c * window);
    result.epochs.push_back(EegEpoch::create(subject_id, age, label, std::move(samples)));
  }
  return result;
}

// ---- synthetic cohort ----

void SynthConfig::validate() const {
  if (n_subjects < 1) throw DomainError("SynthConfig: n_subjects must be >= 1");
  if (epochs_per_subject < 1) throw DomainError("SynthConfig: epochs_per_subject must be >= 1");
  if (!(age_min > 0.0) || !(age_max > age_min))
    throw DomainError("SynthConfig: require 0 < age_min < age_max");
  if (pathology_severity < 0.0) throw DomainError("SynthConfig: severity must be >= 0");
}

CohortLabel SynthConfig::label() const {
  if (pathology_severity <= 0.0) return CohortLabel::healthy;
  return pathology_severity <= 0.5 ? CohortLabel::mci : CohortLabel::ad;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// In-place iterative radix-2 FFT (inverse when sign = +1), n a power of two.
void fft(std::vector<std::complex<double>>& a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * kPi / static_cast<double>(len);
    const std::complex<double> w(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> cur(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * cur;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        cur *= w;
      }
    }
  }
}

// 1/f^chi noise over `len` samples by shaping a random spectrum, unit
// expected rms, samples clipped at ±3 so the waveform is bounded by
// construction.
std::vector<double> power_law_noise(std::size_t len, double chi, double sample_rate, Rng& rng) {
  std::size_t n = 1;
  while (n < len) n <<= 1;
  std::vector<std::complex<double>> spec(n, {0.0, 0.0});
  double expected_sq = 0.0;
  for (std::size_t k = 1; k <= n / 2; ++k) {
    const double freq = sample_rate * static_cast<double>(k) / static_cast<double>(n);
    const double amp = std::pow(freq, -chi / 2.0);
    expected_sq += (k < n / 2 ? 2.0 : 1.0) * amp * amp;
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const std::complex<double> c = amp * std::complex<double>(std::cos(phase), std::sin(phase));
    spec[k] = c;
    if (k < n / 2) spec[n - k] = std::conj(c);
  }
  fft(spec, +1);
  const double scale = 1.0 / std::sqrt(expected_sq);
  std::vector<double> out(len);
  for (std::size_t i = 0; i < len; ++i) {
    const double v = spec[i].real() * scale;
    out[i] = std::min(3.0, std::max(-3.0, v));
  }
  return out;
}

double truncated_normal(Rng& rng, double mean, double sd, double lo, double hi) {
  for (;;) {
    const double v = mean + sd * rng.normal();
    if (v >= lo && v <= hi) return v;
  }
}

}  // namespace

SynthSubject synth_subject(const SynthConfig& cfg, std::size_t subject_index,
                           std::optional<double> forced_age) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.seed, subject_index);

  SynthSubject subject;
  char id[32];
  std::snprintf(id, sizeof id, "s%05zu", subject_index);
  subject.subject_id = id;
  subject.age =
      forced_age ? *forced_age : truncated_normal(rng, 44.3, 16.0, cfg.age_min, cfg.age_max);

  const double severity = cfg.pathology_severity;
  const CohortLabel label = cfg.label();
  const double age01 = (subject.age - 10.0) / 75.0;

  // Subject-level spectral fingerprint. Age codes the alpha peak position
  // (11 Hz -> 8.5 Hz over 10..85 years) and the 1/f^χ background: χ steepens
  // and the background carries more power with age, the slowing course aging
  // EEG shows. Severity trades alpha power for theta/delta power, pushing
  // the spectrum the same low-frequency direction. Bounded components
  // (sinusoids plus ±3-rms-clipped noise) keep every healthy channel under
  // 100 µV peak-to-peak by construction, severity-boosted ones well under
  // the 150 µV rejection limit.
  const double alpha_freq = 11.0 - 2.5 * age01 + 0.1 * rng.normal();
  const double theta_freq = rng.uniform(4.0, 7.0);
  const double chi = 0.5 + 1.8 * age01;
  const double uV = 1e-6;
  const double alpha_amp = 12.0 * uV / (1.0 + 1.5 * severity);
  const double theta_amp = 3.0 * uV * (1.0 + 2.5 * severity);
  const double pink_rms = 5.0 * uV * (0.7 + 0.9 * age01);
  const double white_rms = 1.2 * uV;

  std::vector<double> channel_gain(EegEpoch::kChannels);
  for (double& g : channel_gain) g = rng.uniform(0.85, 1.15);

  const double dt = 1.0 / EegEpoch::kSampleRateHz;
  for (std::size_t e = 0; e < cfg.epochs_per_subject; ++e) {
    std::vector<double> samples(EegEpoch::kChannels * EegEpoch::kSamples);
    for (std::size_t c = 0; c < EegEpoch::kChannels; ++c) {
      const double alpha_phase = rng.uniform(0.0, 2.0 * kPi);
      const double theta_phase = rng.uniform(0.0, 2.0 * kPi);
      const auto pink = power_law_noise(EegEpoch::kSamples, chi, EegEpoch::kSampleRateHz, rng);
      double* row = samples.data() + c * EegEpoch::kSamples;
      const double g = channel_gain[c];
      for (std::size_t t = 0; t < EegEpoch::kSamples; ++t) {
        const double time = static_cast<double>(t) * dt;
        double v = g * alpha_amp * std::sin(2.0 * kPi * alpha_freq * time + alpha_phase);
        v += g * theta_amp * std::sin(2.0 * kPi * theta_freq * time + theta_phase);
        v += pink_rms * pink[t];
        v += white_rms * std::min(3.0, std::max(-3.0, rng.normal()));
        row[t] = v;
      }
    }
    for (double& v : samples) v = quantize_f32(v);
    subject.epochs.push_back(EegEpoch::create(subject.subject_id, subject.age, label,
                                              std::move(samples)));
  }
  return subject;
}

CohortManifest synth_cohort_to_dir(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const fs::path root(out_dir);
  const fs::path manifest_path = root / "manifest.csv";
  if (fs::exists(manifest_path))
    throw IoError("synth: " + manifest_path.string() + " already exists; runs never overwrite");
  fs::create_directories(root / "epochs");

  CohortManifest manifest;
  manifest.base_dir = root.string();
  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    SynthSubject subject = synth_subject(cfg, s);
    for (std::size_t e = 0; e < subject.epochs.size(); ++e) {
      char name[64];
      std::snprintf(name, sizeof name, "epochs/%s_e%03zu.epo", subject.subject_id.c_str(), e);
      write_epoch(subject.epochs[e], (root / name).string());
      manifest.rows.push_back({subject.subject_id, subject.age, subject.epochs[e].label, name});
    }
  }
  manifest.save(manifest_path.string());
  return manifest;
}

}  // namespace evanet
