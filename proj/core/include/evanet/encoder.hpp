#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evanet/data.hpp"
#include "evanet/tensor.hpp"

namespace evanet {

enum class AttentionMode { exact_full, probsparse_exact_measure, probsparse_sampled_measure };

std::string to_string(AttentionMode mode);
AttentionMode attention_mode_from_string(const std::string& s);

struct EncoderConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 8;
  double sampling_factor = 5.0;  // c
  std::size_t ff_width = 0;      // 0 means 4 * d_model
  AttentionMode attention_mode = AttentionMode::probsparse_sampled_measure;
  std::size_t seq_len = 1000;
  std::size_t n_channels = EegEpoch::kChannels;
  // Raw volts are ~1e-5; scale them to O(1) before the input projection.
  double input_scale = 4e5;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t feedforward_width() const { return ff_width == 0 ? 4 * d_model : ff_width; }
  std::size_t top_u() const;          // min(T, ceil(c ln T)), >= 1
  std::size_t measure_keys() const;   // keys sampled for the measure estimate
  void validate() const;
};

// Per-head record of what the sparse step selected, plus the cost counters
// used by the complexity acceptance test and the bench subcommand.
struct AttentionDiagnostics {
  std::vector<std::vector<std::size_t>> selected_per_head;  // ascending indices
  std::vector<std::vector<double>> measure_per_head;        // M̄ per query
  std::uint64_t mac_count = 0;
  double wall_ms = 0.0;
};

// Per-timepoint projection of the channel vector to d_model (bias-free),
// plus additive sinusoidal positional encoding.
Tensor temporal_embed(const EegEpoch& epoch, const EncoderConfig& cfg, const Tensor& embed_w);

// PE(t, 2k) = sin(t / 10000^(2k/d)), PE(t, 2k+1) = cos(·); cached per shape.
const Tensor& positional_encoding(std::size_t seq_len, std::size_t d_model);

// O(T²) reference: Softmax(QKᵀ/√d_k)·V.
Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                      std::uint64_t* macs = nullptr);

// Max-minus-mean score of each query over the provided key subset.
std::vector<double> sparsity_measure(const Tensor& q, const Tensor& k_subset,
                                     std::uint64_t* macs = nullptr);

struct ProbSparseResult {
  Tensor output;
  std::vector<std::size_t> selected;  // ascending, size u
  std::vector<double> measure;        // per query
  std::uint64_t mac_count = 0;
};

// Exact attention rows for the top-u queries by sparsity measure; every other
// row carries the column mean of V. `measure_keys` = 0 scores against all
// keys (exact measure); otherwise that many keys are sampled without
// replacement. Ties break by ascending query index.
ProbSparseResult probsparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                      std::size_t u, std::size_t measure_keys, Rng& rng);

struct EncoderLayerParams {
  std::vector<Tensor> wq, wk, wv;  // per head, [d_model × d_k]
  Tensor wo, bo;                   // [d_model × d_model], [d_model]
  Tensor ln1_gain, ln1_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor ln2_gain, ln2_bias;
};

struct EncoderParams {
  Tensor embed_w;  // [n_channels × d_model]
  std::vector<EncoderLayerParams> layers;
};

EncoderParams init_encoder_params(const EncoderConfig& cfg, Rng& rng);

// L layers of (multi-head attention → residual + layer norm → position-wise
// feedforward → residual + layer norm), then mean over the time axis: H_i.
Tensor encoder_forward(const EegEpoch& epoch, const EncoderConfig& cfg,
                       const EncoderParams& params, Rng& rng,
                       AttentionDiagnostics* diagnostics = nullptr);

}  // namespace evanet
