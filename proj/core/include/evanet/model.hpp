#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evanet/checkpoint.hpp"
#include "evanet/data.hpp"
#include "evanet/encoder.hpp"
#include "evanet/prototype.hpp"
#include "evanet/vib.hpp"

namespace evanet {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t latent_dim = 64;     // d
  std::size_t age_embed_dim = 64;  // d_age
  std::size_t prototype_hidden = 128;
  double beta = 1e-3;   // weight of L_IB
  double gamma = 0.7;   // weight of L_align
  bool no_vib = false;    // ablation: β = 0 and Z := μ (no sampling)
  bool no_align = false;  // ablation: γ = 0 and the prototype net is skipped

  void validate() const;
};

struct HeadParams {
  Tensor w1, b1;  // d → 64
  Tensor w2, b2;  // 64 → 32
  Tensor w3, b3;  // 32 → 1
};

HeadParams init_head_params(std::size_t latent_dim, Rng& rng);

// Scalar age regression from the latent code.
Tensor predict_head(const Tensor& z, const HeadParams& params);

// Every trainable tensor, named for checkpointing. Weights start uniform in
// ±1/√fan_in, biases at zero, layer-norm gains at one, all from one seeded
// stream so initialization is reproducible.
struct EvaNetParams {
  EncoderParams encoder;
  VibParams vib;
  PrototypeParams prototype;
  HeadParams head;

  static EvaNetParams init(const ModelConfig& cfg, Rng& rng);

  NamedTensors named() const;  // stable order, stable names
  std::vector<Tensor> all() const;
  void zero_grad();
  EvaNetParams clone() const;  // detached value copy, still trainable
  void load_from(const NamedTensors& tensors);  // by name, shapes must match

  void save(const std::string& path) const { save_checkpoint(path, named()); }
  void load(const std::string& path) { load_from(load_checkpoint(path)); }
};

struct LossBreakdown {
  double l_pred = 0.0;
  double l_ib = 0.0;
  double l_align = 0.0;
  double l_total = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
};

// One training step's forward/backward over a batch: per-sample graphs are
// built, backpropagated with a 1/N scale and freed, so parameter gradients
// accumulate to the gradient of the batch-mean composite loss. Returns the
// batch-mean breakdown with l_total = l_pred + β·l_ib + γ·l_align exactly.
LossBreakdown forward_train(const std::vector<const EegEpoch*>& batch, EvaNetParams& params,
                            const ModelConfig& cfg, Rng& rng);

struct EvalOutput {
  double predicted_age = 0.0;
  Tensor z;    // [d], deterministic (Z := μ)
  Tensor p_y;  // [d]; empty tensor when no_align is set
};

// Deterministic evaluation pass: everything BAG/PAE need.
EvalOutput forward_eval(const EegEpoch& epoch, const EvaNetParams& params, const ModelConfig& cfg);

}  // namespace evanet
