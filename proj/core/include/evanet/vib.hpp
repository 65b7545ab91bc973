#pragma once

#include <cstdint>
#include <utility>

#include "evanet/rng.hpp"
#include "evanet/tensor.hpp"

namespace evanet {

// Gaussian posterior heads over the encoder state, reparameterized sampling,
// and the closed-form KL to a standard normal prior.

struct VibParams {
  Tensor w_mu, b_mu;        // [d_model × d], [d]
  Tensor w_sigma, b_sigma;  // log-variance head
};

VibParams init_vib_params(std::size_t d_model, std::size_t latent_dim, Rng& rng);

// log σ² is clamped to [-10, 10] so the KL term stays finite.
constexpr double kLogVarClamp = 10.0;

// Two independent affine maps of H: (μ, clamped log σ²).
std::pair<Tensor, Tensor> vib_heads(const Tensor& h, const VibParams& params);

// Z = μ + exp(0.5 · log σ²) ⊙ ε with ε drawn from rng; gradient flows to μ
// and log σ², never to ε.
Tensor reparameterize(const Tensor& mu, const Tensor& log_var, Rng& rng);
Tensor reparameterize_with(const Tensor& mu, const Tensor& log_var, const Tensor& epsilon);

// ½ Σ_j (σ² + μ² − log σ² − 1); nonnegative, zero iff μ = 0 and log σ² = 0.
Tensor kl_loss(const Tensor& mu, const Tensor& log_var);

// The (μ, log σ², Z) triple for one epoch, with the seed that produced ε.
struct LatentCode {
  Tensor mu;
  Tensor log_var;
  Tensor z;
  std::uint64_t epsilon_seed = 0;
};

// Z drawn from the recorded seed, so the triple is reconstructible.
LatentCode make_latent_code(const Tensor& mu, const Tensor& log_var, std::uint64_t epsilon_seed);

}  // namespace evanet
