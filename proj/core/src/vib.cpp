#include "evanet/vib.hpp"

#include <cmath>

namespace evanet {

VibParams init_vib_params(std::size_t d_model, std::size_t latent_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  VibParams p;
  p.w_mu = Tensor::uniform({d_model, latent_dim}, -bound, bound, rng, true);
  p.b_mu = Tensor::zeros({latent_dim}, true);
  p.w_sigma = Tensor::uniform({d_model, latent_dim}, -bound, bound, rng, true);
  // A zero bias starts σ near 1, and that much latent noise swamps the μ
  // signal (|μ| per dim ≈ 0.3 at init) until the optimizer has spent
  // hundreds of steps shrinking it. Start σ ≈ e⁻² instead.
  p.b_sigma = Tensor::full({latent_dim}, -4.0, true);
  return p;
}

std::pair<Tensor, Tensor> vib_heads(const Tensor& h, const VibParams& params) {
  if (h.rank() != 1 || h.dim(0) != params.w_mu.dim(0))
    throw ShapeError("vib_heads: H must be [" + std::to_string(params.w_mu.dim(0)) + "], got " +
                     shape_to_string(h.shape()));
  Tensor mu = add(matmul(h, params.w_mu), params.b_mu);
  Tensor log_var = clamp(add(matmul(h, params.w_sigma), params.b_sigma),
                         -kLogVarClamp, kLogVarClamp);
  return {mu, log_var};
}

Tensor reparameterize_with(const Tensor& mu, const Tensor& log_var, const Tensor& epsilon) {
  if (mu.shape() != log_var.shape() || mu.shape() != epsilon.shape())
    throw ShapeError("reparameterize: shape mismatch " + shape_to_string(mu.shape()) + " vs " +
                     shape_to_string(log_var.shape()));
  Tensor sigma = exp(scale(log_var, 0.5));
  return add(mu, mul(sigma, epsilon));
}

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, Rng& rng) {
  return reparameterize_with(mu, log_var, Tensor::gaussian(mu.shape(), rng));
}

LatentCode make_latent_code(const Tensor& mu, const Tensor& log_var,
                            std::uint64_t epsilon_seed) {
  LatentCode code;
  code.mu = mu;
  code.log_var = log_var;
  Rng rng(epsilon_seed);
  code.z = reparameterize(mu, log_var, rng);
  code.epsilon_seed = epsilon_seed;
  return code;
}

Tensor kl_loss(const Tensor& mu, const Tensor& log_var) {
  if (mu.shape() != log_var.shape())
    throw ShapeError("kl_loss: shape mismatch " + shape_to_string(mu.shape()) + " vs " +
                     shape_to_string(log_var.shape()));
  Tensor var = exp(log_var);
  Tensor inner = sub(sub(add(var, square(mu)), log_var),
                     Tensor::ones(mu.shape()));
  return scale(sum(inner), 0.5);
}

}  // namespace evanet
