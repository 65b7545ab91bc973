#pragma once

#include <string>
#include <vector>

#include "evanet/rng.hpp"
#include "evanet/tensor.hpp"

namespace evanet {

// Age-conditioned continuous prototype network: a Fourier encoding of scalar
// age feeds a 3-layer MLP whose output is the ideal latent point for that age.

struct AgeEmbedding {
  std::size_t dim = 64;
  std::vector<double> v;  // interleaved sin/cos, components in [-1, 1]
};

// Interleaved sin(y / 10000^(2k/d)), cos(y / 10000^(2k/d)), k = 0 .. d/2-1.
AgeEmbedding embed_age(double years, std::size_t dim = 64);

struct PrototypeParams {
  Tensor w1, b1;  // d_age → 128
  Tensor w2, b2;  // 128 → 128
  Tensor w3, b3;  // 128 → latent d
};

PrototypeParams init_prototype_params(std::size_t age_dim, std::size_t hidden,
                                      std::size_t latent_dim, Rng& rng);

// P_y, a pure function of (age embedding, θ).
Tensor prototype_forward(const AgeEmbedding& embedding, const PrototypeParams& params);

// Squared Euclidean distance ‖Z − P_y‖²; batch aggregation is the caller's
// mean over samples.
Tensor align_loss(const Tensor& z, const Tensor& p_y);

struct TrajectoryRow {
  double age = 0.0;
  std::vector<double> prototype;
  double dist_to_prev = 0.0;  // zero for the first row
};

// (age, P_y) along an increasing age grid plus consecutive-point distances,
// for smoothness inspection of the learned trajectory.
std::vector<TrajectoryRow> trajectory_dump(const PrototypeParams& params,
                                           const std::vector<double>& age_grid);

// CSV rendering: age,p_0,...,p_{d-1},dist_to_prev.
std::string trajectory_csv(const std::vector<TrajectoryRow>& rows);

}  // namespace evanet
