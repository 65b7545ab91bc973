#include "evanet/prototype.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace evanet {

AgeEmbedding embed_age(double years, std::size_t dim) {
  if (!(years > 0.0))
    throw DomainError("embed_age: age must be positive, got " + std::to_string(years));
  if (dim == 0 || dim % 2 != 0) throw DomainError("embed_age: dim must be a positive even number");
  AgeEmbedding e;
  e.dim = dim;
  e.v.resize(dim);
  for (std::size_t k = 0; 2 * k < dim; ++k) {
    const double denom =
        std::pow(10000.0, 2.0 * static_cast<double>(k) / static_cast<double>(dim));
    const double arg = years / denom;
    e.v[2 * k] = std::sin(arg);
    e.v[2 * k + 1] = std::cos(arg);
  }
  return e;
}

PrototypeParams init_prototype_params(std::size_t age_dim, std::size_t hidden,
                                      std::size_t latent_dim, Rng& rng) {
  auto linear = [&rng](std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng, true);
  };
  PrototypeParams p;
  p.w1 = linear(age_dim, hidden);
  p.b1 = Tensor::zeros({hidden}, true);
  p.w2 = linear(hidden, hidden);
  p.b2 = Tensor::zeros({hidden}, true);
  p.w3 = linear(hidden, latent_dim);
  p.b3 = Tensor::zeros({latent_dim}, true);
  return p;
}

Tensor prototype_forward(const AgeEmbedding& embedding, const PrototypeParams& params) {
  if (embedding.v.size() != params.w1.dim(0))
    throw ShapeError("prototype_forward: embedding dim " + std::to_string(embedding.v.size()) +
                     " does not match first layer " + shape_to_string(params.w1.shape()));
  Tensor x = Tensor::from_data({embedding.v.size()}, embedding.v);
  Tensor h1 = relu(add(matmul(x, params.w1), params.b1));
  Tensor h2 = relu(add(matmul(h1, params.w2), params.b2));
  return add(matmul(h2, params.w3), params.b3);
}

Tensor align_loss(const Tensor& z, const Tensor& p_y) {
  if (z.shape() != p_y.shape())
    throw ShapeError("align_loss: shape mismatch " + shape_to_string(z.shape()) + " vs " +
                     shape_to_string(p_y.shape()));
  return sum(square(sub(z, p_y)));
}

std::vector<TrajectoryRow> trajectory_dump(const PrototypeParams& params,
                                           const std::vector<double>& age_grid) {
  if (age_grid.empty()) throw DomainError("trajectory_dump: empty age grid");
  for (std::size_t i = 1; i < age_grid.size(); ++i)
    if (!(age_grid[i] > age_grid[i - 1]))
      throw DomainError("trajectory_dump: age grid must be strictly increasing");

  std::vector<TrajectoryRow> rows;
  rows.reserve(age_grid.size());
  for (double age : age_grid) {
    TrajectoryRow row;
    row.age = age;
    row.prototype = prototype_forward(embed_age(age, params.w1.dim(0)), params).values();
    if (!rows.empty()) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < row.prototype.size(); ++j) {
        const double diff = row.prototype[j] - rows.back().prototype[j];
        d2 += diff * diff;
      }
      row.dist_to_prev = std::sqrt(d2);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string trajectory_csv(const std::vector<TrajectoryRow>& rows) {
  std::ostringstream out;
  out << "age";
  if (!rows.empty())
    for (std::size_t j = 0; j < rows[0].prototype.size(); ++j) out << ",p_" << j;
  out << ",dist_to_prev\n";
  char buf[32];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", row.age);
    out << buf;
    for (double p : row.prototype) {
      std::snprintf(buf, sizeof buf, "%.17g", p);
      out << ',' << buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", row.dist_to_prev);
    out << ',' << buf << '\n';
  }
  return out.str();
}

}  // namespace evanet
