#include "evanet/optim.hpp"

#include <cmath>
#include <limits>

namespace evanet {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  if (lr < 0.0) lr = cfg_.base_lr;
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad())
      throw Error("AdamW::step: parameter " + std::to_string(i) +
                  " has no gradient (run backward first)");
    const auto& g = p.grad();
    auto& w = p.raw_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= lr * cfg_.weight_decay * w[j];  // decoupled decay
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr, double min_lr) {
  if (total_epochs == 0) throw DomainError("cosine_lr: total_epochs must be positive");
  if (epoch > total_epochs)
    throw DomainError("cosine_lr: epoch " + std::to_string(epoch) + " beyond total " +
                      std::to_string(total_epochs));
  const double phase =
      3.14159265358979323846 * static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(phase));
}

EarlyStopper::EarlyStopper(std::size_t patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {}

bool EarlyStopper::observe(double val_loss) {
  ++epochs_seen_;
  if (val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epochs_seen_;
    since_improvement_ = 0;
    improved_last_ = true;
    return false;
  }
  improved_last_ = false;
  ++since_improvement_;
  return since_improvement_ >= patience_;
}

}  // namespace evanet
