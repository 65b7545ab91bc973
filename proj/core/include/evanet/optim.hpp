#pragma once

#include <cstdint>
#include <vector>

#include "evanet/tensor.hpp"

namespace evanet {

struct AdamWConfig {
  double base_lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// AdamW: Adam with bias correction and decoupled weight decay (decay is
// applied to the weights directly, never routed through the moments).
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

  // One update from the accumulated gradients. lr < 0 uses the base rate.
  void step(double lr = -1.0);
  void zero_grad();

  std::int64_t step_count() const { return step_count_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_count_ = 0;
};

// lr = min + ½ (base − min)(1 + cos(π · epoch / total)).
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr,
                 double min_lr = 0.0);

// Stops after `patience` consecutive epochs without strict improvement of the
// best validation loss.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience = 20);

  // Feed one epoch's validation loss; returns true when training should stop.
  bool observe(double val_loss);

  bool improved_last() const { return improved_last_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs_seen() const { return epochs_seen_; }

 private:
  std::size_t patience_;
  double best_;
  std::size_t best_epoch_ = 0;
  std::size_t epochs_seen_ = 0;
  std::size_t since_improvement_ = 0;
  bool improved_last_ = false;
};

}  // namespace evanet
