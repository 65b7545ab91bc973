#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "evanet/error.hpp"
#include "evanet/rng.hpp"

namespace evanet {

// Dense row-major tensor of 64-bit floats with reverse-mode automatic
// differentiation. A Tensor is a cheap handle onto a shared node; ops build
// a computation graph and backward() walks it once in reverse topological
// order, accumulating gradients into every requires-grad leaf.
//
// Broadcasting is deliberately restricted to scalar-with-tensor and
// equal-shape so every backward rule stays auditable.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor ones(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  // Validates that every value is finite; NaN/Inf input is an error, never a
  // silently-stored state.
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false);

  static Tensor uniform(std::vector<std::size_t> shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);

  // i.i.d. standard normal draws; identical seed gives identical bytes.
  static Tensor gaussian(std::vector<std::size_t> shape, Rng& rng, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  bool is_scalar() const { return numel() == 1; }
  bool requires_grad() const;
  bool is_leaf() const;

  const std::vector<double>& values() const;
  std::vector<double>& raw_values();  // leaf-only in-place access (optimizer)
  const std::vector<double>& grad() const;
  bool has_grad() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  void zero_grad();

  // Reverse-mode sweep from a live scalar loss. Running it twice on the same
  // loss without a reset is an error, as is calling it on a detached tensor.
  void backward() const;

  // Clears the twice-guard so the same graph can be re-walked (tests only).
  void reset_backward_guard() const;

  // Value copy with no graph attached.
  Tensor detach(bool requires_grad = false) const;

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl* impl() const { return impl_.get(); }
  std::shared_ptr<Impl> impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// ---- ops (each op installs its backward rule) ----

Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · bᵀ with b [n×k]
Tensor transpose(const Tensor& a);                   // 2-D

Tensor add(const Tensor& a, const Tensor& b);  // equal-shape or scalar operand
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // domain error on x <= 0
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);  // domain error on x < 0
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);                     // scalar
Tensor sum(const Tensor& a, std::size_t axis);   // 2-D reduce
Tensor mean(const Tensor& a);                    // scalar
Tensor mean(const Tensor& a, std::size_t axis);  // 2-D reduce

// Max-subtracted softmax; each slice along `axis` sums to 1.
Tensor softmax(const Tensor& a, std::size_t axis);

// Per-slice standardization over the last axis (ε = 1e-5), then gain ⊙ x̂ + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Row plumbing for sparse attention.
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx);
Tensor overwrite_rows(const Tensor& base, const Tensor& rows,
                      const std::vector<std::size_t>& idx);
Tensor repeat_rows(const Tensor& v, std::size_t n);  // [d] -> [n×d]
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);

// Scoped switch that stops ops from recording the graph; evaluation passes
// run under it so no backward closures or parent links are allocated.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Raw kernels, exposed for the benchmark suite. gemm_accumulate: c += a·b,
// all row-major; gemm_ta_accumulate: c[k×n] += aᵀ·b for a [m×k], b [m×n].
void gemm_accumulate(const double* a, const double* b, double* c,
                     std::size_t m, std::size_t k, std::size_t n);
void gemm_ta_accumulate(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n);

}  // namespace evanet
