#include "evanet/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace evanet {

// Graph building allocates and frees ~50 MB of half-megabyte buffers per
// training sample; keeping them on the heap free list instead of mmap
// round-trips avoids refaulting the pages every step.
static const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
  return true;
}();

struct Tensor::Impl {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff participating in a backward pass
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_ran = false;
  std::vector<std::shared_ptr<Impl>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

namespace {

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::shared_ptr<Tensor::Impl> make_impl(std::vector<std::size_t> shape, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  auto impl = std::make_shared<Tensor::Impl>();
  impl->shape = std::move(shape);
  impl->value.assign(shape_numel(impl->shape), 0.0);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->ensure_grad();
  return impl;
}

// Result node of an op: tracks the graph only when some parent needs it and
// grad recording is on.
Tensor make_op(std::vector<std::size_t> shape,
               std::vector<std::shared_ptr<Tensor::Impl>> parents,
               std::function<void()>* out_hook) {
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& p : parents) needs = needs || p->requires_grad;
  auto impl = make_impl(std::move(shape), false);
  impl->requires_grad = needs;
  impl->is_leaf = false;
  if (needs) impl->parents = std::move(parents);
  (void)out_hook;
  return Tensor(std::move(impl));
}

void check_finite(const std::vector<double>& data, const char* where) {
  for (double v : data) {
    if (!std::isfinite(v)) throw DomainError(std::string(where) + ": non-finite value encountered");
  }
}

void transpose_into(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void gemm_accumulate(const double* a, const double* b, double* c,
                     std::size_t m, std::size_t k, std::size_t n) {
  // Reduction unrolled by four and rows paired, so each C store carries
  // several FMAs; the naive i-p-j loop is store-bound.
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* __restrict a0 = a + (i + 0) * k;
    const double* __restrict a1 = a + (i + 1) * k;
    double* __restrict c0 = c + (i + 0) * n;
    double* __restrict c1 = c + (i + 1) * n;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const double* __restrict b0 = b + (p + 0) * n;
      const double* __restrict b1 = b + (p + 1) * n;
      const double* __restrict b2 = b + (p + 2) * n;
      const double* __restrict b3 = b + (p + 3) * n;
      const double u0 = a0[p], u1 = a0[p + 1], u2 = a0[p + 2], u3 = a0[p + 3];
      const double v0 = a1[p], v1 = a1[p + 1], v2 = a1[p + 2], v3 = a1[p + 3];
      for (std::size_t j = 0; j < n; ++j) {
        c0[j] += u0 * b0[j] + u1 * b1[j] + u2 * b2[j] + u3 * b3[j];
        c1[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
      }
    }
    for (; p < k; ++p) {
      const double* __restrict brow = b + p * n;
      const double u = a0[p], v = a1[p];
      for (std::size_t j = 0; j < n; ++j) {
        c0[j] += u * brow[j];
        c1[j] += v * brow[j];
      }
    }
  }
  for (; i < m; ++i) {
    const double* __restrict arow = a + i * k;
    double* __restrict crow = c + i * n;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const double* __restrict b0 = b + (p + 0) * n;
      const double* __restrict b1 = b + (p + 1) * n;
      const double* __restrict b2 = b + (p + 2) * n;
      const double* __restrict b3 = b + (p + 3) * n;
      const double u0 = arow[p], u1 = arow[p + 1], u2 = arow[p + 2], u3 = arow[p + 3];
      for (std::size_t j = 0; j < n; ++j)
        crow[j] += u0 * b0[j] + u1 * b1[j] + u2 * b2[j] + u3 * b3[j];
    }
    for (; p < k; ++p) {
      const double ap = arow[p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += ap * brow[j];
    }
  }
}

// c[k×n] += aᵀ·b for a [m×k], b [m×n]: accumulated as a sum of outer
// products so c stays cache-resident while a and b stream through once.
void gemm_ta_accumulate(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* __restrict a0 = a + (i + 0) * k;
    const double* __restrict a1 = a + (i + 1) * k;
    const double* __restrict a2 = a + (i + 2) * k;
    const double* __restrict a3 = a + (i + 3) * k;
    const double* __restrict b0 = b + (i + 0) * n;
    const double* __restrict b1 = b + (i + 1) * n;
    const double* __restrict b2 = b + (i + 2) * n;
    const double* __restrict b3 = b + (i + 3) * n;
    for (std::size_t p = 0; p < k; ++p) {
      double* __restrict crow = c + p * n;
      const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      for (std::size_t j = 0; j < n; ++j)
        crow[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
    }
  }
  for (; i < m; ++i) {
    const double* __restrict arow = a + i * k;
    const double* __restrict brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double* __restrict crow = c + p * n;
      const double ap = arow[p];
      for (std::size_t j = 0; j < n; ++j) crow[j] += ap * brow[j];
    }
  }
}

// ---- construction ----

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::ones(std::vector<std::size_t> shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  std::fill(impl->value.begin(), impl->value.end(), value);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  check_finite(data, "from_data");
  auto impl = make_impl(std::move(shape), requires_grad);
  impl->value = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::uniform(std::vector<std::size_t> shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  for (double& v : impl->value) v = rng.uniform(lo, hi);
  return Tensor(std::move(impl));
}

Tensor Tensor::gaussian(std::vector<std::size_t> shape, Rng& rng, bool requires_grad) {
  auto impl = make_impl(std::move(shape), requires_grad);
  for (double& v : impl->value) v = rng.normal();
  return Tensor(std::move(impl));
}

// ---- accessors ----

static const std::vector<std::size_t>& require_impl(const std::shared_ptr<Tensor::Impl>& p) {
  if (!p) throw Error("operation on an empty tensor");
  return p->shape;
}

const std::vector<std::size_t>& Tensor::shape() const { return require_impl(impl_); }
std::size_t Tensor::numel() const { return require_impl(impl_), impl_->value.size(); }
bool Tensor::requires_grad() const { return require_impl(impl_), impl_->requires_grad; }
bool Tensor::is_leaf() const { return require_impl(impl_), impl_->is_leaf; }
const std::vector<double>& Tensor::values() const { return require_impl(impl_), impl_->value; }

std::vector<double>& Tensor::raw_values() {
  require_impl(impl_);
  if (!impl_->is_leaf) throw Error("raw_values: only leaf tensors may be mutated in place");
  return impl_->value;
}

const std::vector<double>& Tensor::grad() const {
  require_impl(impl_);
  if (impl_->grad.size() != impl_->value.size())
    throw Error("grad: gradient not populated (no backward pass reached this tensor)");
  return impl_->grad;
}

bool Tensor::has_grad() const {
  return impl_ && impl_->grad.size() == impl_->value.size();
}

double Tensor::item() const {
  require_impl(impl_);
  if (impl_->value.size() != 1)
    throw ShapeError("item: tensor " + shape_to_string(impl_->shape) + " is not scalar");
  return impl_->value[0];
}

double Tensor::at(std::size_t i) const { return values().at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  require_impl(impl_);
  if (impl_->shape.size() != 2) throw ShapeError("at(r,c): tensor is not 2-D");
  return impl_->value.at(r * impl_->shape[1] + c);
}

void Tensor::zero_grad() {
  require_impl(impl_);
  if (impl_->requires_grad) impl_->grad.assign(impl_->value.size(), 0.0);
}

Tensor Tensor::detach(bool requires_grad) const {
  require_impl(impl_);
  return from_data(impl_->shape, impl_->value, requires_grad);
}

void Tensor::reset_backward_guard() const {
  if (impl_) impl_->backward_ran = false;
}

// ---- backward ----

void Tensor::backward() const {
  require_impl(impl_);
  if (impl_->value.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_to_string(impl_->shape));
  if (!impl_->requires_grad)
    throw Error("backward: loss is detached from any graph (requires_grad is false)");
  if (impl_->backward_ran)
    throw Error("backward: already ran on this loss; reset gradients and rebuild the graph");
  impl_->backward_ran = true;

  // Post-order DFS gives reverse topological order when walked backwards.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  struct Frame {
    Impl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_.get(), 0});
  seen.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Impl* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

// ---- op helpers ----

namespace {

using ImplPtr = std::shared_ptr<Tensor::Impl>;

enum class Broadcast { none, left_scalar, right_scalar };

Broadcast binary_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (a.numel() == 1) return Broadcast::left_scalar;
  if (b.numel() == 1) return Broadcast::right_scalar;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                   shape_to_string(b.shape()) + " (only scalar broadcasting is supported)");
}

}  // namespace

// ---- matmul family ----

static void matmul_dims(const Tensor& a, const Tensor& b, std::size_t& m, std::size_t& k,
                        std::size_t& n, std::vector<std::size_t>& out_shape, bool b_transposed) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() > 2 || sb.size() > 2 || sa.empty() || sb.empty())
    throw ShapeError("matmul: operands must be 1-D or 2-D");
  m = sa.size() == 2 ? sa[0] : 1;
  k = sa.size() == 2 ? sa[1] : sa[0];
  std::size_t bk, bn;
  if (!b_transposed) {
    bk = sb.size() == 2 ? sb[0] : sb[0];
    bn = sb.size() == 2 ? sb[1] : 1;
  } else {
    if (sb.size() != 2) throw ShapeError("matmul_nt: rhs must be 2-D");
    bk = sb[1];
    bn = sb[0];
  }
  if (k != bk) {
    throw ShapeError(std::string(b_transposed ? "matmul_nt" : "matmul") +
                     ": inner dimensions disagree, " + shape_to_string(sa) + " vs " +
                     shape_to_string(sb));
  }
  n = bn;
  out_shape.clear();
  if (sa.size() == 2 && sb.size() == 2) {
    out_shape = {m, n};
  } else if (sa.size() == 1 && sb.size() == 2) {
    out_shape = {n};
  } else if (sa.size() == 2 && sb.size() == 1) {
    out_shape = {m};
  } else {
    out_shape = {1};  // dot product
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  std::size_t m, k, n;
  std::vector<std::size_t> out_shape;
  matmul_dims(a, b, m, k, n, out_shape, false);
  Tensor out = make_op(out_shape, {a.impl_ptr(), b.impl_ptr()}, nullptr);
  gemm_accumulate(a.values().data(), b.values().data(), out.impl()->value.data(), m, k, n);

  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, pb, self, m, k, n]() {
      const double* dc = self->grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        std::vector<double> bt(k * n);  // bᵀ is [n×k]
        transpose_into(pb->value.data(), bt.data(), k, n);
        gemm_accumulate(dc, bt.data(), pa->grad.data(), m, n, k);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        gemm_ta_accumulate(pa->value.data(), dc, pb->grad.data(), m, k, n);
      }
    };
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  std::size_t m, k, n;
  std::vector<std::size_t> out_shape;
  matmul_dims(a, b, m, k, n, out_shape, true);
  Tensor out = make_op(out_shape, {a.impl_ptr(), b.impl_ptr()}, nullptr);
  {
    std::vector<double> bt(k * n);  // b is [n×k]; bᵀ is [k×n]
    transpose_into(b.values().data(), bt.data(), n, k);
    gemm_accumulate(a.values().data(), bt.data(), out.impl()->value.data(), m, k, n);
  }
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, pb, self, m, k, n]() {
      const double* dc = self->grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        // dA = dC · B   ([m×n]·[n×k])
        gemm_accumulate(dc, pb->value.data(), pa->grad.data(), m, n, k);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        // dB = dCᵀ · A  ([n×m]·[m×k])
        gemm_ta_accumulate(dc, pa->value.data(), pb->grad.data(), m, n, k);
      }
    };
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: tensor must be 2-D, got " + shape_to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out = make_op({c, r}, {a.impl_ptr()}, nullptr);
  transpose_into(a.values().data(), out.impl()->value.data(), r, c);
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, self, r, c]() {
      pa->ensure_grad();
      const double* dc = self->grad.data();
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < r; ++j) pa->grad[j * c + i] += dc[i * r + j];
    };
  }
  return out;
}

// ---- elementwise binary ----

template <typename Fwd, typename BwdA, typename BwdB>
static Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a,
                        BwdB bwd_b) {
  Broadcast mode = binary_mode(a, b, name);
  const auto& big = (mode == Broadcast::left_scalar) ? b : a;
  Tensor out = make_op(big.shape(), {a.impl_ptr(), b.impl_ptr()}, nullptr);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.impl()->value;
  const std::size_t nel = ov.size();
  for (std::size_t i = 0; i < nel; ++i) {
    const double x = (mode == Broadcast::left_scalar) ? av[0] : av[i];
    const double y = (mode == Broadcast::right_scalar) ? bv[0] : bv[i];
    ov[i] = fwd(x, y);
  }
  if (out.requires_grad()) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, pb, self, mode, nel, bwd_a, bwd_b]() {
      const auto& d = self->grad;
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < nel; ++i) {
          const double x = (mode == Broadcast::left_scalar) ? pa->value[0] : pa->value[i];
          const double y = (mode == Broadcast::right_scalar) ? pb->value[0] : pb->value[i];
          pa->grad[(mode == Broadcast::left_scalar) ? 0 : i] += bwd_a(x, y, d[i]);
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < nel; ++i) {
          const double x = (mode == Broadcast::left_scalar) ? pa->value[0] : pa->value[i];
          const double y = (mode == Broadcast::right_scalar) ? pb->value[0] : pb->value[i];
          pb->grad[(mode == Broadcast::right_scalar) ? 0 : i] += bwd_b(x, y, d[i]);
        }
      }
    };
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double d) { return d; }, [](double, double, double d) { return d; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double d) { return d; }, [](double, double, double d) { return -d; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double d) { return d * y; },
      [](double x, double, double d) { return d * x; });
}

// ---- elementwise unary ----

template <typename Fwd, typename Bwd>
static Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = make_op(a.shape(), {a.impl_ptr()}, nullptr);
  const auto& av = a.values();
  auto& ov = out.impl()->value;
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, self, bwd]() {
      pa->ensure_grad();
      for (std::size_t i = 0; i < pa->value.size(); ++i)
        pa->grad[i] += bwd(pa->value[i], self->value[i], self->grad[i]);
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return c * x; }, [c](double, double, double d) { return c * d; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double, double, double d) { return d; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y, double d) { return d * y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (v <= 0.0) throw DomainError("log: input must be strictly positive, got " + std::to_string(v));
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double, double d) { return d / x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double, double d) { return x > 0.0 ? d : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; },
      [](double x, double, double d) { return 2.0 * x * d; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values())
    if (v < 0.0) throw DomainError("sqrt: input must be nonnegative, got " + std::to_string(v));
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y, double d) { return y > 0.0 ? d * 0.5 / y : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp: lo > hi");
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double, double d) { return (x >= lo && x <= hi) ? d : 0.0; });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  Tensor out = make_op({1}, {a.impl_ptr()}, nullptr);
  double s = 0.0;
  for (double v : a.values()) s += v;
  out.impl()->value[0] = s;
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, self]() {
      pa->ensure_grad();
      const double d = self->grad[0];
      for (double& g : pa->grad) g += d;
    };
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis) {
  if (a.rank() != 2) throw ShapeError("sum(axis): tensor must be 2-D, got " + shape_to_string(a.shape()));
  if (axis > 1) throw ShapeError("sum(axis): axis out of range for 2-D tensor");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const std::size_t out_len = (axis == 0) ? cols : rows;
  Tensor out = make_op({out_len}, {a.impl_ptr()}, nullptr);
  const auto& av = a.values();
  auto& ov = out.impl()->value;
  if (axis == 0) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ov[c] += av[r * cols + c];
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += av[r * cols + c];
      ov[r] = s;
    }
  }
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, self, rows, cols, axis]() {
      pa->ensure_grad();
      const auto& d = self->grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          pa->grad[r * cols + c] += (axis == 0) ? d[c] : d[r];
    };
  }
  return out;
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const double denom = static_cast<double>(axis == 0 ? a.dim(0) : a.dim(1));
  return scale(sum(a, axis), 1.0 / denom);
}

// ---- softmax ----

namespace {

// Cephes-style exp accurate to a few ulp, branch-free so the slice loop
// vectorizes. Inputs are already max-subtracted (<= 0); anything below -700
// is clamped, which underflows to ~1e-304 and vanishes after normalization.
inline double softmax_exp(double x) {
  x = std::max(x, -700.0);
  const double k = std::nearbyint(x * 1.4426950408889634);
  const double r = (x - k * 6.93145751953125e-1) - k * 1.42860682030941723212e-6;
  const double xx = r * r;
  double px = 1.26177193074810590878e-4;
  px = px * xx + 3.02994407707441961300e-2;
  px = px * xx + 9.99999999999999999910e-1;
  px *= r;
  double qx = 3.00198505138664455042e-6;
  qx = qx * xx + 2.52448340349684104192e-3;
  qx = qx * xx + 2.27265548208155028766e-1;
  qx = qx * xx + 2.0;
  const double e = 1.0 + 2.0 * px / (qx - px);
  const auto pow2k =
      std::bit_cast<double>(static_cast<std::uint64_t>(static_cast<std::int64_t>(k) + 1023)
                            << 52);
  return e * pow2k;
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("softmax: axis out of range for " + shape_to_string(a.shape()));
  check_finite(a.values(), "softmax");
  const auto& shape = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];

  Tensor out = make_op(shape, {a.impl_ptr()}, nullptr);
  const auto& av = a.values();
  auto& ov = out.impl()->value;
  if (inner == 1) {
    for (std::size_t o = 0; o < outer; ++o) {
      const double* __restrict row = av.data() + o * len;
      double* __restrict orow = ov.data() + o * len;
      double mx = row[0];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = softmax_exp(row[j] - mx);
        orow[j] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (std::size_t j = 0; j < len; ++j) orow[j] *= inv;
    }
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double mx = av[base];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
        double denom = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          const double e = softmax_exp(av[base + j * inner] - mx);
          ov[base + j * inner] = e;
          denom += e;
        }
        const double inv = 1.0 / denom;
        for (std::size_t j = 0; j < len; ++j) ov[base + j * inner] *= inv;
      }
    }
  }
  if (out.requires_grad()) {
    auto pa = a.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pa, self, outer, inner, len]() {
      pa->ensure_grad();
      const auto& y = self->value;
      const auto& d = self->grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += y[base + j * inner] * d[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t ix = base + j * inner;
            pa->grad[ix] += y[ix] * (d[ix] - dot);
          }
        }
      }
    };
  }
  return out;
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() == 0) throw ShapeError("layer_norm: empty tensor");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                     shape_to_string(gain.shape()) + " and " + shape_to_string(bias.shape()));
  }
  constexpr double kEps = 1e-5;
  const std::size_t slices = x.numel() / d;

  Tensor out = make_op(x.shape(), {x.impl_ptr(), gain.impl_ptr(), bias.impl_ptr()}, nullptr);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = out.impl()->value;

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* row = xv.data() + s * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[s] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * inv;
      (*xhat)[s * d + j] = xh;
      ov[s * d + j] = gv[j] * xh + bv[j];
    }
  }

  if (out.requires_grad()) {
    auto px = x.impl_ptr(), pg = gain.impl_ptr(), pb = bias.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [px, pg, pb, self, xhat, inv_std, slices, d]() {
      const auto& dy = self->grad;
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (std::size_t s = 0; s < slices; ++s)
          for (std::size_t j = 0; j < d; ++j) pg->grad[j] += dy[s * d + j] * (*xhat)[s * d + j];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t s = 0; s < slices; ++s)
          for (std::size_t j = 0; j < d; ++j) pb->grad[j] += dy[s * d + j];
      }
      if (px->requires_grad) {
        px->ensure_grad();
        const auto& gv = pg->value;
        for (std::size_t s = 0; s < slices; ++s) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy[s * d + j] * gv[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * (*xhat)[s * d + j];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          const double inv = (*inv_std)[s];
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy[s * d + j] * gv[j];
            px->grad[s * d + j] +=
                inv * (dxh - mean_dxhat - (*xhat)[s * d + j] * mean_dxhat_xhat);
          }
        }
      }
    };
  }
  return out;
}

// ---- row plumbing ----

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows: tensor must be 2-D");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  for (std::size_t i : idx)
    if (i >= rows) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  Tensor out = make_op({idx.size(), cols}, {x.impl_ptr()}, nullptr);
  const auto& xv = x.values();
  auto& ov = out.impl()->value;
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(xv.data() + idx[r] * cols, cols, ov.data() + r * cols);
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    auto self = out.impl();
    auto id = std::make_shared<std::vector<std::size_t>>(idx);
    out.impl()->backward_fn = [px, self, id, cols]() {
      px->ensure_grad();
      for (std::size_t r = 0; r < id->size(); ++r)
        for (std::size_t c = 0; c < cols; ++c)
          px->grad[(*id)[r] * cols + c] += self->grad[r * cols + c];
    };
  }
  return out;
}

Tensor overwrite_rows(const Tensor& base, const Tensor& rows,
                      const std::vector<std::size_t>& idx) {
  if (base.rank() != 2 || rows.rank() != 2) throw ShapeError("overwrite_rows: tensors must be 2-D");
  const std::size_t n = base.dim(0), cols = base.dim(1);
  if (rows.dim(1) != cols || rows.dim(0) != idx.size())
    throw ShapeError("overwrite_rows: rows " + shape_to_string(rows.shape()) +
                     " incompatible with base " + shape_to_string(base.shape()) + " and " +
                     std::to_string(idx.size()) + " indices");
  std::vector<bool> taken(n, false);
  for (std::size_t i : idx) {
    if (i >= n) throw ShapeError("overwrite_rows: index " + std::to_string(i) + " out of range");
    if (taken[i]) throw ShapeError("overwrite_rows: duplicate index " + std::to_string(i));
    taken[i] = true;
  }
  Tensor out = make_op(base.shape(), {base.impl_ptr(), rows.impl_ptr()}, nullptr);
  auto& ov = out.impl()->value;
  ov = base.values();
  const auto& rv = rows.values();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(rv.data() + r * cols, cols, ov.data() + idx[r] * cols);
  if (out.requires_grad()) {
    auto pb = base.impl_ptr(), pr = rows.impl_ptr();
    auto self = out.impl();
    auto id = std::make_shared<std::vector<std::size_t>>(idx);
    out.impl()->backward_fn = [pb, pr, self, id, n, cols]() {
      if (pr->requires_grad) {
        pr->ensure_grad();
        for (std::size_t r = 0; r < id->size(); ++r)
          for (std::size_t c = 0; c < cols; ++c)
            pr->grad[r * cols + c] += self->grad[(*id)[r] * cols + c];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        std::vector<bool> taken(n, false);
        for (std::size_t i : *id) taken[i] = true;
        for (std::size_t r = 0; r < n; ++r) {
          if (taken[r]) continue;
          for (std::size_t c = 0; c < cols; ++c) pb->grad[r * cols + c] += self->grad[r * cols + c];
        }
      }
    };
  }
  return out;
}

Tensor repeat_rows(const Tensor& v, std::size_t n) {
  if (v.rank() != 1) throw ShapeError("repeat_rows: expected 1-D tensor, got " + shape_to_string(v.shape()));
  const std::size_t d = v.dim(0);
  Tensor out = make_op({n, d}, {v.impl_ptr()}, nullptr);
  auto& ov = out.impl()->value;
  const auto& vv = v.values();
  for (std::size_t r = 0; r < n; ++r) std::copy_n(vv.data(), d, ov.data() + r * d);
  if (out.requires_grad()) {
    auto pv = v.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [pv, self, n, d]() {
      pv->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) pv->grad[c] += self->grad[r * d + c];
    };
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t rows = parts[0].dim(0);
  std::size_t total = 0;
  std::vector<ImplPtr> parents;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw ShapeError("concat_cols: all parts must be 2-D with equal row counts");
    total += p.dim(1);
    parents.push_back(p.impl_ptr());
  }
  Tensor out = make_op({rows, total}, parents, nullptr);
  auto& ov = out.impl()->value;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    const auto& pv = p.values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * c, c, ov.data() + r * total + off);
    off += c;
  }
  if (out.requires_grad()) {
    auto self = out.impl();
    auto ps = std::make_shared<std::vector<ImplPtr>>();
    for (const auto& p : parts) ps->push_back(p.impl_ptr());
    out.impl()->backward_fn = [self, ps, rows, total]() {
      std::size_t off = 0;
      for (const auto& p : *ps) {
        const std::size_t c = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
              p->grad[r * c + j] += self->grad[r * total + off + j];
        }
        off += c;
      }
    };
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  if (x.rank() != 2) throw ShapeError("slice_cols: tensor must be 2-D");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (len == 0 || start + len > cols)
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for " +
                     shape_to_string(x.shape()));
  Tensor out = make_op({rows, len}, {x.impl_ptr()}, nullptr);
  const auto& xv = x.values();
  auto& ov = out.impl()->value;
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data() + r * cols + start, len, ov.data() + r * len);
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [px, self, rows, cols, start, len]() {
      px->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j)
          px->grad[r * cols + start + j] += self->grad[r * len + j];
    };
  }
  return out;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_to_string(x.shape()) + " cannot become " +
                     shape_to_string(shape));
  Tensor out = make_op(std::move(shape), {x.impl_ptr()}, nullptr);
  out.impl()->value = x.values();
  if (out.requires_grad()) {
    auto px = x.impl_ptr();
    auto self = out.impl();
    out.impl()->backward_fn = [px, self]() {
      px->ensure_grad();
      for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self->grad[i];
    };
  }
  return out;
}

}  // namespace evanet
