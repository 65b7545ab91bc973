#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "evanet/tensor.hpp"

namespace testutil {

// Central finite differences of a scalar-valued function with respect to one
// leaf tensor. The function must rebuild its graph on every call and must not
// consume outside randomness. Independent of every backward rule it checks.
inline std::vector<double> finite_diff_grad(evanet::Tensor& x,
                                            const std::function<double()>& loss,
                                            double h = 1e-5) {
  std::vector<double> grad(x.numel());
  auto& vals = x.raw_values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double keep = vals[i];
    vals[i] = keep + h;
    const double up = loss();
    vals[i] = keep - h;
    const double down = loss();
    vals[i] = keep;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline double max_rel_error(const std::vector<double>& analytic,
                            const std::vector<double>& numeric, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({floor, std::fabs(analytic[i]), std::fabs(numeric[i])});
    worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// Subsampled finite-difference check for big parameter tensors: checks
// `count` seeded coordinates and returns the worst relative error.
//
// Losses with relu layers are piecewise smooth; a probe that straddles a
// kink measures a slope blend, not the derivative, so estimates at h and
// h/2 are compared and inconsistent coordinates are skipped. The error
// floor scales with |loss| because the f64 cancellation noise of central
// differences is eps·|f|/h.
inline double sampled_fd_rel_error(evanet::Tensor& x, const std::function<double()>& loss,
                                   evanet::Rng& pick, std::size_t count, double h = 1e-5,
                                   double floor = 1e-6) {
  auto& vals = x.raw_values();
  if (!x.has_grad()) throw evanet::Error("sampled_fd_rel_error: no gradient on tensor");
  const auto& g = x.grad();
  const double f0 = loss();
  double worst = 0.0;
  const std::size_t n = vals.size();
  const std::size_t checks = std::min(count, n);
  for (std::size_t c = 0; c < checks; ++c) {
    const std::size_t i = (checks == n) ? c : static_cast<std::size_t>(pick.next_below(n));
    const double keep = vals[i];
    vals[i] = keep + h;
    const double up = loss();
    vals[i] = keep - h;
    const double down = loss();
    vals[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double fd_plus = (up - f0) / h;
    const double fd_minus = (f0 - down) / h;
    // One-sided estimates disagree where a relu/clamp kink sits inside the
    // probe interval; those coordinates measure a slope blend, not the
    // derivative, and are skipped.
    const double side_scale = std::max({floor, std::fabs(fd_plus), std::fabs(fd_minus)});
    if (std::fabs(fd_plus - fd_minus) > 1e-3 * side_scale) continue;
    const double denom = std::max({floor, std::fabs(g[i]), std::fabs(fd)});
    worst = std::max(worst, std::fabs(g[i] - fd) / denom);
  }
  return worst;
}

// Unique scratch directory under the system temp root; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    namespace fs = std::filesystem;
    const auto base = fs::temp_directory_path();
    for (int i = 0;; ++i) {
      fs::path candidate = base / (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(i));
      if (!fs::exists(candidate)) {
        fs::create_directories(candidate);
        path_ = candidate.string();
        break;
      }
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const {
    return (std::filesystem::path(path_) / name).string();
  }

 private:
  std::string path_;
};

}  // namespace testutil
