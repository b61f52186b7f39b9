#pragma once

// Checkpoint files and parameter-space model fusion (TIES, SLERP, LERP).
//
// File layout: 8-byte little-endian manifest length, UTF-8 JSON manifest,
// then the payload of little-endian f32 values, one row-major block per
// tensor in manifest order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "chemalign/errors.hpp"
#include "chemalign/policy.hpp"

namespace chemalign::merge {

inline constexpr std::uint64_t kFormatVersion = 1;

enum class LoadErrc {
  kIo,
  kCorruptManifest,
  kOffsetOverlap,
  kTruncatedPayload,
  kUnsupportedVersion,
  kTrailingBytes,
  kNonFinite,
};

std::string_view to_string(LoadErrc c);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(LoadErrc code, const std::string& msg);
  LoadErrc code() const { return code_; }

 private:
  LoadErrc code_;
};

class DegenerateTensorError : public NumericError {
 public:
  using NumericError::NumericError;
};

using Checkpoint = policy::PolicyParams;

std::string serialize_checkpoint(const Checkpoint& c);
// Validates the manifest and payload before returning.
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws CompatibilityError unless names, shapes, configs and vocabularies
// agree.
void require_compatible(const Checkpoint& a, const Checkpoint& b);

struct TaskVector {
  std::vector<std::string> names;
  std::vector<Tensor> deltas;
};

TaskVector task_vector(const Checkpoint& model, const Checkpoint& base);

enum class Algorithm { kTies, kSlerp, kLerp };

std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view s);

struct MergeConfig {
  Algorithm algorithm = Algorithm::kSlerp;
  std::vector<double> weights;  // one per input model; empty means equal weights
  double density = 0.2;
  double lambda = 1.0;
  double parallel_threshold = 0.9995;
};

Checkpoint ties_merge(const Checkpoint& base, std::span<const Checkpoint> models,
                      const MergeConfig& cfg);
Checkpoint slerp_merge(const Checkpoint& a, const Checkpoint& b, double t, const MergeConfig& cfg = {});
Checkpoint lerp_merge(const Checkpoint& a, const Checkpoint& b, double t);

// t = w_b / (w_a + w_b), the weight given to the second model.
double ratio_to_t(double w_a, double w_b);

// ---- vector-level kernels ------------------------------------------------------------

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Keeps the ceil(density * n) largest-magnitude entries (ties resolved toward
// the lower index) and zeroes the rest.
template <typename Derived>
Vector<typename Derived::Scalar> trim_top_magnitude(const Eigen::MatrixBase<Derived>& tau,
                                                    double density) {
  using Scalar = typename Derived::Scalar;
  if (!(density > 0.0) || density > 1.0) {
    throw ConfigError("TIES density must lie in (0, 1], got " + std::to_string(density));
  }
  const Eigen::Index n = tau.size();
  const auto k = static_cast<Eigen::Index>(std::ceil(density * static_cast<double>(n)));
  Vector<Scalar> out = Vector<Scalar>::Zero(n);
  if (k >= n) return tau;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) {
    return std::abs(tau(i)) > std::abs(tau(j));
  });
  for (Eigen::Index r = 0; r < k; ++r) out(order[r]) = tau(order[r]);
  return out;
}

// Sign election and disjoint weighted mean over already trimmed task vectors.
// The result does not depend on the order of (trimmed, weights) pairs.
template <typename Scalar>
Vector<Scalar> ties_combine(std::span<const Vector<Scalar>> trimmed, std::span<const double> weights) {
  if (trimmed.empty() || trimmed.size() != weights.size()) {
    throw ContractError("ties_combine: need one weight per task vector");
  }
  const Eigen::Index n = trimmed.front().size();
  Vector<Scalar> out = Vector<Scalar>::Zero(n);
  std::vector<std::pair<double, double>> contrib;  // (weighted value, weight)
  for (Eigen::Index i = 0; i < n; ++i) {
    contrib.clear();
    for (std::size_t m = 0; m < trimmed.size(); ++m) {
      const double v = static_cast<double>(trimmed[m](i));
      if (v != 0.0) contrib.emplace_back(weights[m] * v, weights[m]);
    }
    if (contrib.empty()) continue;
    // Fixed summation order keeps the result independent of model order.
    std::sort(contrib.begin(), contrib.end());
    double total = 0.0;
    for (const auto& c : contrib) total += c.first;
    const bool positive = total >= 0.0;
    double num = 0.0;
    double den = 0.0;
    for (const auto& [wv, w] : contrib) {
      if ((wv > 0.0) == positive && wv != 0.0) {
        num += wv;
        den += w;
      }
    }
    out(i) = den > 0.0 ? static_cast<Scalar>(num / den) : Scalar(0);
  }
  return out;
}

// Great-circle interpolation of directions with linearly interpolated norms.
// Falls back to plain linear interpolation when |cos| exceeds the threshold.
template <typename DerivedA, typename DerivedB>
Vector<typename DerivedA::Scalar> slerp(const Eigen::MatrixBase<DerivedA>& a,
                                        const Eigen::MatrixBase<DerivedB>& b,
                                        typename DerivedA::Scalar t,
                                        typename DerivedA::Scalar threshold = 0.9995) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() != b.size()) throw CompatibilityError("slerp: length mismatch");
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) {
    throw DegenerateTensorError("slerp: zero-norm tensor cannot be normalized");
  }
  const Vector<Scalar> ua = a / na;
  const Vector<Scalar> ub = b / nb;
  const Scalar cos_omega = std::clamp(ua.dot(ub), Scalar(-1), Scalar(1));
  if (std::abs(cos_omega) > threshold) return (Scalar(1) - t) * a + t * b;
  const Scalar omega = std::acos(cos_omega);
  const Scalar s = std::sin(omega);
  const Vector<Scalar> dir =
      (std::sin((Scalar(1) - t) * omega) / s) * ua + (std::sin(t * omega) / s) * ub;
  return ((Scalar(1) - t) * na + t * nb) * dir;
}

}  // namespace chemalign::merge
