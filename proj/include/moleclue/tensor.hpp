#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moleclue::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Dense 64-bit float array participating in define-by-run reverse-mode
// autodiff. Copying a Tensor aliases the underlying node; the recorded
// graph is rebuilt on every forward pass and torn down when the last
// reference drops.
//
// An operation is recorded only when at least one input requires a
// gradient; otherwise the result is a plain constant.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t size() const;

  bool requires_grad() const;

  std::span<const double> values() const;
  // Mutable view of a leaf's storage, for optimizer updates and
  // finite-difference probes. Rejected on non-leaf nodes.
  std::span<double> values_mut();
  double item() const;  // value of a single-element tensor

  // Gradient accumulated by the most recent backward() reaching this leaf.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  // Reverse-mode sweep from a scalar root. Gradients of every reachable
  // requires-grad node are zeroed first, so repeated calls do not leak
  // stale contributions into reachable leaves.
  void backward() const;

  // Value copy detached from the recorded graph.
  Tensor detach() const;

  std::uint64_t node_id() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
  friend struct OpAccess;
};

// --- primitive operations ---------------------------------------------------
// Every primitive checks shapes up front and reports mismatches naming the
// operation and both shapes. Elementwise binaries broadcast right-aligned
// (a trailing dimension must match or be 1).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // 2-D only
Tensor transpose(const Tensor& a);                // 2-D only

Tensor sum(const Tensor& a);                    // -> scalar (shape {1})
Tensor sum_axis(const Tensor& a, std::size_t axis);   // removes the axis
Tensor mean(const Tensor& a);                   // -> scalar (shape {1})
Tensor mean_axis(const Tensor& a, std::size_t axis);  // removes the axis

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor softplus(const Tensor& a);
// ssp(a) = softplus(a) - ln 2, so ssp(0) = 0.
Tensor shifted_softplus(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Normalizes over the last axis; epsilon 1e-5 is added to the variance so a
// constant row maps to zeros instead of a division by zero.
Tensor layer_norm(const Tensor& a);
inline constexpr double kLayerNormEps = 1e-5;

// Global L2 norm, sqrt(sum a^2 + 1e-12); the epsilon keeps the origin
// differentiable during latent descent.
Tensor l2_norm(const Tensor& a);
inline constexpr double kNormEps = 1e-12;

// Axis-0 gather/scatter used for message passing. gather_rows reads
// rows[index[e]]; scatter_add_rows sums row e into out[index[e]] of a
// zero-initialized result with out_rows leading rows.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index);
Tensor scatter_add_rows(const Tensor& a, const std::vector<std::size_t>& index,
                        std::size_t out_rows);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator/(const Tensor& a, double b) { return divide(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(double a, const Tensor& b) { return divide(Tensor::scalar(a), b); }

// --- finite differences ------------------------------------------------------

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_coord = 0;
  bool non_finite = false;
  std::size_t non_finite_coord = 0;
};

// Central-difference check of f's gradient at `point`. f must return a
// scalar tensor built from its argument. Relative error per coordinate is
// |analytic - central| / (|central| + 1e-12).
FdReport finite_difference_check(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
    double step);

}  // namespace moleclue::ad
