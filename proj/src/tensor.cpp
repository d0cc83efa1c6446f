#include "moleclue/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace moleclue::ad {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by backward()
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty() && !backward_fn; }
};

namespace {
std::atomic<std::uint64_t> g_seq{1};
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value,
                                bool requires_grad, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  n->op = op;
  return n;
}

}  // namespace detail

using detail::Node;

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void op_error(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

void ensure_grad_buffer(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

void accumulate(const std::shared_ptr<Node>& in, std::size_t flat, double g) {
  if (!in->requires_grad) return;
  ensure_grad_buffer(*in);
  in->grad[flat] += g;
}

}  // namespace

struct OpAccess {
  static const std::shared_ptr<Node>& node(const Tensor& t) {
    if (!t.node_) throw std::logic_error("use of an undefined Tensor");
    return t.node_;
  }
  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

namespace {

const std::shared_ptr<Node>& N(const Tensor& t) { return OpAccess::node(t); }

Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   std::vector<std::shared_ptr<Node>> inputs,
                   std::function<void(Node&)> backward_fn) {
  bool rg = false;
  for (const auto& in : inputs)
    if (in->requires_grad) rg = true;
  auto out = detail::make_node(std::move(shape), std::move(value), rg, op);
  if (rg) {
    out->inputs = std::move(inputs);
    out->backward_fn = std::move(backward_fn);
  }
  return OpAccess::wrap(std::move(out));
}

}  // namespace

// --- Tensor basics -----------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return OpAccess::wrap(
      detail::make_node(std::move(shape), std::vector<double>(n, 0.0),
                        requires_grad, "leaf"));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return OpAccess::wrap(
      detail::make_node(std::move(shape), std::vector<double>(n, value),
                        requires_grad, "leaf"));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size())
    op_error("from_data", "shape " + shape_str(shape) + " does not match " +
                              std::to_string(data.size()) + " elements");
  return OpAccess::wrap(detail::make_node(std::move(shape), std::move(data),
                                          requires_grad, "leaf"));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return OpAccess::wrap(
      detail::make_node(Shape{1}, std::vector<double>{value}, requires_grad,
                        "leaf"));
}

const Shape& Tensor::shape() const { return N(*this)->shape; }
std::size_t Tensor::size() const { return N(*this)->value.size(); }
bool Tensor::requires_grad() const { return N(*this)->requires_grad; }

std::span<const double> Tensor::values() const {
  const auto& n = N(*this);
  return {n->value.data(), n->value.size()};
}

std::span<double> Tensor::values_mut() {
  auto& n = N(*this);
  if (!n->is_leaf())
    throw std::logic_error("values_mut: only leaf tensors may be mutated");
  return {n->value.data(), n->value.size()};
}

double Tensor::item() const {
  const auto& n = N(*this);
  if (n->value.size() != 1)
    throw std::invalid_argument("item: tensor has " +
                                std::to_string(n->value.size()) + " elements");
  return n->value[0];
}

std::span<const double> Tensor::grad() const {
  const auto& n = N(*this);
  if (n->grad.size() != n->value.size())
    throw std::logic_error("grad: no gradient present; call backward first");
  return {n->grad.data(), n->grad.size()};
}

bool Tensor::has_grad() const {
  const auto& n = N(*this);
  return n->grad.size() == n->value.size();
}

void Tensor::zero_grad() {
  auto& n = N(*this);
  n->grad.assign(n->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& n = N(*this);
  return OpAccess::wrap(detail::make_node(n->shape, n->value, false, "leaf"));
}

std::uint64_t Tensor::node_id() const { return N(*this)->seq; }

void Tensor::backward() const {
  const auto& root = N(*this);
  if (root->value.size() != 1)
    throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                shape_str(root->shape));

  // Collect the reachable graph once; creation order is a topological order
  // for a define-by-run tape.
  std::vector<Node*> reachable;
  std::vector<Node*> stack{root.get()};
  {
    // Membership only; pointer-hash order never reaches any arithmetic.
    std::unordered_set<const Node*> visited{root.get()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      reachable.push_back(n);
      for (const auto& in : n->inputs) {
        if (visited.insert(in.get()).second) stack.push_back(in.get());
      }
    }
  }

  for (Node* n : reachable)
    if (n->requires_grad) n->grad.assign(n->value.size(), 0.0);

  if (!root->requires_grad) return;  // constant root: all gradients zero
  root->grad[0] = 1.0;

  std::sort(reachable.begin(), reachable.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  for (Node* n : reachable) {
    if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
  }
}

// --- broadcasting helpers -----------------------------------------------------

namespace {

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t k = 0; k < nd; ++k) {
    std::size_t da = k < nd - a.size() ? 1 : a[k - (nd - a.size())];
    std::size_t db = k < nd - b.size() ? 1 : b[k - (nd - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[k] = std::max(da, db);
  }
  return out;
}

// Flat index map from an output position to the matching operand position.
std::vector<std::size_t> index_map(const Shape& out, const Shape& operand) {
  std::size_t total = shape_numel(out);
  std::vector<std::size_t> map(total);
  std::size_t nd = out.size();
  std::size_t pad = nd - operand.size();

  std::vector<std::size_t> op_strides(nd, 0);
  std::size_t stride = 1;
  for (std::size_t k = nd; k-- > 0;) {
    if (k < pad) {
      op_strides[k] = 0;
      continue;
    }
    std::size_t dim = operand[k - pad];
    op_strides[k] = (dim == 1) ? 0 : stride;
    stride *= dim;
  }

  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < nd; ++k) off += idx[k] * op_strides[k];
    map[flat] = off;
    for (std::size_t k = nd; k-- > 0;) {
      if (++idx[k] < out[k]) break;
      idx[k] = 0;
    }
  }
  return map;
}

struct BinaryPlan {
  Shape out_shape;
  bool same_shape;
  std::shared_ptr<std::vector<std::size_t>> map_a, map_b;

  std::size_t a_at(std::size_t i) const { return same_shape ? i : (*map_a)[i]; }
  std::size_t b_at(std::size_t i) const { return same_shape ? i : (*map_b)[i]; }
};

BinaryPlan plan_binary(const char* op, const Shape& a, const Shape& b) {
  BinaryPlan p;
  p.same_shape = (a == b);
  p.out_shape = p.same_shape ? a : broadcast_shape(op, a, b);
  if (!p.same_shape) {
    p.map_a = std::make_shared<std::vector<std::size_t>>(index_map(p.out_shape, a));
    p.map_b = std::make_shared<std::vector<std::size_t>>(index_map(p.out_shape, b));
  }
  return p;
}

template <class Fwd, class Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 Bwd bwd) {
  auto na = N(a);
  auto nb = N(b);
  BinaryPlan plan = plan_binary(name, na->shape, nb->shape);
  std::size_t total = shape_numel(plan.out_shape);
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i)
    out[i] = fwd(na->value[plan.a_at(i)], nb->value[plan.b_at(i)]);
  return make_result(
      plan.out_shape, std::move(out), name, {na, nb},
      [plan, bwd](Node& self) {
        const auto& ia = self.inputs[0];
        const auto& ib = self.inputs[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          double g = self.grad[i];
          if (g == 0.0) continue;
          std::size_t oa = plan.a_at(i);
          std::size_t ob = plan.b_at(i);
          auto [ga, gb] = bwd(ia->value[oa], ib->value[ob], g);
          accumulate(ia, oa, ga);
          accumulate(ib, ob, gb);
        }
      });
}

template <class Fwd, class Dfn>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Dfn dfn) {
  auto na = N(a);
  std::vector<double> out(na->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(na->value[i]);
  return make_result(na->shape, std::move(out), name, {na},
                     [dfn](Node& self) {
                       const auto& in = self.inputs[0];
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         double g = self.grad[i];
                         if (g == 0.0) continue;
                         accumulate(in, i, g * dfn(in->value[i], self.value[i]));
                       }
                     });
}

}  // namespace

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y, double g) {
                     return std::pair{g * y, g * x};
                   });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op("div", a, b, [](double x, double y) { return x / y; },
                   [](double x, double y, double g) {
                     return std::pair{g / y, -g * x / (y * y)};
                   });
}

Tensor neg(const Tensor& a) {
  return unary_op("neg", a, [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

namespace {
double softplus_val(double x) {
  // log(1 + e^x) without overflow on either tail.
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}
double sigmoid_val(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Tensor softplus(const Tensor& a) {
  return unary_op("softplus", a, softplus_val,
                  [](double x, double) { return sigmoid_val(x); });
}

Tensor shifted_softplus(const Tensor& a) {
  constexpr double ln2 = 0.6931471805599453;
  return unary_op("ssp", a, [](double x) { return softplus_val(x) - ln2; },
                  [](double x, double) { return sigmoid_val(x); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) op_error("clamp", "lo > hi");
  return unary_op("clamp", a,
                  [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                  [lo, hi](double x, double) {
                    return (x >= lo && x <= hi) ? 1.0 : 0.0;
                  });
}

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto na = N(a);
  auto nb = N(b);
  if (na->shape.size() != 2 || nb->shape.size() != 2 ||
      na->shape[1] != nb->shape[0])
    shape_error("matmul", na->shape, nb->shape);
  std::size_t m = na->shape[0], k = na->shape[1], n = nb->shape[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = na->value[i * k + p];
      if (av == 0.0) continue;
      const double* brow = nb->value.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return make_result(
      Shape{m, n}, std::move(out), "matmul", {na, nb},
      [m, k, n](Node& self) {
        const auto& ia = self.inputs[0];
        const auto& ib = self.inputs[1];
        if (ia->requires_grad) {
          ensure_grad_buffer(*ia);
          // dA = G * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* grow = self.grad.data() + i * n;
              const double* brow = ib->value.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ia->grad[i * k + p] += acc;
            }
        }
        if (ib->requires_grad) {
          ensure_grad_buffer(*ib);
          // dB = A^T * G
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) {
              double av = ia->value[i * k + p];
              if (av == 0.0) continue;
              const double* grow = self.grad.data() + i * n;
              double* brow = ib->grad.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
      });
}

Tensor transpose(const Tensor& a) {
  auto na = N(a);
  if (na->shape.size() != 2)
    op_error("transpose", "expects rank 2, got " + shape_str(na->shape));
  std::size_t m = na->shape[0], n = na->shape[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = na->value[i * n + j];
  return make_result(Shape{n, m}, std::move(out), "transpose", {na},
                     [m, n](Node& self) {
                       const auto& in = self.inputs[0];
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           accumulate(in, i * n + j, self.grad[j * m + i]);
                     });
}

// --- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto na = N(a);
  double acc = 0.0;
  for (double v : na->value) acc += v;
  return make_result(Shape{1}, {acc}, "sum", {na}, [](Node& self) {
    const auto& in = self.inputs[0];
    double g = self.grad[0];
    for (std::size_t i = 0; i < in->value.size(); ++i) accumulate(in, i, g);
  });
}

Tensor mean(const Tensor& a) {
  std::size_t n = N(a)->value.size();
  if (n == 0) op_error("mean", "empty tensor");
  return mul(sum(a), Tensor::scalar(1.0 / static_cast<double>(n)));
}

namespace {
// Decompose a shape around `axis` into (outer, len, inner) extents.
struct AxisSplit {
  std::size_t outer, len, inner;
};
AxisSplit split_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    op_error(op, "axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (std::size_t k = 0; k < axis; ++k) sp.outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) sp.inner *= s[k];
  return sp;
}
}  // namespace

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  auto na = N(a);
  AxisSplit sp = split_axis("sum_axis", na->shape, axis);
  Shape out_shape;
  for (std::size_t k = 0; k < na->shape.size(); ++k)
    if (k != axis) out_shape.push_back(na->shape[k]);
  if (out_shape.empty()) out_shape = Shape{1};
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += na->value[(o * sp.len + l) * sp.inner + i];
  return make_result(out_shape, std::move(out), "sum_axis", {na},
                     [sp](Node& self) {
                       const auto& in = self.inputs[0];
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t l = 0; l < sp.len; ++l)
                           for (std::size_t i = 0; i < sp.inner; ++i)
                             accumulate(in, (o * sp.len + l) * sp.inner + i,
                                        self.grad[o * sp.inner + i]);
                     });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  AxisSplit sp = split_axis("mean_axis", N(a)->shape, axis);
  if (sp.len == 0) op_error("mean_axis", "axis of length zero");
  return mul(sum_axis(a, axis),
             Tensor::scalar(1.0 / static_cast<double>(sp.len)));
}

// --- structure ---------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) op_error("concat", "no inputs");
  std::vector<std::shared_ptr<Node>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(N(p));
  const Shape& first = nodes[0]->shape;
  if (axis >= first.size())
    op_error("concat", "axis " + std::to_string(axis) + " out of range for " +
                           shape_str(first));
  Shape out_shape = first;
  std::size_t total_axis = first[axis];
  for (std::size_t p = 1; p < nodes.size(); ++p) {
    const Shape& s = nodes[p]->shape;
    if (s.size() != first.size()) shape_error("concat", first, s);
    for (std::size_t k = 0; k < s.size(); ++k)
      if (k != axis && s[k] != first[k]) shape_error("concat", first, s);
    total_axis += s[axis];
  }
  out_shape[axis] = total_axis;

  AxisSplit osp = split_axis("concat", out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets(nodes.size());
  {
    std::size_t off = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      offsets[p] = off;
      off += nodes[p]->shape[axis];
    }
  }
  for (std::size_t p = 0; p < nodes.size(); ++p) {
    std::size_t len = nodes[p]->shape[axis];
    for (std::size_t o = 0; o < osp.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < osp.inner; ++i)
          out[(o * osp.len + offsets[p] + l) * osp.inner + i] =
              nodes[p]->value[(o * len + l) * osp.inner + i];
  }
  std::vector<std::size_t> part_lens(nodes.size());
  for (std::size_t p = 0; p < nodes.size(); ++p)
    part_lens[p] = nodes[p]->shape[axis];
  return make_result(
      out_shape, std::move(out), "concat", std::move(nodes),
      [osp, offsets, part_lens](Node& self) {
        for (std::size_t p = 0; p < self.inputs.size(); ++p) {
          const auto& in = self.inputs[p];
          if (!in->requires_grad) continue;
          ensure_grad_buffer(*in);
          std::size_t len = part_lens[p];
          for (std::size_t o = 0; o < osp.outer; ++o)
            for (std::size_t l = 0; l < len; ++l)
              for (std::size_t i = 0; i < osp.inner; ++i)
                in->grad[(o * len + l) * osp.inner + i] +=
                    self.grad[(o * osp.len + offsets[p] + l) * osp.inner + i];
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length) {
  auto na = N(a);
  AxisSplit sp = split_axis("slice", na->shape, axis);
  if (start + length > sp.len)
    op_error("slice", "range [" + std::to_string(start) + "," +
                          std::to_string(start + length) + ") exceeds axis of " +
                          std::to_string(sp.len));
  Shape out_shape = na->shape;
  out_shape[axis] = length;
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < length; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * length + l) * sp.inner + i] =
            na->value[(o * sp.len + start + l) * sp.inner + i];
  return make_result(out_shape, std::move(out), "slice", {na},
                     [sp, start, length](Node& self) {
                       const auto& in = self.inputs[0];
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t l = 0; l < length; ++l)
                           for (std::size_t i = 0; i < sp.inner; ++i)
                             accumulate(
                                 in, (o * sp.len + start + l) * sp.inner + i,
                                 self.grad[(o * length + l) * sp.inner + i]);
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  auto na = N(a);
  if (shape_numel(shape) != na->value.size())
    shape_error("reshape", na->shape, shape);
  return make_result(std::move(shape), na->value, "reshape", {na},
                     [](Node& self) {
                       const auto& in = self.inputs[0];
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         accumulate(in, i, self.grad[i]);
                     });
}

// --- normalization -----------------------------------------------------------

Tensor layer_norm(const Tensor& a) {
  auto na = N(a);
  if (na->shape.empty()) op_error("layer_norm", "rank 0 input");
  std::size_t d = na->shape.back();
  if (d == 0) op_error("layer_norm", "empty last axis");
  std::size_t rows = na->value.size() / d;
  std::vector<double> out(na->value.size());
  // invstd per row, reused by the backward pass
  auto invstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = na->value.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*invstd)[r] = is;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (x[j] - mu) * is;
  }
  return make_result(
      na->shape, std::move(out), "layer_norm", {na},
      [d, rows, invstd](Node& self) {
        const auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        ensure_grad_buffer(*in);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = self.value.data() + r * d;
          const double* g = self.grad.data() + r * d;
          double gmean = 0.0, gymean = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            gmean += g[j];
            gymean += g[j] * y[j];
          }
          gmean /= static_cast<double>(d);
          gymean /= static_cast<double>(d);
          double is = (*invstd)[r];
          double* gi = in->grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j)
            gi[j] += is * (g[j] - gmean - y[j] * gymean);
        }
      });
}

Tensor l2_norm(const Tensor& a) {
  return sqrt(add(sum(mul(a, a)), Tensor::scalar(kNormEps)));
}

// --- gather / scatter ---------------------------------------------------------

namespace {
std::size_t row_width(const char* op, const Shape& s) {
  if (s.empty()) op_error(op, "rank 0 input");
  std::size_t w = 1;
  for (std::size_t k = 1; k < s.size(); ++k) w *= s[k];
  return w;
}
}  // namespace

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index) {
  auto na = N(a);
  std::size_t w = row_width("gather_rows", na->shape);
  std::size_t rows = na->shape[0];
  for (std::size_t id : index)
    if (id >= rows)
      op_error("gather_rows", "index " + std::to_string(id) +
                                  " out of range for " + shape_str(na->shape));
  Shape out_shape = na->shape;
  out_shape[0] = index.size();
  std::vector<double> out(index.size() * w);
  for (std::size_t e = 0; e < index.size(); ++e)
    std::copy_n(na->value.data() + index[e] * w, w, out.data() + e * w);
  auto idx = std::make_shared<std::vector<std::size_t>>(index);
  return make_result(out_shape, std::move(out), "gather_rows", {na},
                     [w, idx](Node& self) {
                       const auto& in = self.inputs[0];
                       if (!in->requires_grad) return;
                       ensure_grad_buffer(*in);
                       for (std::size_t e = 0; e < idx->size(); ++e) {
                         const double* g = self.grad.data() + e * w;
                         double* gi = in->grad.data() + (*idx)[e] * w;
                         for (std::size_t j = 0; j < w; ++j) gi[j] += g[j];
                       }
                     });
}

Tensor scatter_add_rows(const Tensor& a, const std::vector<std::size_t>& index,
                        std::size_t out_rows) {
  auto na = N(a);
  std::size_t w = row_width("scatter_add_rows", na->shape);
  if (index.size() != na->shape[0])
    op_error("scatter_add_rows",
             "index count " + std::to_string(index.size()) +
                 " does not match rows of " + shape_str(na->shape));
  for (std::size_t id : index)
    if (id >= out_rows)
      op_error("scatter_add_rows", "index " + std::to_string(id) +
                                       " out of range for " +
                                       std::to_string(out_rows) + " rows");
  Shape out_shape = na->shape;
  out_shape[0] = out_rows;
  std::vector<double> out(out_rows * w, 0.0);
  for (std::size_t e = 0; e < index.size(); ++e) {
    const double* src = na->value.data() + e * w;
    double* dst = out.data() + index[e] * w;
    for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(index);
  return make_result(out_shape, std::move(out), "scatter_add_rows", {na},
                     [w, idx](Node& self) {
                       const auto& in = self.inputs[0];
                       if (!in->requires_grad) return;
                       ensure_grad_buffer(*in);
                       for (std::size_t e = 0; e < idx->size(); ++e) {
                         const double* g = self.grad.data() + (*idx)[e] * w;
                         double* gi = in->grad.data() + e * w;
                         for (std::size_t j = 0; j < w; ++j) gi[j] += g[j];
                       }
                     });
}

// --- finite differences -------------------------------------------------------

FdReport finite_difference_check(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
    double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");

  Tensor probe = Tensor::from_data(point.shape(),
                                   {point.values().begin(), point.values().end()},
                                   true);
  Tensor out = f(probe);
  if (out.size() != 1)
    throw std::invalid_argument("finite_difference_check: f must return a scalar");
  out.backward();
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  FdReport report;
  Tensor x = point.detach();
  auto vals = x.values_mut();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    double keep = vals[i];
    vals[i] = keep + step;
    double fp = f(x).item();
    vals[i] = keep - step;
    double fm = f(x).item();
    vals[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.non_finite = true;
      report.non_finite_coord = i;
      continue;
    }
    double central = (fp - fm) / (2.0 * step);
    double rel = std::abs(analytic[i] - central) / (std::abs(central) + 1e-12);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coord = i;
    }
  }
  return report;
}

}  // namespace moleclue::ad
