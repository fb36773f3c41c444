#pragma once

// Dense row-major tensor with a reverse-mode differentiation tape.
//
// The op set is fixed and small: elementwise arithmetic, matmul (2-D and
// batched 3-D), layout ops (reshape / permute / concat / slice / gather),
// reductions, pointwise nonlinearities, softmax, and non-differentiable
// top-k index selection. Anything fancier (convolution, attention blocks)
// is built on top via Tape::record, which accepts an arbitrary backward
// closure.
//
// Tensors are immutable after creation and share storage by shared_ptr.
// A tensor participates in differentiation iff it is bound to a Tape
// (requires_grad() == true); ops record themselves whenever any input is
// bound. There is no broadcasting beyond scalar-with-tensor; all shape
// alignment is explicit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace volmark {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  if (s.empty()) return "scalar";
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  return os.str();
}

// Row-major strides (in elements).
inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}
}  // namespace detail

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, Tape<T>* tape = nullptr, int node = -1)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<T>>(std::move(data))),
        tape_(tape),
        node_(node) {
    detail::require(numel(shape_) == data_->size(),
                    "tensor: data length " + std::to_string(data_->size()) +
                        " does not match shape " + shape_str(shape_));
    for (auto e : shape_)
      detail::require(e >= 1, "tensor: zero extent in shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T value) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  bool defined() const { return static_cast<bool>(data_); }
  bool is_scalar() const { return defined() && shape_.empty(); }

  const std::vector<T>& values() const { return *data_; }
  const std::shared_ptr<const std::vector<T>>& storage() const { return data_; }
  T item() const {
    detail::require(size() == 1, "item: tensor " + shape_str(shape_) + " is not a scalar");
    return (*data_)[0];
  }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }

  // Same data, detached from any tape.
  Tensor detached() const { return Tensor(shape_, data_); }

 private:
  Tensor(Shape shape, std::shared_ptr<const std::vector<T>> data)
      : shape_(std::move(shape)), data_(std::move(data)) {}

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;

  friend class Tape<T>;
};

// Reverse-mode tape. Nodes are recorded in construction order, which is a
// topological order by construction (inputs exist before their consumers).
// backward() walks the list once, in reverse, accumulating into per-node
// gradient buffers. Single-threaded.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<T>& out_grad)>;

  // Registers a leaf. Returns the same values bound to this tape.
  Tensor<T> watch(const Tensor<T>& t) {
    detail::require(t.defined(), "watch: undefined tensor");
    Tensor<T> bound = t.detached();
    bound.tape_ = this;
    bound.node_ = record_node(t.size(), nullptr);
    return bound;
  }

  // Records an op output. `backward` may be null for non-differentiable
  // results. Returns the bound output tensor.
  Tensor<T> record(Shape shape, std::vector<T> data, BackwardFn backward) {
    Tensor<T> out(std::move(shape), std::move(data));
    out.tape_ = this;
    out.node_ = record_node(out.size(), std::move(backward));
    return out;
  }

  void backward(const Tensor<T>& loss) {
    detail::require(loss.tape() == this && loss.node() >= 0,
                    "backward: loss is not recorded on this tape");
    detail::require(loss.size() == 1 && loss.rank() == 0,
                    "backward: loss must be a 0-dimensional scalar, got " +
                        shape_str(loss.shape()));
    grad_at(loss.node(), 1).assign(1, T(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward) continue;
      if (grads_[i].empty()) continue;  // not reachable from the loss
      n.backward(*this, grads_[i]);
    }
  }

  // Gradient buffer for accumulation; allocated zero-filled on first touch.
  std::vector<T>& grad_at(int node, std::size_t size) {
    auto& g = grads_.at(static_cast<std::size_t>(node));
    if (g.empty()) g.assign(size, T(0));
    return g;
  }

  // Gradient of a watched/recorded tensor after backward(); zeros if the
  // tensor did not influence the loss.
  std::vector<T> grad(const Tensor<T>& t) const {
    detail::require(t.tape() == this && t.node() >= 0, "grad: tensor is not on this tape");
    const auto& g = grads_[static_cast<std::size_t>(t.node())];
    if (g.empty()) return std::vector<T>(t.size(), T(0));
    return g;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t size;
    BackwardFn backward;
  };

  int record_node(std::size_t size, BackwardFn fn) {
    nodes_.push_back(Node{size, std::move(fn)});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& data) {
  for (const T& v : data)
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + ": non-finite value produced");
}

// Resolves the tape shared by a set of inputs (all bound inputs must agree).
template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : inputs) {
    if (!t->requires_grad()) continue;
    if (tape == nullptr) tape = t->tape();
    require(tape == t->tape(), "op: inputs live on different tapes");
  }
  return tape;
}

// Builds the output tensor, recording `backward` iff any input is bound.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> data,
                  std::initializer_list<const Tensor<T>*> inputs,
                  typename Tape<T>::BackwardFn backward) {
  check_finite(op, data);
  Tape<T>* tape = common_tape<T>(inputs);
  if (tape == nullptr) return Tensor<T>(std::move(shape), std::move(data));
  return tape->record(std::move(shape), std::move(data), std::move(backward));
}

template <typename T>
void accumulate(Tape<T>& tape, const Tensor<T>& input, const std::vector<T>& delta) {
  if (!input.requires_grad()) return;
  auto& g = tape.grad_at(input.node(), input.size());
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (same shape, or scalar with tensor)
// ---------------------------------------------------------------------------

namespace detail {

enum class Arith { Add, Sub, Mul };

template <typename T>
Tensor<T> arith(const char* name, Arith kind, const Tensor<T>& a, const Tensor<T>& b) {
  const bool a_scalar = a.is_scalar(), b_scalar = b.is_scalar();
  require(a_scalar || b_scalar || a.shape() == b.shape(),
          std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[a_scalar ? 0 : i];
    const T y = bv[b_scalar ? 0 : i];
    out[i] = kind == Arith::Add ? x + y : kind == Arith::Sub ? x - y : x * y;
  }
  auto backward = [kind, a, b, a_scalar, b_scalar, n](Tape<T>& tape,
                                                      const std::vector<T>& g) {
    if (a.requires_grad()) {
      auto& ga = tape.grad_at(a.node(), a.size());
      for (std::size_t i = 0; i < n; ++i) {
        T d = g[i];
        if (kind == Arith::Mul) d *= b.values()[b_scalar ? 0 : i];
        ga[a_scalar ? 0 : i] += d;
      }
    }
    if (b.requires_grad()) {
      auto& gb = tape.grad_at(b.node(), b.size());
      for (std::size_t i = 0; i < n; ++i) {
        T d = g[i];
        if (kind == Arith::Mul)
          d *= a.values()[a_scalar ? 0 : i];
        else if (kind == Arith::Sub)
          d = -d;
        gb[b_scalar ? 0 : i] += d;
      }
    }
  };
  return make_op<T>(name, out_shape, std::move(out), {&a, &b}, backward);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::arith<T>("add", detail::Arith::Add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::arith<T>("sub", detail::Arith::Sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::arith<T>("mul", detail::Arith::Mul, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  return detail::arith<T>("mul", detail::Arith::Mul, a, Tensor<T>::scalar(s));
}

// ---------------------------------------------------------------------------
// Matmul: 2-D (M,K)x(K,N) and batched 3-D (B,M,K)x(B,K,N)
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    T* c_row = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = a_row[k];
      const T* b_row = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T  (i.e. C = A * B^T with B stored row-major K x N)
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a_row = A + i * N;
    T* c_row = C + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b_row = B + k * N;
      T acc = T(0);
      for (std::size_t j = 0; j < N; ++j) acc += a_row[j] * b_row[j];
      c_row[k] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a_row = A + i * K;
    const T* b_row = B + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = a_row[k];
      T* c_row = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require((as.size() == 2 && bs.size() == 2) || (as.size() == 3 && bs.size() == 3),
                  "matmul: expects 2-D x 2-D or 3-D x 3-D, got " + shape_str(as) + " vs " +
                      shape_str(bs));
  const bool batched = as.size() == 3;
  const std::size_t B = batched ? as[0] : 1;
  const std::size_t M = as[batched ? 1 : 0];
  const std::size_t K = as[batched ? 2 : 1];
  const std::size_t Kb = bs[batched ? 1 : 0];
  const std::size_t N = bs[batched ? 2 : 1];
  detail::require(K == Kb && (!batched || bs[0] == B),
                  "matmul: incompatible shapes " + shape_str(as) + " vs " + shape_str(bs));

  Shape out_shape = batched ? Shape{B, M, N} : Shape{M, N};
  std::vector<T> out(numel(out_shape), T(0));
  for (std::size_t bi = 0; bi < B; ++bi)
    detail::gemm_nn(M, K, N, a.values().data() + bi * M * K, b.values().data() + bi * K * N,
                    out.data() + bi * M * N);

  auto backward = [a, b, B, M, K, N](Tape<T>& tape, const std::vector<T>& g) {
    if (a.requires_grad()) {
      auto& ga = tape.grad_at(a.node(), a.size());
      for (std::size_t bi = 0; bi < B; ++bi)
        detail::gemm_nt(M, N, K, g.data() + bi * M * N, b.values().data() + bi * K * N,
                        ga.data() + bi * M * K);
    }
    if (b.requires_grad()) {
      auto& gb = tape.grad_at(b.node(), b.size());
      for (std::size_t bi = 0; bi < B; ++bi)
        detail::gemm_tn(M, K, N, a.values().data() + bi * M * K, g.data() + bi * M * N,
                        gb.data() + bi * K * N);
    }
  };
  return detail::make_op<T>("matmul", std::move(out_shape), std::move(out), {&a, &b},
                            backward);
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  detail::require(numel(new_shape) == x.size(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " +
                      shape_str(new_shape));
  std::vector<T> out = x.values();
  auto backward = [x](Tape<T>& tape, const std::vector<T>& g) {
    detail::accumulate(tape, x, g);
  };
  return detail::make_op<T>("reshape", std::move(new_shape), std::move(out), {&x}, backward);
}

// Permute-then-copy; `perm[i]` names the source axis that lands at axis i.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  detail::require(perm.size() == s.size(), "permute: rank mismatch for " + shape_str(s));
  std::vector<bool> seen(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    detail::require(perm[i] < s.size() && !seen[perm[i]], "permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = s[perm[i]];
  }
  const auto in_strides = row_major_strides(s);
  const auto out_strides = row_major_strides(out_shape);
  const std::size_t n = x.size();
  const std::size_t rank = s.size();

  // source flat index for each destination flat index
  std::vector<std::size_t> src_of(n);
  std::vector<std::size_t> coord(rank, 0);
  for (std::size_t di = 0; di < n; ++di) {
    std::size_t si = 0;
    for (std::size_t ax = 0; ax < rank; ++ax) si += coord[ax] * in_strides[perm[ax]];
    src_of[di] = si;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++coord[ax] < out_shape[ax]) break;
      coord[ax] = 0;
    }
  }
  std::vector<T> out(n);
  const auto& xv = x.values();
  for (std::size_t di = 0; di < n; ++di) out[di] = xv[src_of[di]];

  auto src = std::make_shared<std::vector<std::size_t>>(std::move(src_of));
  auto backward = [x, src](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    for (std::size_t di = 0; di < g.size(); ++di) gx[(*src)[di]] += g[di];
  };
  return detail::make_op<T>("permute", std::move(out_shape), std::move(out), {&x}, backward);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "transpose: expects a 2-D tensor, got " +
                                     shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::require(axis < s0.size(), "concat: axis out of range");
  Shape out_shape = s0;
  std::size_t total = s0[axis];
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& sp = parts[p].shape();
    detail::require(sp.size() == s0.size(), "concat: rank mismatch");
    for (std::size_t ax = 0; ax < s0.size(); ++ax)
      detail::require(ax == axis || sp[ax] == s0[ax],
                      "concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(sp));
    total += sp[axis];
  }
  out_shape[axis] = total;

  // outer x (axis extent) x inner blocks
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= s0[ax];
  for (std::size_t ax = axis + 1; ax < s0.size(); ++ax) inner *= s0[ax];

  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;  // in axis units
  std::vector<std::size_t> offsets(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    offsets[p] = offset;
    const std::size_t ext = parts[p].shape()[axis];
    const auto& pv = parts[p].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pv.begin() + o * ext * inner, pv.begin() + (o + 1) * ext * inner,
                out.begin() + (o * total + offset) * inner);
    offset += ext;
  }

  Tape<T>* tape = nullptr;
  for (const auto& p : parts)
    if (p.requires_grad()) {
      detail::require(tape == nullptr || tape == p.tape(),
                      "concat: inputs live on different tapes");
      tape = p.tape();
    }
  detail::check_finite("concat", out);
  if (tape == nullptr) return Tensor<T>(std::move(out_shape), std::move(out));

  auto parts_copy = std::make_shared<std::vector<Tensor<T>>>(parts);
  auto backward = [parts_copy, offsets, outer, inner, total](Tape<T>& tape_ref,
                                                             const std::vector<T>& g) {
    for (std::size_t p = 0; p < parts_copy->size(); ++p) {
      const Tensor<T>& part = (*parts_copy)[p];
      if (!part.requires_grad()) continue;
      auto& gp = tape_ref.grad_at(part.node(), part.size());
      const std::size_t pext = part.size() / (outer * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        const T* gsrc = g.data() + (o * total + offsets[p]) * inner;
        T* dst = gp.data() + o * pext * inner;
        for (std::size_t i = 0; i < pext * inner; ++i) dst[i] += gsrc[i];
      }
    }
  };
  return tape->record(std::move(out_shape), std::move(out), backward);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  detail::require(axis < s.size(), "slice: axis out of range for " + shape_str(s));
  detail::require(len >= 1 && start + len <= s[axis],
                  "slice: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") exceeds axis extent " +
                      std::to_string(s[axis]));
  Shape out_shape = s;
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= s[ax];
  for (std::size_t ax = axis + 1; ax < s.size(); ++ax) inner *= s[ax];
  const std::size_t ext = s[axis];

  std::vector<T> out(numel(out_shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(xv.begin() + (o * ext + start) * inner, xv.begin() + (o * ext + start + len) * inner,
              out.begin() + o * len * inner);

  auto backward = [x, outer, inner, ext, start, len](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    for (std::size_t o = 0; o < outer; ++o) {
      const T* gsrc = g.data() + o * len * inner;
      T* dst = gx.data() + (o * ext + start) * inner;
      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += gsrc[i];
    }
  };
  return detail::make_op<T>("slice", std::move(out_shape), std::move(out), {&x}, backward);
}

// Gathers rows along axis 0. `x` is treated as [rows, inner...]; the output
// holds indices.size() rows. Index -1 yields a zero row (used for padding);
// duplicate indices are allowed and their gradients accumulate.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& indices) {
  detail::require(x.rank() >= 1, "gather: scalar input");
  const std::size_t rows = x.shape()[0];
  const std::size_t inner = x.size() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  detail::require(!indices.empty(), "gather: empty index list");
  std::vector<T> out(indices.size() * inner);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::int64_t src = indices[r];
    detail::require(src >= -1 && src < static_cast<std::int64_t>(rows),
                    "gather: index " + std::to_string(src) + " out of range for " +
                        std::to_string(rows) + " rows");
    if (src < 0)
      std::fill(out.begin() + r * inner, out.begin() + (r + 1) * inner, T(0));
    else
      std::copy(xv.begin() + src * inner, xv.begin() + (src + 1) * inner,
                out.begin() + r * inner);
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(indices);
  auto backward = [x, idx, inner](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    for (std::size_t r = 0; r < idx->size(); ++r) {
      const std::int64_t src = (*idx)[r];
      if (src < 0) continue;
      const T* gsrc = g.data() + r * inner;
      T* dst = gx.data() + static_cast<std::size_t>(src) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += gsrc[i];
    }
  };
  return detail::make_op<T>("gather", std::move(out_shape), std::move(out), {&x}, backward);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fold>
Tensor<T> reduce_all(const char* name, const Tensor<T>& x, bool mean, Fold) {
  const auto& xv = x.values();
  T acc = T(0);
  for (const T& v : xv) acc += v;
  const T scale = mean ? T(1) / static_cast<T>(x.size()) : T(1);
  std::vector<T> out{acc * scale};
  auto backward = [x, scale](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    const T d = g[0] * scale;
    for (auto& v : gx) v += d;
  };
  return make_op<T>(name, Shape{}, std::move(out), {&x}, backward);
}

struct AxisGeom {
  std::size_t outer, ext, inner;
};

template <typename T>
AxisGeom axis_geom(const char* name, const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), std::string(name) + ": axis " + std::to_string(axis) +
                               " out of range for " + shape_str(x.shape()));
  AxisGeom g{1, x.shape()[axis], 1};
  for (std::size_t ax = 0; ax < axis; ++ax) g.outer *= x.shape()[ax];
  for (std::size_t ax = axis + 1; ax < x.rank(); ++ax) g.inner *= x.shape()[ax];
  return g;
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  return detail::reduce_all("reduce_sum", x, false, 0);
}
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  return detail::reduce_all("reduce_mean", x, true, 0);
}

// Reduces one axis (the axis is removed from the shape).
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis, bool mean = false) {
  const auto geom = detail::axis_geom("reduce_sum", x, axis);
  Shape out_shape;
  for (std::size_t ax = 0; ax < x.rank(); ++ax)
    if (ax != axis) out_shape.push_back(x.shape()[ax]);
  std::vector<T> out(geom.outer * geom.inner, T(0));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t e = 0; e < geom.ext; ++e) {
      const T* src = xv.data() + (o * geom.ext + e) * geom.inner;
      T* dst = out.data() + o * geom.inner;
      for (std::size_t i = 0; i < geom.inner; ++i) dst[i] += src[i];
    }
  const T scale = mean ? T(1) / static_cast<T>(geom.ext) : T(1);
  if (mean)
    for (auto& v : out) v *= scale;
  auto backward = [x, geom, scale](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    for (std::size_t o = 0; o < geom.outer; ++o)
      for (std::size_t e = 0; e < geom.ext; ++e) {
        const T* gsrc = g.data() + o * geom.inner;
        T* dst = gx.data() + (o * geom.ext + e) * geom.inner;
        for (std::size_t i = 0; i < geom.inner; ++i) dst[i] += gsrc[i] * scale;
      }
  };
  return detail::make_op<T>("reduce_sum", std::move(out_shape), std::move(out), {&x},
                            backward);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis) {
  return reduce_sum(x, axis, /*mean=*/true);
}

// Max along an axis. Gradient flows to the first maximal element (lowest
// index along the axis) when there are ties.
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, std::size_t axis) {
  const auto geom = detail::axis_geom("reduce_max", x, axis);
  Shape out_shape;
  for (std::size_t ax = 0; ax < x.rank(); ++ax)
    if (ax != axis) out_shape.push_back(x.shape()[ax]);
  std::vector<T> out(geom.outer * geom.inner);
  std::vector<std::size_t> arg(geom.outer * geom.inner);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t i = 0; i < geom.inner; ++i) {
      T best = xv[(o * geom.ext) * geom.inner + i];
      std::size_t best_e = 0;
      for (std::size_t e = 1; e < geom.ext; ++e) {
        const T v = xv[(o * geom.ext + e) * geom.inner + i];
        if (v > best) {
          best = v;
          best_e = e;
        }
      }
      out[o * geom.inner + i] = best;
      arg[o * geom.inner + i] = best_e;
    }
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(arg));
  auto backward = [x, geom, argmax](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    for (std::size_t o = 0; o < geom.outer; ++o)
      for (std::size_t i = 0; i < geom.inner; ++i) {
        const std::size_t e = (*argmax)[o * geom.inner + i];
        gx[(o * geom.ext + e) * geom.inner + i] += g[o * geom.inner + i];
      }
  };
  return detail::make_op<T>("reduce_max", std::move(out_shape), std::move(out), {&x},
                            backward);
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> pointwise(const char* name, const Tensor<T>& x, Fwd fwd, Bwd dfdx_from_x_and_y) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto y = std::make_shared<std::vector<T>>(out);
  auto backward = [x, y, dfdx_from_x_and_y](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    const auto& xv2 = x.values();
    for (std::size_t i = 0; i < g.size(); ++i)
      gx[i] += g[i] * dfdx_from_x_and_y(xv2[i], (*y)[i]);
  };
  return make_op<T>(name, x.shape(), std::move(out), {&x}, backward);
}

}  // namespace detail

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::pointwise(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::pointwise(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::pointwise(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::pointwise(
      "gelu", x,
      [](T v) {
        return static_cast<T>(0.5 * static_cast<double>(v) *
                              (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
      },
      [](T v, T) {
        const double d = static_cast<double>(v);
        const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
        return static_cast<T>(cdf + d * pdf);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::pointwise(
      "sigmoid", x,
      [](T v) {
        // stable for both signs
        if (v >= T(0)) {
          const T e = std::exp(-v);
          return T(1) / (T(1) + e);
        }
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Softmax along `axis`, max-shifted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto geom = detail::axis_geom("softmax", x, axis);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t i = 0; i < geom.inner; ++i) {
      const auto at = [&](std::size_t e) { return (o * geom.ext + e) * geom.inner + i; };
      T mx = xv[at(0)];
      for (std::size_t e = 1; e < geom.ext; ++e) mx = std::max(mx, xv[at(e)]);
      T denom = T(0);
      for (std::size_t e = 0; e < geom.ext; ++e) {
        const T v = std::exp(xv[at(e)] - mx);
        out[at(e)] = v;
        denom += v;
      }
      const T inv = T(1) / denom;
      for (std::size_t e = 0; e < geom.ext; ++e) out[at(e)] *= inv;
    }
  auto y = std::make_shared<std::vector<T>>(out);
  auto backward = [x, y, geom](Tape<T>& tape, const std::vector<T>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    for (std::size_t o = 0; o < geom.outer; ++o)
      for (std::size_t i = 0; i < geom.inner; ++i) {
        const auto at = [&](std::size_t e) { return (o * geom.ext + e) * geom.inner + i; };
        T dot = T(0);
        for (std::size_t e = 0; e < geom.ext; ++e) dot += g[at(e)] * (*y)[at(e)];
        for (std::size_t e = 0; e < geom.ext; ++e)
          gx[at(e)] += (*y)[at(e)] * (g[at(e)] - dot);
      }
  };
  return detail::make_op<T>("softmax", x.shape(), std::move(out), {&x}, backward);
}

// ---------------------------------------------------------------------------
// Top-k indices (non-differentiable; records nothing on any tape)
// ---------------------------------------------------------------------------

// Returns, for each 1-D lane along `axis`, the indices of the k largest
// values. Ties break toward the lowest index; within each lane the selected
// indices are reported in ascending order. Output is row-major with the
// axis extent replaced by k.
template <typename T>
std::vector<std::size_t> topk_indices(const Tensor<T>& x, std::size_t axis, std::size_t k) {
  const auto geom = detail::axis_geom("topk_indices", x, axis);
  detail::require(k >= 1 && k <= geom.ext,
                  "topk_indices: k=" + std::to_string(k) + " exceeds axis extent " +
                      std::to_string(geom.ext));
  const auto& xv = x.values();
  std::vector<std::size_t> out;
  out.reserve(geom.outer * geom.inner * k);
  std::vector<std::size_t> order(geom.ext);
  for (std::size_t o = 0; o < geom.outer; ++o)
    for (std::size_t i = 0; i < geom.inner; ++i) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      const auto at = [&](std::size_t e) { return (o * geom.ext + e) * geom.inner + i; };
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                        order.end(), [&](std::size_t l, std::size_t r) {
                          if (xv[at(l)] != xv[at(r)]) return xv[at(l)] > xv[at(r)];
                          return l < r;
                        });
      std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
      out.insert(out.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    }
  return out;
}

}  // namespace volmark
