#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "okdhp/common.hpp"
#include "okdhp/parallel.hpp"

// Dense rank-1..4 tensors with a tape-based reverse-mode autodiff graph.
// Scalar type is a template parameter: float for training, double for the
// verification oracles. Tensors are handles with shared storage; values are
// immutable once an op has produced them, only grad buffers mutate.

namespace okdhp {

enum class Phase { kTrain, kEval };
enum class PoolMode { kMax, kAvg };

template <typename S> struct TensorData {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad; // empty until first needed
    bool requires_grad = false;
    bool leaf = true;
};

template <typename S> class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& sh, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = sh;
        t.d_->val.assign(static_cast<std::size_t>(sh.numel()), S(0));
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(const Shape& sh, S v, bool requires_grad = false) {
        Tensor t = zeros(sh, requires_grad);
        std::fill(t.d_->val.begin(), t.d_->val.end(), v);
        return t;
    }

    static Tensor from(const Shape& sh, std::vector<S> data, bool requires_grad = false) {
        if (static_cast<dim_t>(data.size()) != sh.numel())
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + sh.str());
        Tensor t;
        t.d_ = std::make_shared<TensorData<S>>();
        t.d_->shape = sh;
        t.d_->val = std::move(data);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(S v) { return full(Shape{}, v); }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    dim_t numel() const { return d_->shape.numel(); }
    bool requires_grad() const { return d_->requires_grad; }
    bool leaf() const { return d_->leaf; }

    // Tensor is a handle with shared storage; const-ness of the handle does
    // not protect the pointee (same convention as shared_ptr).
    S* data() const { return d_->val.data(); }
    S* grad() const { return d_->grad.empty() ? nullptr : d_->grad.data(); }

    void set_requires_grad(bool r) { d_->requires_grad = r; }

    void ensure_grad() const {
        if (d_->grad.size() != d_->val.size()) d_->grad.assign(d_->val.size(), S(0));
    }

    void zero_grad() const {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
    }

    /// Deep copy (values only; fresh grad state).
    Tensor clone(bool requires_grad = false) const {
        Tensor t = from(d_->shape, d_->val, requires_grad);
        return t;
    }

    S value() const {
        if (numel() != 1) throw ContractError("value() on non-scalar tensor " + shape().str());
        return d_->val[0];
    }

    template <typename... Ix> S& at(Ix... ix) const { return d_->val[offset_of(ix...)]; }
    template <typename... Ix> S grad_at(Ix... ix) const {
        return d_->grad.empty() ? S(0) : d_->grad[offset_of(ix...)];
    }

    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

    // internal, used by the op layer
    TensorData<S>* raw() const { return d_.get(); }
    void mark_graph_output() {
        d_->requires_grad = true;
        d_->leaf = false;
    }

  private:
    template <typename... Ix> std::size_t offset_of(Ix... ix) const {
        const dim_t idx[] = {static_cast<dim_t>(ix)...};
        const int r = d_->shape.rank();
        if (static_cast<int>(sizeof...(ix)) != r)
            throw ContractError("index rank mismatch for shape " + d_->shape.str());
        dim_t off = 0;
        for (int i = 0; i < r; ++i) off = off * d_->shape[i] + idx[i];
        return static_cast<std::size_t>(off);
    }

    std::shared_ptr<TensorData<S>> d_;
};

// ---------------------------------------------------------------------------
// Tape. Nodes are appended in forward order; backward replays the closures in
// exact reverse append order, accumulating (+=) into input grads, so a tensor
// consumed twice receives both contributions. Leaf grads are never cleared by
// backward; repeated calls accumulate.
// ---------------------------------------------------------------------------

template <typename S> class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }
    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    void record(const char* op, const Tensor<S>& out, std::vector<Tensor<S>> inputs,
                std::function<void()> back) {
        nodes_.push_back(Node{op, out, std::move(inputs), std::move(back)});
    }

    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward root must be scalar, got shape " + loss.shape().str());
        if (!loss.requires_grad())
            throw ContractError("backward root does not require grad (graph not recorded?)");
        for (auto& n : nodes_) {
            n.out.ensure_grad();
            n.out.zero_grad();
            for (auto& in : n.inputs)
                if (in.requires_grad()) in.ensure_grad();
        }
        Tensor<S> root = loss;
        root.ensure_grad();
        root.grad()[0] += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->back) it->back();
    }

  private:
    struct Node {
        const char* op;
        Tensor<S> out;
        std::vector<Tensor<S>> inputs;
        std::function<void()> back;
    };

    std::vector<Node> nodes_;
    bool recording_;
};

namespace detail {

template <typename S> inline void check_finite(const Tensor<S>& t, const char* op) {
#ifndef NDEBUG
    const S* p = t.data();
    const dim_t n = t.numel();
    for (dim_t i = 0; i < n; ++i)
        if (!std::isfinite(static_cast<double>(p[i])))
            throw NumericError(std::string("non-finite value in output of ") + op);
#else
    (void)t;
    (void)op;
#endif
}

template <typename S>
inline Tensor<S> op_output(Graph<S>& g, const Shape& sh, bool any_input_grad) {
    Tensor<S> y = Tensor<S>::zeros(sh);
    if (g.recording() && any_input_grad) y.mark_graph_output();
    return y;
}

// ----- dense kernels -------------------------------------------------------

// C (M x P) = A (M x K) * B (K x P), row-major. Four output rows share each
// B row load; the j loop vectorizes.
template <typename S>
inline void gemm(dim_t M, dim_t K, dim_t P, const S* A, const S* B, S* C, bool accumulate) {
    dim_t i = 0;
    for (; i + 4 <= M; i += 4) {
        S* c0 = C + (i + 0) * P;
        S* c1 = C + (i + 1) * P;
        S* c2 = C + (i + 2) * P;
        S* c3 = C + (i + 3) * P;
        if (!accumulate) {
            std::fill(c0, c0 + P, S(0));
            std::fill(c1, c1 + P, S(0));
            std::fill(c2, c2 + P, S(0));
            std::fill(c3, c3 + P, S(0));
        }
        const S* a0 = A + (i + 0) * K;
        const S* a1 = A + (i + 1) * K;
        const S* a2 = A + (i + 2) * K;
        const S* a3 = A + (i + 3) * K;
        for (dim_t k = 0; k < K; ++k) {
            const S s0 = a0[k], s1 = a1[k], s2 = a2[k], s3 = a3[k];
            const S* bk = B + k * P;
            for (dim_t j = 0; j < P; ++j) {
                c0[j] += s0 * bk[j];
                c1[j] += s1 * bk[j];
                c2[j] += s2 * bk[j];
                c3[j] += s3 * bk[j];
            }
        }
    }
    for (; i < M; ++i) {
        S* ci = C + i * P;
        if (!accumulate) std::fill(ci, ci + P, S(0));
        const S* ai = A + i * K;
        for (dim_t k = 0; k < K; ++k) {
            const S s = ai[k];
            const S* bk = B + k * P;
            for (dim_t j = 0; j < P; ++j) ci[j] += s * bk[j];
        }
    }
}

// OUT (M x K) += A (M x P) * B (K x P)^T, i.e. OUT[i][k] += dot(A[i], B[k]).
template <typename S>
inline void gemm_abt_acc(dim_t M, dim_t K, dim_t P, const S* A, const S* B, S* OUT) {
    for (dim_t i = 0; i < M; ++i) {
        const S* ai = A + i * P;
        S* oi = OUT + i * K;
        for (dim_t k = 0; k < K; ++k) {
            const S* bk = B + k * P;
            S acc = S(0);
            for (dim_t j = 0; j < P; ++j) acc += ai[j] * bk[j];
            oi[k] += acc;
        }
    }
}

// col layout: (C*kh*kw) rows x (Ho*Wo) cols.
template <typename S>
inline void im2col(const S* x, dim_t C, dim_t H, dim_t W, dim_t kh, dim_t kw, dim_t stride,
                   dim_t pad, dim_t Ho, dim_t Wo, S* col) {
    for (dim_t c = 0; c < C; ++c) {
        const S* xc = x + c * H * W;
        for (dim_t ki = 0; ki < kh; ++ki) {
            for (dim_t kj = 0; kj < kw; ++kj) {
                S* row = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (dim_t oy = 0; oy < Ho; ++oy) {
                    const dim_t iy = oy * stride - pad + ki;
                    S* dst = row + oy * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + Wo, S(0));
                        continue;
                    }
                    const S* src = xc + iy * W;
                    if (stride == 1) {
                        const dim_t lo = std::max<dim_t>(0, pad - kj);
                        const dim_t hi = std::min<dim_t>(Wo, W + pad - kj);
                        std::fill(dst, dst + std::min(lo, Wo), S(0));
                        if (hi > lo)
                            std::memcpy(dst + lo, src + lo - pad + kj,
                                        static_cast<std::size_t>(hi - lo) * sizeof(S));
                        if (hi < Wo) std::fill(dst + std::max(hi, lo), dst + Wo, S(0));
                    } else {
                        for (dim_t ox = 0; ox < Wo; ++ox) {
                            const dim_t ix = ox * stride - pad + kj;
                            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : S(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename S>
inline void col2im_add(const S* col, dim_t C, dim_t H, dim_t W, dim_t kh, dim_t kw, dim_t stride,
                       dim_t pad, dim_t Ho, dim_t Wo, S* dx) {
    for (dim_t c = 0; c < C; ++c) {
        S* xc = dx + c * H * W;
        for (dim_t ki = 0; ki < kh; ++ki) {
            for (dim_t kj = 0; kj < kw; ++kj) {
                const S* row = col + ((c * kh + ki) * kw + kj) * (Ho * Wo);
                for (dim_t oy = 0; oy < Ho; ++oy) {
                    const dim_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) continue;
                    const S* src = row + oy * Wo;
                    S* dst = xc + iy * W;
                    for (dim_t ox = 0; ox < Wo; ++ox) {
                        const dim_t ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename S> inline std::vector<S>& conv_scratch() {
    static thread_local std::vector<S> buf;
    return buf;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename S> Tensor<S> add(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(format_two_shapes("add shape mismatch", a.shape(), b.shape()));
    const dim_t n = a.numel();
    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad() || b.requires_grad());
    const S* pa = a.data();
    const S* pb = b.data();
    S* py = y.data();
    for (dim_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    detail::check_finite(y, "add");
    if (y.requires_grad()) {
        g.record("add", y, {a, b}, [a, b, y]() {
            const S* gy = y.grad();
            const dim_t m = y.numel();
            if (a.requires_grad()) {
                S* ga = a.grad();
                for (dim_t i = 0; i < m; ++i) ga[i] += gy[i];
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                for (dim_t i = 0; i < m; ++i) gb[i] += gy[i];
            }
        });
    }
    return y;
}

template <typename S> Tensor<S> sub(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(format_two_shapes("sub shape mismatch", a.shape(), b.shape()));
    const dim_t n = a.numel();
    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad() || b.requires_grad());
    const S* pa = a.data();
    const S* pb = b.data();
    S* py = y.data();
    for (dim_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
    detail::check_finite(y, "sub");
    if (y.requires_grad()) {
        g.record("sub", y, {a, b}, [a, b, y]() {
            const S* gy = y.grad();
            const dim_t m = y.numel();
            if (a.requires_grad()) {
                S* ga = a.grad();
                for (dim_t i = 0; i < m; ++i) ga[i] += gy[i];
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                for (dim_t i = 0; i < m; ++i) gb[i] -= gy[i];
            }
        });
    }
    return y;
}

template <typename S> Tensor<S> mul(Graph<S>& g, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(format_two_shapes("mul shape mismatch", a.shape(), b.shape()));
    const dim_t n = a.numel();
    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad() || b.requires_grad());
    const S* pa = a.data();
    const S* pb = b.data();
    S* py = y.data();
    for (dim_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
    detail::check_finite(y, "mul");
    if (y.requires_grad()) {
        g.record("mul", y, {a, b}, [a, b, y]() {
            const S* gy = y.grad();
            const S* pa2 = a.data();
            const S* pb2 = b.data();
            const dim_t m = y.numel();
            if (a.requires_grad()) {
                S* ga = a.grad();
                for (dim_t i = 0; i < m; ++i) ga[i] += gy[i] * pb2[i];
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                for (dim_t i = 0; i < m; ++i) gb[i] += gy[i] * pa2[i];
            }
        });
    }
    return y;
}

/// Multiply by a compile-time-constant scalar (not a graph input).
template <typename S> Tensor<S> scale(Graph<S>& g, const Tensor<S>& a, S c) {
    const dim_t n = a.numel();
    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad());
    const S* pa = a.data();
    S* py = y.data();
    for (dim_t i = 0; i < n; ++i) py[i] = pa[i] * c;
    detail::check_finite(y, "scale");
    if (y.requires_grad()) {
        g.record("scale", y, {a}, [a, y, c]() {
            const S* gy = y.grad();
            S* ga = a.grad();
            const dim_t m = y.numel();
            for (dim_t i = 0; i < m; ++i) ga[i] += gy[i] * c;
        });
    }
    return y;
}

template <typename S> Tensor<S> sum(Graph<S>& g, const Tensor<S>& a) {
    const dim_t n = a.numel();
    const S* pa = a.data();
    S acc = S(0);
    for (dim_t i = 0; i < n; ++i) acc += pa[i];
    Tensor<S> y = detail::op_output(g, Shape{}, a.requires_grad());
    y.data()[0] = acc;
    detail::check_finite(y, "sum");
    if (y.requires_grad()) {
        g.record("sum", y, {a}, [a, y]() {
            const S gy = y.grad()[0];
            S* ga = a.grad();
            const dim_t m = a.numel();
            for (dim_t i = 0; i < m; ++i) ga[i] += gy;
        });
    }
    return y;
}

template <typename S> Tensor<S> log(Graph<S>& g, const Tensor<S>& a) {
    const dim_t n = a.numel();
    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad());
    const S* pa = a.data();
    S* py = y.data();
    for (dim_t i = 0; i < n; ++i) py[i] = std::log(pa[i]);
    if (y.requires_grad()) {
        g.record("log", y, {a}, [a, y]() {
            const S* gy = y.grad();
            const S* pa2 = a.data();
            S* ga = a.grad();
            const dim_t m = y.numel();
            for (dim_t i = 0; i < m; ++i) ga[i] += gy[i] / pa2[i];
        });
    }
    return y;
}

/// max(x, floor); subgradient 0 where the floor binds.
template <typename S> Tensor<S> clamp_min(Graph<S>& g, const Tensor<S>& a, S floor) {
    const dim_t n = a.numel();
    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad());
    const S* pa = a.data();
    S* py = y.data();
    for (dim_t i = 0; i < n; ++i) py[i] = pa[i] > floor ? pa[i] : floor;
    detail::check_finite(y, "clamp_min");
    if (y.requires_grad()) {
        g.record("clamp_min", y, {a}, [a, y, floor]() {
            const S* gy = y.grad();
            const S* pa2 = a.data();
            S* ga = a.grad();
            const dim_t m = y.numel();
            for (dim_t i = 0; i < m; ++i)
                if (pa2[i] > floor) ga[i] += gy[i];
        });
    }
    return y;
}

template <typename S> Tensor<S> relu(Graph<S>& g, const Tensor<S>& a) {
    const dim_t n = a.numel();
    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad());
    const S* pa = a.data();
    S* py = y.data();
    for (dim_t i = 0; i < n; ++i) py[i] = pa[i] > S(0) ? pa[i] : S(0);
    detail::check_finite(y, "relu");
    if (y.requires_grad()) {
        g.record("relu", y, {a}, [a, y]() {
            const S* gy = y.grad();
            const S* pa2 = a.data();
            S* ga = a.grad();
            const dim_t m = y.numel();
            for (dim_t i = 0; i < m; ++i)
                if (pa2[i] > S(0)) ga[i] += gy[i];
        });
    }
    return y;
}

/// Stops tape recording; values are copied into a fresh leaf.
template <typename S> Tensor<S> detach(Graph<S>&, const Tensor<S>& a) {
    return a.clone(false);
}

template <typename S> Tensor<S> reshape(Graph<S>& g, const Tensor<S>& a, const Shape& sh) {
    if (sh.numel() != a.numel())
        throw ShapeError(format_two_shapes("reshape element count mismatch", a.shape(), sh));
    Tensor<S> y = detail::op_output(g, sh, a.requires_grad());
    std::memcpy(y.data(), a.data(), static_cast<std::size_t>(a.numel()) * sizeof(S));
    if (y.requires_grad()) {
        g.record("reshape", y, {a}, [a, y]() {
            const S* gy = y.grad();
            S* ga = a.grad();
            const dim_t m = y.numel();
            for (dim_t i = 0; i < m; ++i) ga[i] += gy[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// softmax / concat / select / batch_mean
// ---------------------------------------------------------------------------

template <typename S> Tensor<S> softmax(Graph<S>& g, const Tensor<S>& a, int axis) {
    const int r = a.shape().rank();
    if (axis < 0 || axis >= r)
        throw ContractError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                            a.shape().str());
    dim_t outer = 1, inner = 1;
    const dim_t L = a.shape()[axis];
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];

    Tensor<S> y = detail::op_output(g, a.shape(), a.requires_grad());
    const S* pa = a.data();
    S* py = y.data();
    for (dim_t o = 0; o < outer; ++o) {
        for (dim_t in = 0; in < inner; ++in) {
            const dim_t base = o * L * inner + in;
            S mx = pa[base];
            for (dim_t l = 1; l < L; ++l) mx = std::max(mx, pa[base + l * inner]);
            S z = S(0);
            for (dim_t l = 0; l < L; ++l) {
                const S e = std::exp(pa[base + l * inner] - mx);
                py[base + l * inner] = e;
                z += e;
            }
            const S invz = S(1) / z;
            for (dim_t l = 0; l < L; ++l) py[base + l * inner] *= invz;
        }
    }
    detail::check_finite(y, "softmax");
    if (y.requires_grad()) {
        g.record("softmax", y, {a}, [a, y, outer, inner, L]() {
            const S* gy = y.grad();
            const S* q = y.data();
            S* ga = a.grad();
            for (dim_t o = 0; o < outer; ++o) {
                for (dim_t in = 0; in < inner; ++in) {
                    const dim_t base = o * L * inner + in;
                    S dot = S(0);
                    for (dim_t l = 0; l < L; ++l)
                        dot += q[base + l * inner] * gy[base + l * inner];
                    for (dim_t l = 0; l < L; ++l) {
                        const dim_t k = base + l * inner;
                        ga[k] += q[k] * (gy[k] - dot);
                    }
                }
            }
        });
    }
    return y;
}

template <typename S>
Tensor<S> concat(Graph<S>& g, const std::vector<Tensor<S>>& xs, int axis) {
    if (xs.empty()) throw ContractError("concat of empty list");
    const int r = xs[0].shape().rank();
    if (axis < 0 || axis >= r)
        throw ContractError("concat axis " + std::to_string(axis) + " invalid");
    dim_t axis_total = 0;
    bool any_grad = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].shape().rank() != r)
            throw ShapeError("concat rank mismatch at input " + std::to_string(i));
        for (int d = 0; d < r; ++d) {
            if (d == axis) continue;
            if (xs[i].shape()[d] != xs[0].shape()[d])
                throw ShapeError("concat extent mismatch at input " + std::to_string(i) + ": " +
                                 format_two_shapes("", xs[i].shape(), xs[0].shape()));
        }
        axis_total += xs[i].shape()[axis];
        any_grad = any_grad || xs[i].requires_grad();
    }
    std::vector<dim_t> dims = xs[0].shape().dims();
    dims[static_cast<std::size_t>(axis)] = axis_total;
    const Shape out_shape(dims);

    dim_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];

    Tensor<S> y = detail::op_output(g, out_shape, any_grad);
    S* py = y.data();
    dim_t off = 0;
    for (const auto& x : xs) {
        const dim_t lx = x.shape()[axis];
        const S* px = x.data();
        for (dim_t o = 0; o < outer; ++o)
            std::memcpy(py + (o * axis_total + off) * inner, px + o * lx * inner,
                        static_cast<std::size_t>(lx * inner) * sizeof(S));
        off += lx;
    }
    if (y.requires_grad()) {
        g.record("concat", y, xs, [xs, y, outer, inner, axis_total, axis]() {
            const S* gy = y.grad();
            dim_t off2 = 0;
            for (auto& x : xs) {
                const dim_t lx = x.shape()[axis];
                if (x.requires_grad()) {
                    S* gx = x.grad();
                    for (dim_t o = 0; o < outer; ++o) {
                        const S* src = gy + (o * axis_total + off2) * inner;
                        S* dst = gx + o * lx * inner;
                        for (dim_t i = 0; i < lx * inner; ++i) dst[i] += src[i];
                    }
                }
                off2 += lx;
            }
        });
    }
    return y;
}

/// x[..., idx, ...] along `axis`; output drops that axis.
template <typename S>
Tensor<S> select(Graph<S>& g, const Tensor<S>& a, int axis, dim_t idx) {
    const int r = a.shape().rank();
    if (axis < 0 || axis >= r) throw ContractError("select axis invalid");
    if (idx < 0 || idx >= a.shape()[axis])
        throw ContractError("select index " + std::to_string(idx) + " out of range for " +
                            a.shape().str());
    dim_t outer = 1, inner = 1;
    const dim_t L = a.shape()[axis];
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int i = axis + 1; i < r; ++i) inner *= a.shape()[i];
    std::vector<dim_t> dims;
    for (int i = 0; i < r; ++i)
        if (i != axis) dims.push_back(a.shape()[i]);
    const Shape out_shape(dims);

    Tensor<S> y = detail::op_output(g, out_shape, a.requires_grad());
    const S* pa = a.data();
    S* py = y.data();
    for (dim_t o = 0; o < outer; ++o)
        std::memcpy(py + o * inner, pa + (o * L + idx) * inner,
                    static_cast<std::size_t>(inner) * sizeof(S));
    if (y.requires_grad()) {
        g.record("select", y, {a}, [a, y, outer, inner, L, idx]() {
            const S* gy = y.grad();
            S* ga = a.grad();
            for (dim_t o = 0; o < outer; ++o) {
                const S* src = gy + o * inner;
                S* dst = ga + (o * L + idx) * inner;
                for (dim_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        });
    }
    return y;
}

/// Mean over axis 0.
template <typename S> Tensor<S> batch_mean(Graph<S>& g, const Tensor<S>& a) {
    const int r = a.shape().rank();
    if (r < 2) throw ContractError("batch_mean needs rank >= 2, got " + a.shape().str());
    const dim_t N = a.shape()[0];
    const dim_t inner = a.numel() / N;
    std::vector<dim_t> dims;
    for (int i = 1; i < r; ++i) dims.push_back(a.shape()[i]);
    Tensor<S> y = detail::op_output(g, Shape(dims), a.requires_grad());
    const S* pa = a.data();
    S* py = y.data();
    const S invn = S(1) / static_cast<S>(N);
    for (dim_t n = 0; n < N; ++n)
        for (dim_t i = 0; i < inner; ++i) py[i] += pa[n * inner + i];
    for (dim_t i = 0; i < inner; ++i) py[i] *= invn;
    detail::check_finite(y, "batch_mean");
    if (y.requires_grad()) {
        g.record("batch_mean", y, {a}, [a, y, N, inner, invn]() {
            const S* gy = y.grad();
            S* ga = a.grad();
            for (dim_t n = 0; n < N; ++n)
                for (dim_t i = 0; i < inner; ++i) ga[n * inner + i] += gy[i] * invn;
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> conv2d(Graph<S>& g, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 int stride = 1, int pad = 0) {
    if (x.shape().rank() != 4 || w.shape().rank() != 4)
        throw ShapeError(format_two_shapes("conv2d expects rank-4 input/kernel", x.shape(),
                                           w.shape()));
    const dim_t N = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const dim_t Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != Cin)
        throw ShapeError(format_two_shapes("conv2d channel mismatch", x.shape(), w.shape()));
    if (b.shape().rank() != 1 || b.shape()[0] != Cout)
        throw ShapeError(format_two_shapes("conv2d bias mismatch", b.shape(), w.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw ContractError("conv2d kernel extents must be odd");
    if (stride < 1) throw ContractError("conv2d stride must be >= 1");
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw ShapeError(format_two_shapes("conv2d kernel larger than padded input", x.shape(),
                                           w.shape()));
    const dim_t Ho = (H + 2 * pad - kh) / stride + 1;
    const dim_t Wo = (W + 2 * pad - kw) / stride + 1;
    const dim_t K = Cin * kh * kw;
    const dim_t P = Ho * Wo;

    Tensor<S> y = detail::op_output(g, Shape{N, Cout, Ho, Wo},
                                    x.requires_grad() || w.requires_grad() || b.requires_grad());
    parallel_for(N, 1, [&](dim_t nb, dim_t ne) {
        auto& col = detail::conv_scratch<S>();
        col.resize(static_cast<std::size_t>(K * P));
        for (dim_t n = nb; n < ne; ++n) {
            detail::im2col(x.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                           col.data());
            S* yn = y.data() + n * Cout * P;
            detail::gemm(Cout, K, P, w.data(), col.data(), yn, false);
            for (dim_t c = 0; c < Cout; ++c) {
                const S bc = b.data()[c];
                S* yc = yn + c * P;
                for (dim_t j = 0; j < P; ++j) yc[j] += bc;
            }
        }
    });
    detail::check_finite(y, "conv2d");

    if (y.requires_grad()) {
        g.record("conv2d", y, {x, w, b},
                 [x, w, b, y, N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, P]() {
                     const S* gy = y.grad();
                     if (b.requires_grad()) {
                         S* gb = b.grad();
                         for (dim_t n = 0; n < N; ++n)
                             for (dim_t c = 0; c < Cout; ++c) {
                                 const S* gyc = gy + (n * Cout + c) * P;
                                 S acc = S(0);
                                 for (dim_t j = 0; j < P; ++j) acc += gyc[j];
                                 gb[c] += acc;
                             }
                     }
                     if (w.requires_grad()) {
                         auto& col = detail::conv_scratch<S>();
                         col.resize(static_cast<std::size_t>(K * P));
                         for (dim_t n = 0; n < N; ++n) {
                             detail::im2col(x.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride,
                                            pad, Ho, Wo, col.data());
                             detail::gemm_abt_acc(Cout, K, P, gy + n * Cout * P, col.data(),
                                                  w.grad());
                         }
                     }
                     if (x.requires_grad()) {
                         // wt: (K x Cout)
                         std::vector<S> wt(static_cast<std::size_t>(K * Cout));
                         for (dim_t c = 0; c < Cout; ++c)
                             for (dim_t k = 0; k < K; ++k)
                                 wt[static_cast<std::size_t>(k * Cout + c)] = w.data()[c * K + k];
                         parallel_for(N, 1, [&](dim_t nb, dim_t ne) {
                             std::vector<S> dcol(static_cast<std::size_t>(K * P));
                             for (dim_t n = nb; n < ne; ++n) {
                                 detail::gemm(K, Cout, P, wt.data(), gy + n * Cout * P,
                                              dcol.data(), false);
                                 detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, pad,
                                                    Ho, Wo, x.grad() + n * Cin * H * W);
                             }
                         });
                     }
                 });
    }
    return y;
}

// ---------------------------------------------------------------------------
// pool2d / upsample / global_avg_pool
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> pool2d(Graph<S>& g, const Tensor<S>& x, PoolMode mode, int k, int stride) {
    if (x.shape().rank() != 4) throw ShapeError("pool2d expects rank-4 input " + x.shape().str());
    if (k < 1) throw ContractError("pool2d window must be >= 1");
    if (stride < 1) throw ContractError("pool2d stride must be >= 1");
    const dim_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (k > H || k > W)
        throw ShapeError("pool2d window " + std::to_string(k) + " exceeds input " +
                         x.shape().str());
    const dim_t Ho = (H - k) / stride + 1;
    const dim_t Wo = (W - k) / stride + 1;

    Tensor<S> y = detail::op_output(g, Shape{N, C, Ho, Wo}, x.requires_grad());
    const S* px = x.data();
    S* py = y.data();
    // max mode records the argmax (first hit in row-major window scan).
    std::shared_ptr<std::vector<dim_t>> argmax;
    if (mode == PoolMode::kMax && y.requires_grad())
        argmax = std::make_shared<std::vector<dim_t>>(static_cast<std::size_t>(y.numel()));

    const S inv_kk = S(1) / static_cast<S>(k * k);
    for (dim_t nc = 0; nc < N * C; ++nc) {
        const S* xc = px + nc * H * W;
        S* yc = py + nc * Ho * Wo;
        for (dim_t oy = 0; oy < Ho; ++oy) {
            for (dim_t ox = 0; ox < Wo; ++ox) {
                const dim_t iy0 = oy * stride, ix0 = ox * stride;
                if (mode == PoolMode::kMax) {
                    S best = xc[iy0 * W + ix0];
                    dim_t best_at = iy0 * W + ix0;
                    for (dim_t dy = 0; dy < k; ++dy)
                        for (dim_t dx = 0; dx < k; ++dx) {
                            const dim_t at = (iy0 + dy) * W + (ix0 + dx);
                            if (xc[at] > best) {
                                best = xc[at];
                                best_at = at;
                            }
                        }
                    yc[oy * Wo + ox] = best;
                    if (argmax)
                        (*argmax)[static_cast<std::size_t>(nc * Ho * Wo + oy * Wo + ox)] =
                            nc * H * W + best_at;
                } else {
                    S acc = S(0);
                    for (dim_t dy = 0; dy < k; ++dy)
                        for (dim_t dx = 0; dx < k; ++dx) acc += xc[(iy0 + dy) * W + (ix0 + dx)];
                    yc[oy * Wo + ox] = acc * inv_kk;
                }
            }
        }
    }
    detail::check_finite(y, "pool2d");

    if (y.requires_grad()) {
        if (mode == PoolMode::kMax) {
            g.record("max_pool2d", y, {x}, [x, y, argmax]() {
                const S* gy = y.grad();
                S* gx = x.grad();
                const dim_t m = y.numel();
                for (dim_t i = 0; i < m; ++i)
                    gx[(*argmax)[static_cast<std::size_t>(i)]] += gy[i];
            });
        } else {
            const dim_t kk = k, st = stride;
            g.record("avg_pool2d", y, {x},
                     [x, y, kk, st, N, C, H, W, Ho, Wo, inv_kk]() {
                         const S* gy = y.grad();
                         S* gx = x.grad();
                         for (dim_t nc = 0; nc < N * C; ++nc) {
                             const S* gyc = gy + nc * Ho * Wo;
                             S* gxc = gx + nc * H * W;
                             for (dim_t oy = 0; oy < Ho; ++oy)
                                 for (dim_t ox = 0; ox < Wo; ++ox) {
                                     const S v = gyc[oy * Wo + ox] * inv_kk;
                                     for (dim_t dy = 0; dy < kk; ++dy)
                                         for (dim_t dx = 0; dx < kk; ++dx)
                                             gxc[(oy * st + dy) * W + (ox * st + dx)] += v;
                                 }
                         }
                     });
        }
    }
    return y;
}

template <typename S>
Tensor<S> upsample_nearest(Graph<S>& g, const Tensor<S>& x, int factor) {
    if (factor < 1) throw ConfigError("upsample factor must be >= 1, got " + std::to_string(factor));
    if (x.shape().rank() != 4)
        throw ShapeError("upsample expects rank-4 input " + x.shape().str());
    const dim_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const dim_t f = factor;
    Tensor<S> y = detail::op_output(g, Shape{N, C, H * f, W * f}, x.requires_grad());
    const S* px = x.data();
    S* py = y.data();
    for (dim_t nc = 0; nc < N * C; ++nc) {
        const S* xc = px + nc * H * W;
        S* yc = py + nc * H * f * W * f;
        for (dim_t iy = 0; iy < H; ++iy)
            for (dim_t dy = 0; dy < f; ++dy) {
                S* row = yc + (iy * f + dy) * W * f;
                const S* src = xc + iy * W;
                for (dim_t ix = 0; ix < W; ++ix)
                    for (dim_t dx = 0; dx < f; ++dx) row[ix * f + dx] = src[ix];
            }
    }
    if (y.requires_grad()) {
        g.record("upsample_nearest", y, {x}, [x, y, N, C, H, W, f]() {
            const S* gy = y.grad();
            S* gx = x.grad();
            for (dim_t nc = 0; nc < N * C; ++nc) {
                const S* gyc = gy + nc * H * f * W * f;
                S* gxc = gx + nc * H * W;
                for (dim_t iy = 0; iy < H; ++iy)
                    for (dim_t dy = 0; dy < f; ++dy) {
                        const S* row = gyc + (iy * f + dy) * W * f;
                        for (dim_t ix = 0; ix < W; ++ix) {
                            S acc = S(0);
                            for (dim_t dx = 0; dx < f; ++dx) acc += row[ix * f + dx];
                            gxc[iy * W + ix] += acc;
                        }
                    }
            }
        });
    }
    return y;
}

template <typename S> Tensor<S> global_avg_pool(Graph<S>& g, const Tensor<S>& x) {
    if (x.shape().rank() != 4)
        throw ShapeError("global_avg_pool expects rank-4 input " + x.shape().str());
    const dim_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    Tensor<S> y = detail::op_output(g, Shape{N, C}, x.requires_grad());
    const S* px = x.data();
    S* py = y.data();
    const S inv = S(1) / static_cast<S>(HW);
    for (dim_t nc = 0; nc < N * C; ++nc) {
        const S* xc = px + nc * HW;
        S acc = S(0);
        for (dim_t i = 0; i < HW; ++i) acc += xc[i];
        py[nc] = acc * inv;
    }
    detail::check_finite(y, "global_avg_pool");
    if (y.requires_grad()) {
        g.record("global_avg_pool", y, {x}, [x, y, N, C, HW, inv]() {
            const S* gy = y.grad();
            S* gx = x.grad();
            for (dim_t nc = 0; nc < N * C; ++nc) {
                const S v = gy[nc] * inv;
                S* gxc = gx + nc * HW;
                for (dim_t i = 0; i < HW; ++i) gxc[i] += v;
            }
        });
    }
    return y;
}

/// Per-channel rescale: a has shape (C) or (N,C).
template <typename S>
Tensor<S> channel_scale(Graph<S>& g, const Tensor<S>& m, const Tensor<S>& a) {
    if (m.shape().rank() != 4)
        throw ShapeError("channel_scale expects rank-4 heatmaps " + m.shape().str());
    const dim_t N = m.shape()[0], C = m.shape()[1], HW = m.shape()[2] * m.shape()[3];
    const bool per_sample = a.shape().rank() == 2;
    if (per_sample) {
        if (a.shape()[0] != N || a.shape()[1] != C)
            throw ShapeError(format_two_shapes("channel_scale weight mismatch", m.shape(),
                                               a.shape()));
    } else if (a.shape().rank() != 1 || a.shape()[0] != C) {
        throw ShapeError(format_two_shapes("channel_scale weight mismatch", m.shape(), a.shape()));
    }

    Tensor<S> y = detail::op_output(g, m.shape(), m.requires_grad() || a.requires_grad());
    const S* pm = m.data();
    const S* pa = a.data();
    S* py = y.data();
    for (dim_t n = 0; n < N; ++n)
        for (dim_t c = 0; c < C; ++c) {
            const S s = per_sample ? pa[n * C + c] : pa[c];
            const S* mc = pm + (n * C + c) * HW;
            S* yc = py + (n * C + c) * HW;
            for (dim_t i = 0; i < HW; ++i) yc[i] = mc[i] * s;
        }
    detail::check_finite(y, "channel_scale");
    if (y.requires_grad()) {
        g.record("channel_scale", y, {m, a}, [m, a, y, N, C, HW, per_sample]() {
            const S* gy = y.grad();
            const S* pm2 = m.data();
            const S* pa2 = a.data();
            for (dim_t n = 0; n < N; ++n)
                for (dim_t c = 0; c < C; ++c) {
                    const dim_t base = (n * C + c) * HW;
                    const S s = per_sample ? pa2[n * C + c] : pa2[c];
                    if (m.requires_grad()) {
                        S* gm = m.grad();
                        for (dim_t i = 0; i < HW; ++i) gm[base + i] += gy[base + i] * s;
                    }
                    if (a.requires_grad()) {
                        S acc = S(0);
                        for (dim_t i = 0; i < HW; ++i) acc += gy[base + i] * pm2[base + i];
                        a.grad()[per_sample ? n * C + c : c] += acc;
                    }
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> linear(Graph<S>& g, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x.shape().rank() != 2 || w.shape().rank() != 2)
        throw ShapeError(format_two_shapes("linear expects rank-2 input/weight", x.shape(),
                                           w.shape()));
    const dim_t N = x.shape()[0], Din = x.shape()[1], Dout = w.shape()[0];
    if (w.shape()[1] != Din)
        throw ShapeError(format_two_shapes("linear dimension mismatch", x.shape(), w.shape()));
    if (b.shape().rank() != 1 || b.shape()[0] != Dout)
        throw ShapeError(format_two_shapes("linear bias mismatch", b.shape(), w.shape()));

    Tensor<S> y = detail::op_output(g, Shape{N, Dout},
                                    x.requires_grad() || w.requires_grad() || b.requires_grad());
    const S* px = x.data();
    const S* pw = w.data();
    const S* pb = b.data();
    S* py = y.data();
    for (dim_t n = 0; n < N; ++n)
        for (dim_t o = 0; o < Dout; ++o) {
            const S* xr = px + n * Din;
            const S* wr = pw + o * Din;
            S acc = pb[o];
            for (dim_t d = 0; d < Din; ++d) acc += xr[d] * wr[d];
            py[n * Dout + o] = acc;
        }
    detail::check_finite(y, "linear");
    if (y.requires_grad()) {
        g.record("linear", y, {x, w, b}, [x, w, b, y, N, Din, Dout]() {
            const S* gy = y.grad();
            const S* px2 = x.data();
            const S* pw2 = w.data();
            if (x.requires_grad()) {
                S* gx = x.grad();
                for (dim_t n = 0; n < N; ++n)
                    for (dim_t o = 0; o < Dout; ++o) {
                        const S v = gy[n * Dout + o];
                        const S* wr = pw2 + o * Din;
                        S* gxr = gx + n * Din;
                        for (dim_t d = 0; d < Din; ++d) gxr[d] += v * wr[d];
                    }
            }
            if (w.requires_grad()) {
                S* gw = w.grad();
                for (dim_t n = 0; n < N; ++n)
                    for (dim_t o = 0; o < Dout; ++o) {
                        const S v = gy[n * Dout + o];
                        const S* xr = px2 + n * Din;
                        S* gwr = gw + o * Din;
                        for (dim_t d = 0; d < Din; ++d) gwr[d] += v * xr[d];
                    }
            }
            if (b.requires_grad()) {
                S* gb = b.grad();
                for (dim_t n = 0; n < N; ++n)
                    for (dim_t o = 0; o < Dout; ++o) gb[o] += gy[n * Dout + o];
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

template <typename S> struct BnStats {
    Tensor<S> running_mean;
    Tensor<S> running_var;
};

template <typename S>
Tensor<S> batchnorm2d(Graph<S>& g, const Tensor<S>& x, const Tensor<S>& gamma,
                      const Tensor<S>& beta, BnStats<S>& stats, Phase phase,
                      S momentum = S(0.1), S eps = S(1e-5)) {
    if (x.shape().rank() != 4)
        throw ShapeError("batchnorm2d expects rank-4 input " + x.shape().str());
    const dim_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    if (gamma.shape().rank() != 1 || gamma.shape()[0] != C || beta.shape()[0] != C)
        throw ShapeError(format_two_shapes("batchnorm2d channel mismatch", x.shape(),
                                           gamma.shape()));
    const dim_t n_per_c = N * HW;
    if (phase == Phase::kTrain && n_per_c <= 1)
        throw ContractError("batchnorm2d train mode requires batch*H*W > 1");

    Tensor<S> y = detail::op_output(
        g, x.shape(),
        x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    const S* px = x.data();
    S* py = y.data();

    auto mean = std::make_shared<std::vector<S>>(static_cast<std::size_t>(C));
    auto invstd = std::make_shared<std::vector<S>>(static_cast<std::size_t>(C));

    for (dim_t c = 0; c < C; ++c) {
        S mu, var;
        if (phase == Phase::kTrain) {
            S acc = S(0);
            for (dim_t n = 0; n < N; ++n) {
                const S* xc = px + (n * C + c) * HW;
                for (dim_t i = 0; i < HW; ++i) acc += xc[i];
            }
            mu = acc / static_cast<S>(n_per_c);
            S vacc = S(0);
            for (dim_t n = 0; n < N; ++n) {
                const S* xc = px + (n * C + c) * HW;
                for (dim_t i = 0; i < HW; ++i) {
                    const S d = xc[i] - mu;
                    vacc += d * d;
                }
            }
            var = vacc / static_cast<S>(n_per_c);
            // running stats track the unbiased variance
            const S var_unbiased = vacc / static_cast<S>(n_per_c - 1);
            stats.running_mean.data()[c] =
                (S(1) - momentum) * stats.running_mean.data()[c] + momentum * mu;
            stats.running_var.data()[c] =
                (S(1) - momentum) * stats.running_var.data()[c] + momentum * var_unbiased;
        } else {
            mu = stats.running_mean.data()[c];
            var = stats.running_var.data()[c];
        }
        const S is = S(1) / std::sqrt(var + eps);
        (*mean)[static_cast<std::size_t>(c)] = mu;
        (*invstd)[static_cast<std::size_t>(c)] = is;
        const S gc = gamma.data()[c], bc = beta.data()[c];
        for (dim_t n = 0; n < N; ++n) {
            const S* xc = px + (n * C + c) * HW;
            S* yc = py + (n * C + c) * HW;
            for (dim_t i = 0; i < HW; ++i) yc[i] = gc * (xc[i] - mu) * is + bc;
        }
    }
    detail::check_finite(y, "batchnorm2d");

    if (y.requires_grad()) {
        const bool train = phase == Phase::kTrain;
        g.record("batchnorm2d", y, {x, gamma, beta},
                 [x, gamma, beta, y, mean, invstd, N, C, HW, n_per_c, train]() {
                     const S* gy = y.grad();
                     const S* px2 = x.data();
                     for (dim_t c = 0; c < C; ++c) {
                         const S mu = (*mean)[static_cast<std::size_t>(c)];
                         const S is = (*invstd)[static_cast<std::size_t>(c)];
                         const S gc = gamma.data()[c];
                         // per-channel reductions
                         S sum_gy = S(0), sum_gy_xhat = S(0);
                         for (dim_t n = 0; n < N; ++n) {
                             const S* xc = px2 + (n * C + c) * HW;
                             const S* gyc = gy + (n * C + c) * HW;
                             for (dim_t i = 0; i < HW; ++i) {
                                 sum_gy += gyc[i];
                                 sum_gy_xhat += gyc[i] * (xc[i] - mu) * is;
                             }
                         }
                         if (gamma.requires_grad()) gamma.grad()[c] += sum_gy_xhat;
                         if (beta.requires_grad()) beta.grad()[c] += sum_gy;
                         if (x.requires_grad()) {
                             S* gx = x.grad();
                             const S inv_n = S(1) / static_cast<S>(n_per_c);
                             for (dim_t n = 0; n < N; ++n) {
                                 const S* xc = px2 + (n * C + c) * HW;
                                 const S* gyc = gy + (n * C + c) * HW;
                                 S* gxc = gx + (n * C + c) * HW;
                                 if (train) {
                                     for (dim_t i = 0; i < HW; ++i) {
                                         const S xhat = (xc[i] - mu) * is;
                                         gxc[i] += gc * is *
                                                   (gyc[i] - inv_n * sum_gy -
                                                    inv_n * xhat * sum_gy_xhat);
                                     }
                                 } else {
                                     for (dim_t i = 0; i < HW; ++i) gxc[i] += gc * is * gyc[i];
                                 }
                             }
                         }
                     }
                 });
    }
    return y;
}

// ---------------------------------------------------------------------------
// finite-difference gradient check
// ---------------------------------------------------------------------------

/// Central-difference check of d(f)/dx against the tape gradient.
/// f: (Graph<double>&, const Tensor<double>&) -> scalar Tensor<double>.
/// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
template <typename F>
double finite_diff_check(F&& f, const Tensor<double>& x_in, double eps = 1e-5) {
    if (eps < 1e-7 || eps > 1e-3) throw ContractError("finite_diff_check eps out of range");
    Tensor<double> x = x_in.clone(true);
    Graph<double> g;
    Tensor<double> loss = f(g, x);
    g.backward(loss);
    const dim_t n = x.numel();
    std::vector<double> analytic(x.grad(), x.grad() + n);

    auto eval = [&]() {
        Graph<double> ng(false);
        Tensor<double> xe = x.clone(false);
        return f(ng, xe).value();
    };

    double max_err = 0.0;
    for (dim_t i = 0; i < n; ++i) {
        const double keep = x.data()[i];
        x.data()[i] = keep + eps;
        const double lp = eval();
        x.data()[i] = keep - eps;
        const double lm = eval();
        x.data()[i] = keep;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double err = std::abs(analytic[static_cast<std::size_t>(i)] - numeric) /
                           std::max(1.0, std::abs(numeric));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace okdhp
