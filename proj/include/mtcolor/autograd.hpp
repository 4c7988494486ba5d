#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. A graph is built implicitly by the op functions below; calling
// backward() on a result walks it in reverse topological order.
//
// Tensors are small and per-sample (no batch axis): images are [C,H,W],
// token sequences are [L,D]. GEMMs go through Eigen.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mtcolor/error.hpp"

namespace mtcolor {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace ag {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> storage;
    const T* data = nullptr; // points into storage, or into external memory for bound parameters
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t numel() const { return shape_numel(shape); }
    std::span<const T> value() const { return {data, numel()}; }

    T* grad_buffer() {
        if (grad.empty()) grad.assign(numel(), T(0));
        return grad.data();
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Shape shape, std::vector<T> values) {
        return make(std::move(shape), std::move(values), false);
    }
    static Var leaf(Shape shape, std::vector<T> values, bool requires_grad = true) {
        return make(std::move(shape), std::move(values), requires_grad);
    }
    static Var zeros(Shape shape) {
        std::vector<T> v(shape_numel(shape), T(0));
        return constant(std::move(shape), std::move(v));
    }
    // Wraps memory owned elsewhere; the caller keeps it alive and unchanged
    // for the lifetime of the graph.
    static Var borrowed(Shape shape, const T* data, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->data = data;
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->numel(); }
    std::span<const T> value() const { return node_->value(); }
    const T* data() const { return node_->data; }
    std::vector<T> to_vector() const { return {node_->data, node_->data + numel()}; }
    bool requires_grad() const { return node_->requires_grad; }
    std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
    void zero_grad() { node_->grad.clear(); }
    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const { return node_; }

    T item() const {
        if (numel() != 1) throw DimensionMismatch("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

private:
    static Var make(Shape shape, std::vector<T> values, bool requires_grad) {
        if (values.size() != shape_numel(shape))
            throw DimensionMismatch("value count does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->storage = std::move(values);
        n->data = n->storage.data();
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    std::shared_ptr<Node<T>> node_;
};

// Creates an op result. When no parent needs gradients the parents and the
// backward closure are dropped so inference graphs do not retain memory.
template <typename T>
Var<T> make_result(Shape shape, std::vector<T> values, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->storage = std::move(values);
    n->data = n->storage.data();
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
        n->requires_grad = true;
        for (auto& p : parents) n->parents.push_back(p.ptr());
        n->backward_fn = std::move(backward_fn);
    }
    return Var<T>(std::move(n));
}

template <typename T>
void backward(const Var<T>& root, std::span<const T> seed) {
    if (!root.requires_grad()) return;
    if (seed.size() != root.numel())
        throw DimensionMismatch("backward seed size does not match output " + shape_str(root.shape()));
    // Iterative DFS post-order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    T* g = root.node()->grad_buffer();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

template <typename T>
void backward(const Var<T>& root) {
    std::vector<T> seed(root.numel(), T(1));
    backward(root, std::span<const T>(seed));
}

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

template <typename T>
void accumulate(Node<T>* p, const T* g, std::size_t n) {
    if (!p->requires_grad) return;
    T* dst = p->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

// Row-major operand with leading dimension ld, optionally used transposed.
template <typename T>
struct Operand {
    const T* data;
    int rows, cols;
    std::ptrdiff_t ld;
    bool transposed = false;
    int out_rows() const { return transposed ? cols : rows; }
    int out_cols() const { return transposed ? rows : cols; }
};

template <typename T>
using AlignedBuffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
const T* pack(const Operand<T>& op, AlignedBuffer<T>& buf) {
    buf.resize(static_cast<std::size_t>(op.rows) * op.cols);
    for (int r = 0; r < op.rows; ++r)
        std::copy_n(op.data + r * op.ld, op.cols, buf.data() + static_cast<std::size_t>(r) * op.cols);
    return buf.data();
}

// c (= or +=) alpha * op(a) * op(b). Eigen splits loops into vector and
// scalar parts based on operand addresses, so the rounding of a product
// depends on where buffers happen to live. Copying operands into aligned
// scratch makes every product bit-reproducible across runs and threads.
template <typename T>
void product(T* c, std::ptrdiff_t ldc, bool accumulate, const Operand<T>& a, const Operand<T>& b, T alpha = T(1)) {
    const int m = a.out_rows(), k = a.out_cols(), n = b.out_cols();
    if (b.out_rows() != k) throw DimensionMismatch("product inner dimensions differ");
    if (m == 0 || n == 0) return;
    thread_local AlignedBuffer<T> ba, bb, br;
    br.assign(static_cast<std::size_t>(m) * n, T(0));
    if (k > 0) {
        using CM = Eigen::Map<const RowMat<T>, Eigen::AlignedMax>;
        CM am(pack(a, ba), a.rows, a.cols), bm(pack(b, bb), b.rows, b.cols);
        Eigen::Map<RowMat<T>, Eigen::AlignedMax> r(br.data(), m, n);
        if (!a.transposed && !b.transposed) r.noalias() = am * bm;
        else if (!a.transposed) r.noalias() = am * bm.transpose();
        else if (!b.transposed) r.noalias() = am.transpose() * bm;
        else r.noalias() = am.transpose() * bm.transpose();
    }
    for (int i = 0; i < m; ++i) {
        T* row = c + i * ldc;
        const T* src = br.data() + static_cast<std::size_t>(i) * n;
        if (accumulate)
            for (int j = 0; j < n; ++j) row[j] += alpha * src[j];
        else
            for (int j = 0; j < n; ++j) row[j] = alpha * src[j];
    }
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    auto av = a.value();
    auto bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        detail::accumulate(self.parents[0].get(), self.grad.data(), self.grad.size());
        detail::accumulate(self.parents[1].get(), self.grad.data(), self.grad.size());
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    auto av = a.value();
    auto bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        detail::accumulate(self.parents[0].get(), self.grad.data(), self.grad.size());
        Node<T>* p = self.parents[1].get();
        if (p->requires_grad) {
            T* dst = p->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    auto av = a.value();
    auto bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>* pa = self.parents[0].get();
        Node<T>* pb = self.parents[1].get();
        auto av = pa->value();
        auto bv = pb->value();
        if (pa->requires_grad) {
            T* d = pa->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bv[i];
        }
        if (pb->requires_grad) {
            T* d = pb->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    std::vector<T> out(a.numel());
    auto av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        T* d = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * s;
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    std::vector<T> out(a.numel());
    auto av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T s = T(1) / (T(1) + std::exp(-av[i]));
        out[i] = av[i] * s;
    }
    return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        auto x = p->value();
        T* d = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            T s = T(1) / (T(1) + std::exp(-x[i]));
            d[i] += self.grad[i] * (s * (T(1) + x[i] * (T(1) - s)));
        }
    });
}

// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
    std::vector<T> out(a.numel());
    auto av = a.value();
    const T inv_sqrt2 = T(0.70710678118654752440);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
    return make_result<T>(a.shape(), std::move(out), {a}, [inv_sqrt2](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        auto x = p->value();
        T* d = p->grad_buffer();
        const T inv_sqrt2pi = T(0.39894228040143267794);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
            d[i] += self.grad[i] * (cdf + x[i] * pdf);
        }
    });
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionMismatch("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto av = a.value();
    return make_result<T>(std::move(shape), std::vector<T>(av.begin(), av.end()), {a}, [](Node<T>& self) {
        detail::accumulate(self.parents[0].get(), self.grad.data(), self.grad.size());
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    if (a.shape().size() != 2) throw DimensionMismatch("transpose expects a matrix");
    const int r = a.dim(0), c = a.dim(1);
    std::vector<T> out(a.numel());
    MatMap<T>(out.data(), c, r) = CMatMap<T>(a.data(), r, c).transpose();
    return make_result<T>({c, r}, std::move(out), {a}, [r, c](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        MatMap<T>(p->grad_buffer(), r, c) += CMatMap<T>(self.grad.data(), c, r).transpose();
    });
}

// Concatenation along the leading axis; trailing dims must agree.
template <typename T>
Var<T> concat0(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
        throw DimensionMismatch("concat0 " + shape_str(sa) + " with " + shape_str(sb));
    Shape so = sa;
    so[0] = sa[0] + sb[0];
    std::vector<T> out;
    out.reserve(a.numel() + b.numel());
    auto av = a.value();
    auto bv = b.value();
    out.insert(out.end(), av.begin(), av.end());
    out.insert(out.end(), bv.begin(), bv.end());
    const std::size_t na = a.numel();
    return make_result<T>(std::move(so), std::move(out), {a, b}, [na](Node<T>& self) {
        detail::accumulate(self.parents[0].get(), self.grad.data(), na);
        detail::accumulate(self.parents[1].get(), self.grad.data() + na, self.grad.size() - na);
    });
}

// [m,p] | [m,q] -> [m,p+q]
template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(0) != b.dim(0))
        throw DimensionMismatch("concat_cols " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
    const int m = a.dim(0), pa = a.dim(1), pb = b.dim(1), pc = pa + pb;
    std::vector<T> out(static_cast<std::size_t>(m) * pc);
    auto av = a.value();
    auto bv = b.value();
    for (int i = 0; i < m; ++i) {
        std::copy_n(av.begin() + static_cast<std::size_t>(i) * pa, pa, out.begin() + static_cast<std::size_t>(i) * pc);
        std::copy_n(bv.begin() + static_cast<std::size_t>(i) * pb, pb, out.begin() + static_cast<std::size_t>(i) * pc + pa);
    }
    return make_result<T>({m, pc}, std::move(out), {a, b}, [m, pa, pb, pc](Node<T>& self) {
        Node<T>* na = self.parents[0].get();
        Node<T>* nb = self.parents[1].get();
        for (int i = 0; i < m; ++i) {
            const T* g = self.grad.data() + static_cast<std::size_t>(i) * pc;
            if (na->requires_grad) {
                T* d = na->grad_buffer() + static_cast<std::size_t>(i) * pa;
                for (int j = 0; j < pa; ++j) d[j] += g[j];
            }
            if (nb->requires_grad) {
                T* d = nb->grad_buffer() + static_cast<std::size_t>(i) * pb;
                for (int j = 0; j < pb; ++j) d[j] += g[pa + j];
            }
        }
    });
}

// Rows [begin, end) of the leading axis.
template <typename T>
Var<T> slice0(const Var<T>& a, int begin, int end) {
    const Shape& sa = a.shape();
    if (begin < 0 || end > sa[0] || begin > end) throw DimensionMismatch("slice0 out of range");
    const std::size_t inner = a.numel() / static_cast<std::size_t>(sa[0]);
    Shape so = sa;
    so[0] = end - begin;
    auto av = a.value();
    std::vector<T> out(av.begin() + begin * inner, av.begin() + end * inner);
    const std::size_t off = begin * inner;
    return make_result<T>(std::move(so), std::move(out), {a}, [off](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        T* d = p->grad_buffer() + off;
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw DimensionMismatch("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(m) * n);
    if (k > 0) {
        detail::product<T>(out.data(), n, false, {a.data(), m, k, k}, {b.data(), k, n, n});
    }
    return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        Node<T>* pa = self.parents[0].get();
        Node<T>* pb = self.parents[1].get();
        const detail::Operand<T> g{self.grad.data(), m, n, n};
        if (pa->requires_grad && k > 0)
            detail::product<T>(pa->grad_buffer(), k, true, g, {pb->data, k, n, n, true});
        if (pb->requires_grad && k > 0)
            detail::product<T>(pb->grad_buffer(), n, true, {pa->data, m, k, k, true}, g);
    });
}

// a[m,n] + bias[n] broadcast over rows.
template <typename T>
Var<T> add_row_bias(const Var<T>& a, const Var<T>& bias) {
    if (a.shape().size() != 2 || bias.numel() != static_cast<std::size_t>(a.dim(1)))
        throw DimensionMismatch("add_row_bias " + shape_str(a.shape()) + " + " + shape_str(bias.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<T> out(a.numel());
    auto av = a.value();
    auto bv = bias.value();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
    return make_result<T>(a.shape(), std::move(out), {a, bias}, [m, n](Node<T>& self) {
        detail::accumulate(self.parents[0].get(), self.grad.data(), self.grad.size());
        Node<T>* pb = self.parents[1].get();
        if (pb->requires_grad) {
            T* d = pb->grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) d[j] += self.grad[i * n + j];
        }
    });
}

// x[C,...] + v[C] broadcast over the trailing axes.
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
    const int c = x.dim(0);
    if (v.numel() != static_cast<std::size_t>(c))
        throw DimensionMismatch("add_channel " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const std::size_t inner = x.numel() / c;
    std::vector<T> out(x.numel());
    auto xv = x.value();
    auto vv = v.value();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < inner; ++i) out[ch * inner + i] = xv[ch * inner + i] + vv[ch];
    return make_result<T>(x.shape(), std::move(out), {x, v}, [c, inner](Node<T>& self) {
        detail::accumulate(self.parents[0].get(), self.grad.data(), self.grad.size());
        Node<T>* pv = self.parents[1].get();
        if (pv->requires_grad) {
            T* d = pv->grad_buffer();
            for (int ch = 0; ch < c; ++ch) {
                T s = 0;
                for (std::size_t i = 0; i < inner; ++i) s += self.grad[ch * inner + i];
                d[ch] += s;
            }
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    return add_row_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------- convolution

enum class PadMode { zero, replicate };

struct Conv2dSpec {
    int stride = 1;
    int pad = 1;
    PadMode pad_mode = PadMode::zero;
};

namespace detail {

template <typename T>
void im2col(const T* x, int cin, int h, int w, int k, const Conv2dSpec& spec, int ho, int wo, T* cols) {
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * spec.stride - spec.pad + ky;
                    bool yin = iy >= 0 && iy < h;
                    if (spec.pad_mode == PadMode::replicate) iy = std::clamp(iy, 0, h - 1);
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * spec.stride - spec.pad + kx;
                        bool xin = ix >= 0 && ix < w;
                        if (spec.pad_mode == PadMode::replicate) {
                            ix = std::clamp(ix, 0, w - 1);
                            row[oy * wo + ox] = x[(static_cast<std::size_t>(ci) * h + iy) * w + ix];
                        } else {
                            row[oy * wo + ox] = (yin && xin) ? x[(static_cast<std::size_t>(ci) * h + iy) * w + ix] : T(0);
                        }
                    }
                }
            }
}

template <typename T>
void col2im(const T* cols, int cin, int h, int w, int k, const Conv2dSpec& spec, int ho, int wo, T* dx) {
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const T* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * spec.stride - spec.pad + ky;
                    if (spec.pad_mode == PadMode::replicate) iy = std::clamp(iy, 0, h - 1);
                    else if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * spec.stride - spec.pad + kx;
                        if (spec.pad_mode == PadMode::replicate) ix = std::clamp(ix, 0, w - 1);
                        else if (ix < 0 || ix >= w) continue;
                        dx[(static_cast<std::size_t>(ci) * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
}

} // namespace detail

// x[Cin,H,W], weight[Cout,Cin,k,k], bias[Cout] -> [Cout,Ho,Wo]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Conv2dSpec spec = {}) {
    if (x.shape().size() != 3 || weight.shape().size() != 4 || weight.dim(1) != x.dim(0) ||
        weight.dim(2) != weight.dim(3) || bias.numel() != static_cast<std::size_t>(weight.dim(0)))
        throw DimensionMismatch("conv2d input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int cout = weight.dim(0), k = weight.dim(2);
    const int ho = (h + 2 * spec.pad - k) / spec.stride + 1;
    const int wo = (w + 2 * spec.pad - k) / spec.stride + 1;
    if (ho <= 0 || wo <= 0) throw DimensionMismatch("conv2d output would be empty");
    const int kk = cin * k * k;
    const int plane = ho * wo;
    const bool direct = (k == 1 && spec.stride == 1 && spec.pad == 0);

    auto cols = std::make_shared<std::vector<T>>();
    const T* colp = x.data();
    if (!direct) {
        cols->resize(static_cast<std::size_t>(kk) * plane);
        detail::im2col(x.data(), cin, h, w, k, spec, ho, wo, cols->data());
        colp = cols->data();
    }
    std::vector<T> out(static_cast<std::size_t>(cout) * plane);
    detail::product<T>(out.data(), plane, false, {weight.data(), cout, kk, kk}, {colp, kk, plane, plane});
    auto bv = bias.value();
    for (int co = 0; co < cout; ++co)
        for (int p = 0; p < plane; ++p) out[static_cast<std::size_t>(co) * plane + p] += bv[co];

    return make_result<T>({cout, ho, wo}, std::move(out), {x, weight, bias},
        [=](Node<T>& self) {
            Node<T>* px = self.parents[0].get();
            Node<T>* pw = self.parents[1].get();
            Node<T>* pb = self.parents[2].get();
            const detail::Operand<T> g{self.grad.data(), cout, plane, plane};
            const detail::Operand<T> wt{pw->data, cout, kk, kk, true};
            const T* cp = direct ? px->data : cols->data();
            if (pw->requires_grad) detail::product<T>(pw->grad_buffer(), kk, true, g, {cp, kk, plane, plane, true});
            if (pb->requires_grad) {
                T* d = pb->grad_buffer();
                for (int co = 0; co < cout; ++co) {
                    const T* row = self.grad.data() + static_cast<std::size_t>(co) * plane;
                    T acc = 0;
                    for (int p = 0; p < plane; ++p) acc += row[p];
                    d[co] += acc;
                }
            }
            if (px->requires_grad) {
                if (direct) {
                    detail::product<T>(px->grad_buffer(), plane, true, wt, g);
                } else {
                    std::vector<T> dcols(static_cast<std::size_t>(kk) * plane);
                    detail::product<T>(dcols.data(), plane, false, wt, g);
                    detail::col2im(dcols.data(), cin, h, w, k, spec, ho, wo, px->grad_buffer());
                }
            }
        });
}

// ---------------------------------------------------------------- normalization / resampling

// x[C,H,W]; gamma, beta [C]
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
    const int c = x.dim(0);
    if (groups <= 0 || c % groups != 0) throw InvalidArgument("group_norm: channels not divisible by groups");
    if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c))
        throw DimensionMismatch("group_norm affine parameter size");
    const std::size_t hw = x.numel() / c;
    const int cpg = c / groups;
    const std::size_t gsize = hw * cpg;
    auto xv = x.value();
    auto gv = gamma.value();
    auto bv = beta.value();
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(groups);
    std::vector<T> out(x.numel());
    for (int g = 0; g < groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * gsize;
        T mean = 0;
        for (std::size_t i = 0; i < gsize; ++i) mean += xv[base + i];
        mean /= static_cast<T>(gsize);
        T var = 0;
        for (std::size_t i = 0; i < gsize; ++i) {
            T d = xv[base + i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(gsize);
        T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[g] = is;
        for (std::size_t i = 0; i < gsize; ++i) (*xhat)[base + i] = (xv[base + i] - mean) * is;
    }
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i)
            out[ch * hw + i] = (*xhat)[ch * hw + i] * gv[ch] + bv[ch];

    return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
        [=](Node<T>& self) {
            Node<T>* px = self.parents[0].get();
            Node<T>* pg = self.parents[1].get();
            Node<T>* pb = self.parents[2].get();
            const T* gy = self.grad.data();
            auto gam = pg->value();
            if (pg->requires_grad || pb->requires_grad) {
                for (int ch = 0; ch < c; ++ch) {
                    T sg = 0, sb = 0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sg += gy[ch * hw + i] * (*xhat)[ch * hw + i];
                        sb += gy[ch * hw + i];
                    }
                    if (pg->requires_grad) pg->grad_buffer()[ch] += sg;
                    if (pb->requires_grad) pb->grad_buffer()[ch] += sb;
                }
            }
            if (px->requires_grad) {
                T* dx = px->grad_buffer();
                for (int g = 0; g < groups; ++g) {
                    const std::size_t base = static_cast<std::size_t>(g) * gsize;
                    T m1 = 0, m2 = 0;
                    for (std::size_t i = 0; i < gsize; ++i) {
                        int ch = static_cast<int>((base + i) / hw);
                        T dxh = gy[base + i] * gam[ch];
                        m1 += dxh;
                        m2 += dxh * (*xhat)[base + i];
                    }
                    m1 /= static_cast<T>(gsize);
                    m2 /= static_cast<T>(gsize);
                    const T is = (*inv_std)[g];
                    for (std::size_t i = 0; i < gsize; ++i) {
                        int ch = static_cast<int>((base + i) / hw);
                        T dxh = gy[base + i] * gam[ch];
                        dx[base + i] += is * (dxh - m1 - (*xhat)[base + i] * m2);
                    }
                }
            }
        });
}

// Nearest-neighbour 2x upsampling of [C,H,W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int h2 = 2 * h, w2 = 2 * w;
    std::vector<T> out(static_cast<std::size_t>(c) * h2 * w2);
    auto xv = x.value();
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h2; ++y)
            for (int xx = 0; xx < w2; ++xx)
                out[(static_cast<std::size_t>(ch) * h2 + y) * w2 + xx] = xv[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
    return make_result<T>({c, h2, w2}, std::move(out), {x}, [c, h, w, h2, w2](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        T* d = p->grad_buffer();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h2; ++y)
                for (int xx = 0; xx < w2; ++xx)
                    d[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
                        self.grad[(static_cast<std::size_t>(ch) * h2 + y) * w2 + xx];
    });
}

// [C,H,W] -> [C], mean over the spatial axes.
template <typename T>
Var<T> mean_spatial(const Var<T>& x) {
    const int c = x.dim(0);
    const std::size_t hw = x.numel() / c;
    std::vector<T> out(c, T(0));
    auto xv = x.value();
    for (int ch = 0; ch < c; ++ch) {
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += xv[ch * hw + i];
        out[ch] = s / static_cast<T>(hw);
    }
    return make_result<T>({c}, std::move(out), {x}, [c, hw](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        T* d = p->grad_buffer();
        for (int ch = 0; ch < c; ++ch) {
            T g = self.grad[ch] / static_cast<T>(hw);
            for (std::size_t i = 0; i < hw; ++i) d[ch * hw + i] += g;
        }
    });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
    T s = 0;
    for (T v : a.value()) s += v;
    return make_result<T>({1}, {s}, {a}, [](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        T* d = p->grad_buffer();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < p->numel(); ++i) d[i] += g;
    });
}

// Mean squared difference against a constant target.
template <typename T>
Var<T> mse(const Var<T>& pred, std::span<const T> target) {
    if (target.size() != pred.numel()) throw DimensionMismatch("mse target size");
    auto pv = pred.value();
    T s = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        T d = pv[i] - target[i];
        s += d * d;
    }
    const T n = static_cast<T>(target.size());
    std::vector<T> tgt(target.begin(), target.end());
    return make_result<T>({1}, {s / n}, {pred}, [tgt = std::move(tgt), n](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        auto pv = p->value();
        T* d = p->grad_buffer();
        const T g = self.grad[0] * T(2) / n;
        for (std::size_t i = 0; i < tgt.size(); ++i) d[i] += g * (pv[i] - tgt[i]);
    });
}

// Σ a ∘ w for a constant weight vector; used to reduce tensors to scalars in
// gradient checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, std::span<const T> w) {
    if (w.size() != a.numel()) throw DimensionMismatch("weighted_sum weight size");
    auto av = a.value();
    T s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) s += av[i] * w[i];
    std::vector<T> wc(w.begin(), w.end());
    return make_result<T>({1}, {s}, {a}, [wc = std::move(wc)](Node<T>& self) {
        Node<T>* p = self.parents[0].get();
        T* d = p->grad_buffer();
        for (std::size_t i = 0; i < wc.size(); ++i) d[i] += self.grad[0] * wc[i];
    });
}

// [C,H,W] -> [H*W, C] token matrix and back.
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    return transpose(reshape(x, {c, h * w}));
}

template <typename T>
Var<T> from_tokens(const Var<T>& tokens, int h, int w) {
    const int c = tokens.dim(1);
    return reshape(transpose(tokens), {c, h, w});
}

} // namespace ag
} // namespace mtcolor
