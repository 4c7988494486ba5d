#pragma once

// Masked attention: pixel-level masked cross-attention (queries/keys from the
// latent, values from the condition features) and masked self-attention over
// the latent tokens concatenated with instance tokens.

#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mtcolor/autograd.hpp"
#include "mtcolor/mask_algebra.hpp"

namespace mtcolor {

enum class MaskMode {
    post_softmax,       // softmax over the full row, then multiply by the mask
    pre_softmax_renorm, // masked scores -> -inf, softmax over allowed keys only
};

inline const char* to_string(MaskMode m) {
    return m == MaskMode::post_softmax ? "post_softmax" : "pre_softmax_renorm";
}

inline MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "post_softmax") return MaskMode::post_softmax;
    if (s == "pre_softmax_renorm") return MaskMode::pre_softmax_renorm;
    throw InvalidArgument("unknown mask mode '" + s + "'");
}

namespace detail {

// Row-wise masked softmax. `probs` receives the unmasked softmax (post mode
// only, may be null); `weights` receives the masked weights.
template <typename T>
void masked_softmax_rows(const T* scores, const AttentionMask& mask, int row_offset, MaskMode mode, int rows, int cols,
                         T* probs, T* weights) {
    for (int i = 0; i < rows; ++i) {
        const T* s = scores + static_cast<std::size_t>(i) * cols;
        const std::uint8_t* m = mask.row(row_offset + i);
        T* w = weights + static_cast<std::size_t>(i) * cols;
        if (mode == MaskMode::post_softmax) {
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < cols; ++j) mx = std::max(mx, s[j]);
            T z = 0;
            T* p = probs ? probs + static_cast<std::size_t>(i) * cols : w;
            for (int j = 0; j < cols; ++j) {
                p[j] = std::exp(s[j] - mx);
                z += p[j];
            }
            for (int j = 0; j < cols; ++j) {
                p[j] /= z;
                w[j] = m[j] ? p[j] : T(0);
            }
        } else {
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < cols; ++j)
                if (m[j]) mx = std::max(mx, s[j]);
            if (mx == -std::numeric_limits<T>::infinity()) {
                for (int j = 0; j < cols; ++j) w[j] = T(0);
                continue;
            }
            T z = 0;
            for (int j = 0; j < cols; ++j) {
                w[j] = m[j] ? std::exp(s[j] - mx) : T(0);
                z += w[j];
            }
            for (int j = 0; j < cols; ++j) w[j] /= z;
        }
    }
}

template <typename T>
void check_finite(std::span<const T> v, const char* what) {
    for (T x : v)
        if (!std::isfinite(x)) throw InvalidInput(std::string(what) + ": non-finite value");
}

} // namespace detail

template <typename T>
std::vector<T> masked_softmax(std::span<const T> scores, int rows, int cols, const AttentionMask& mask, MaskMode mode) {
    if (mask.rows() != rows || mask.cols() != cols || scores.size() != static_cast<std::size_t>(rows) * cols)
        throw DimensionMismatch("masked_softmax: scores and mask shapes differ");
    detail::check_finite(scores, "masked_softmax scores");
    std::vector<T> out(scores.size());
    std::vector<T> probs(mode == MaskMode::post_softmax ? scores.size() : 0);
    detail::masked_softmax_rows(scores.data(), mask, 0, mode, rows, cols, probs.empty() ? nullptr : probs.data(),
                                out.data());
    return out;
}

namespace ag {

// Core scaled dot-product attention with a boolean mask. q[Lq,d], k[Lk,d],
// v[Lk,dv]; heads split d and dv evenly. Returns [Lq,dv].
template <typename T>
Var<T> masked_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionMask& mask, MaskMode mode,
                        int heads = 1) {
    if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
        throw DimensionMismatch("masked_attention expects matrices");
    const int lq = q.dim(0), d = q.dim(1), lk = k.dim(0), dv = v.dim(1);
    if (k.dim(1) != d || v.dim(0) != lk) throw DimensionMismatch("masked_attention q/k/v shapes");
    if (mask.rows() != lq || mask.cols() != lk)
        throw DimensionMismatch("attention mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                                ", expected " + std::to_string(lq) + "x" + std::to_string(lk));
    if (d == 0) throw InvalidArgument("attention projection dim is zero");
    if (heads < 1 || d % heads != 0 || dv % heads != 0) throw InvalidArgument("head count must divide d and dv");
    const int dh = d / heads, dvh = dv / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));

    const std::size_t att = static_cast<std::size_t>(lq) * lk;
    auto probs = std::make_shared<std::vector<T>>(mode == MaskMode::post_softmax ? att * heads : 0);
    auto weights = std::make_shared<std::vector<T>>(att * heads);
    std::vector<T> scores(att);
    std::vector<T> out(static_cast<std::size_t>(lq) * dv);
    for (int h = 0; h < heads; ++h) {
        ag::detail::product<T>(scores.data(), lk, false, {q.data() + h * dh, lq, dh, d},
                               {k.data() + h * dh, lk, dh, d, true}, sc);
        mtcolor::detail::check_finite(std::span<const T>(scores), "attention scores");
        T* wp = weights->data() + h * att;
        mtcolor::detail::masked_softmax_rows(scores.data(), mask, 0, mode, lq, lk,
                                    probs->empty() ? nullptr : probs->data() + h * att, wp);
        ag::detail::product<T>(out.data() + h * dvh, dv, false, {wp, lq, lk, lk}, {v.data() + h * dvh, lk, dvh, dv});
    }

    return make_result<T>({lq, dv}, std::move(out), {q, k, v},
        [=, mask = mask](Node<T>& self) {
            Node<T>* pq = self.parents[0].get();
            Node<T>* pk = self.parents[1].get();
            Node<T>* pv = self.parents[2].get();
            std::vector<T> dw(att), da(att);
            for (int h = 0; h < heads; ++h) {
                const ag::detail::Operand<T> go{self.grad.data() + h * dvh, lq, dvh, dv};
                const T* wp = weights->data() + h * att;
                if (pv->requires_grad)
                    ag::detail::product<T>(pv->grad_buffer() + h * dvh, dv, true, {wp, lq, lk, lk, true}, go);
                if (!pq->requires_grad && !pk->requires_grad) continue;
                ag::detail::product<T>(dw.data(), lk, false, go, {pv->data + h * dvh, lk, dvh, dv, true});
                if (mode == MaskMode::post_softmax) {
                    const T* pp = probs->data() + h * att;
                    for (int i = 0; i < lq; ++i) {
                        const std::uint8_t* m = mask.row(i);
                        const std::size_t r = static_cast<std::size_t>(i) * lk;
                        T dot = 0;
                        for (int j = 0; j < lk; ++j) dot += (m[j] ? dw[r + j] : T(0)) * pp[r + j];
                        for (int j = 0; j < lk; ++j) da[r + j] = pp[r + j] * ((m[j] ? dw[r + j] : T(0)) - dot);
                    }
                } else {
                    for (int i = 0; i < lq; ++i) {
                        const std::size_t r = static_cast<std::size_t>(i) * lk;
                        T dot = 0;
                        for (int j = 0; j < lk; ++j) dot += dw[r + j] * wp[r + j];
                        for (int j = 0; j < lk; ++j) da[r + j] = wp[r + j] * (dw[r + j] - dot);
                    }
                }
                if (pq->requires_grad)
                    ag::detail::product<T>(pq->grad_buffer() + h * dh, d, true, {da.data(), lq, lk, lk},
                                           {pk->data + h * dh, lk, dh, d}, sc);
                if (pk->requires_grad)
                    ag::detail::product<T>(pk->grad_buffer() + h * dh, d, true, {da.data(), lq, lk, lk, true},
                                           {pq->data + h * dh, lq, dh, d}, sc);
            }
        });
}

} // namespace ag

// Projection weights of one attention layer as graph variables. Biases are
// optional (undefined Var = no bias).
template <typename T>
struct ProjectionVars {
    ag::Var<T> w_q, w_k, w_v, w_o;
    ag::Var<T> b_q, b_k, b_v, b_o;
    int heads = 1;

    int c_in() const { return w_q.dim(0); }
    int d() const { return w_q.dim(1); }
    int c_out() const { return w_o.dim(1); }

    void validate(int expected_c_in) const {
        if (!w_q.defined() || !w_k.defined() || !w_v.defined() || !w_o.defined())
            throw InvalidArgument("projection weights missing");
        if (w_q.dim(0) != expected_c_in || w_k.dim(0) != expected_c_in || w_v.dim(0) != expected_c_in)
            throw DimensionMismatch("projection input width " + std::to_string(w_q.dim(0)) + " != feature width " +
                                    std::to_string(expected_c_in));
        if (w_k.dim(1) != w_q.dim(1) || w_o.dim(0) != w_v.dim(1))
            throw DimensionMismatch("projection shapes inconsistent");
        if (w_q.dim(1) == 0) throw InvalidArgument("projection dim d is zero");
    }
};

// Plain-value projection parameters (c_in x d, d x c_out).
template <typename T>
struct ProjectionParams {
    int c_in = 0, d = 0, c_out = 0, heads = 1;
    std::vector<T> w_q, w_k, w_v, w_o;
    std::vector<T> b_q, b_k, b_v, b_o; // empty = no bias

    static ProjectionParams identity(int c) {
        ProjectionParams p;
        p.c_in = p.d = p.c_out = c;
        std::vector<T> eye(static_cast<std::size_t>(c) * c, T(0));
        for (int i = 0; i < c; ++i) eye[i * c + i] = T(1);
        p.w_q = p.w_k = p.w_v = p.w_o = eye;
        return p;
    }

    template <typename Rng>
    static ProjectionParams random(int c_in, int d, int c_out, Rng& rng, bool biases = false, T stddev = T(0.5)) {
        std::normal_distribution<double> nd(0.0, static_cast<double>(stddev));
        auto fill = [&](std::size_t n) {
            std::vector<T> v(n);
            for (auto& x : v) x = static_cast<T>(nd(rng));
            return v;
        };
        ProjectionParams p;
        p.c_in = c_in;
        p.d = d;
        p.c_out = c_out;
        p.w_q = fill(static_cast<std::size_t>(c_in) * d);
        p.w_k = fill(static_cast<std::size_t>(c_in) * d);
        p.w_v = fill(static_cast<std::size_t>(c_in) * d);
        p.w_o = fill(static_cast<std::size_t>(d) * c_out);
        if (biases) {
            p.b_q = fill(d);
            p.b_k = fill(d);
            p.b_v = fill(d);
            p.b_o = fill(c_out);
        }
        return p;
    }

    ProjectionVars<T> vars(bool requires_grad) const {
        ProjectionVars<T> v;
        v.w_q = ag::Var<T>::leaf({c_in, d}, w_q, requires_grad);
        v.w_k = ag::Var<T>::leaf({c_in, d}, w_k, requires_grad);
        v.w_v = ag::Var<T>::leaf({c_in, d}, w_v, requires_grad);
        v.w_o = ag::Var<T>::leaf({d, c_out}, w_o, requires_grad);
        if (!b_q.empty()) v.b_q = ag::Var<T>::leaf({d}, b_q, requires_grad);
        if (!b_k.empty()) v.b_k = ag::Var<T>::leaf({d}, b_k, requires_grad);
        if (!b_v.empty()) v.b_v = ag::Var<T>::leaf({d}, b_v, requires_grad);
        if (!b_o.empty()) v.b_o = ag::Var<T>::leaf({c_out}, b_o, requires_grad);
        v.heads = heads;
        return v;
    }
};

namespace detail {

template <typename T>
ag::Var<T> project(const ag::Var<T>& x, const ag::Var<T>& w, const ag::Var<T>& b) {
    auto y = ag::matmul(x, w);
    return b.defined() ? ag::add_row_bias(y, b) : y;
}

} // namespace detail

// f_x, f_y: [c,h,w]; mask: (hw x hw). Q,K from f_x; V from f_y.
// Output [c_out,h,w] (not residual).
template <typename T>
ag::Var<T> masked_cross_attention(const ag::Var<T>& f_x, const ag::Var<T>& f_y, const AttentionMask& mask,
                                  const ProjectionVars<T>& p, MaskMode mode) {
    if (f_x.shape().size() != 3 || f_x.shape() != f_y.shape())
        throw DimensionMismatch("masked_cross_attention: f_x " + shape_str(f_x.shape()) + " vs f_y " +
                                shape_str(f_y.shape()));
    const int h = f_x.dim(1), w = f_x.dim(2);
    p.validate(f_x.dim(0));
    if (mask.rows() != h * w || mask.cols() != h * w) throw DimensionMismatch("cross-attention mask must be hw x hw");
    auto xt = ag::to_tokens(f_x);
    auto yt = ag::to_tokens(f_y);
    auto q = detail::project(xt, p.w_q, p.b_q);
    auto k = detail::project(xt, p.w_k, p.b_k);
    auto v = detail::project(yt, p.w_v, p.b_v);
    auto o = ag::masked_attention(q, k, v, mask, mode, p.heads);
    auto out = detail::project(o, p.w_o, p.b_o);
    return ag::from_tokens(out, h, w);
}

// latent [c,h,w], gamma [n,c]; mask ((hw+n) x (hw+n)). Self-attention over
// concat(tokens(latent), gamma); only the latent rows are returned, as
// [c_out,h,w] (not residual).
template <typename T>
ag::Var<T> masked_self_attention(const ag::Var<T>& latent, const ag::Var<T>& gamma, const AttentionMask& mask,
                                 const ProjectionVars<T>& p, MaskMode mode) {
    if (latent.shape().size() != 3) throw DimensionMismatch("latent must be [c,h,w]");
    const int c = latent.dim(0), h = latent.dim(1), w = latent.dim(2);
    const int lx = h * w;
    int n = 0;
    if (gamma.defined()) {
        if (gamma.shape().size() != 2 || gamma.dim(1) != c)
            throw DimensionMismatch("instance features " + shape_str(gamma.shape()) + " do not match channel width " +
                                    std::to_string(c));
        n = gamma.dim(0);
    }
    if (mask.rows() != lx + n || mask.cols() != lx + n)
        throw DimensionMismatch("self-map mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                                ", expected " + std::to_string(lx + n) + " square");
    p.validate(c);
    auto tokens = ag::to_tokens(latent);
    auto seq = n > 0 ? ag::concat0(tokens, gamma) : tokens;
    auto q = detail::project(seq, p.w_q, p.b_q);
    auto k = detail::project(seq, p.w_k, p.b_k);
    auto v = detail::project(seq, p.w_v, p.b_v);
    auto o = ag::masked_attention(q, k, v, mask, mode, p.heads);
    if (n > 0) o = ag::slice0(o, 0, lx);
    auto out = detail::project(o, p.w_o, p.b_o);
    return ag::from_tokens(out, h, w);
}

// ---------------------------------------------------------------- tape API

// Cached forward graph of one attention call, for explicit backward.
template <typename T>
struct AttentionTape {
    ag::Var<T> output;
    std::map<std::string, ag::Var<T>> inputs; // leaves: "f_x", "f_y"/"gamma", "w_q", ...
    bool consumed = false;
};

template <typename T>
using AttentionGrads = std::map<std::string, std::vector<T>>;

namespace detail {

template <typename T>
void register_projection(AttentionTape<T>& tape, const ProjectionVars<T>& p) {
    tape.inputs["w_q"] = p.w_q;
    tape.inputs["w_k"] = p.w_k;
    tape.inputs["w_v"] = p.w_v;
    tape.inputs["w_o"] = p.w_o;
    if (p.b_q.defined()) tape.inputs["b_q"] = p.b_q;
    if (p.b_k.defined()) tape.inputs["b_k"] = p.b_k;
    if (p.b_v.defined()) tape.inputs["b_v"] = p.b_v;
    if (p.b_o.defined()) tape.inputs["b_o"] = p.b_o;
}

} // namespace detail

// f_x, f_y as [c,h,w] value vectors.
template <typename T>
AttentionTape<T> record_cross_attention(int c, int h, int w, const std::vector<T>& f_x, const std::vector<T>& f_y,
                                        const AttentionMask& mask, const ProjectionParams<T>& params, MaskMode mode) {
    AttentionTape<T> tape;
    auto fx = ag::Var<T>::leaf({c, h, w}, f_x);
    auto fy = ag::Var<T>::leaf({c, h, w}, f_y);
    auto pv = params.vars(true);
    tape.output = masked_cross_attention(fx, fy, mask, pv, mode);
    tape.inputs["f_x"] = fx;
    tape.inputs["f_y"] = fy;
    detail::register_projection(tape, pv);
    return tape;
}

template <typename T>
AttentionTape<T> record_self_attention(int c, int h, int w, const std::vector<T>& latent, int n,
                                       const std::vector<T>& gamma, const AttentionMask& mask,
                                       const ProjectionParams<T>& params, MaskMode mode) {
    AttentionTape<T> tape;
    auto lat = ag::Var<T>::leaf({c, h, w}, latent);
    ag::Var<T> g;
    if (n > 0) g = ag::Var<T>::leaf({n, c}, gamma);
    auto pv = params.vars(true);
    tape.output = masked_self_attention(lat, g, mask, pv, mode);
    tape.inputs["latent"] = lat;
    if (n > 0) tape.inputs["gamma"] = g;
    detail::register_projection(tape, pv);
    return tape;
}

// Analytic gradients of every tape input given dL/d(output). A tape can be
// used once.
template <typename T>
AttentionGrads<T> attention_backward(AttentionTape<T>& tape, std::span<const T> upstream) {
    if (tape.consumed) throw InvalidArgument("attention tape already consumed");
    if (!tape.output.defined()) throw InvalidArgument("attention tape is empty");
    if (upstream.size() != tape.output.numel())
        throw DimensionMismatch("upstream gradient size " + std::to_string(upstream.size()) +
                                " does not match tape output " + shape_str(tape.output.shape()));
    tape.consumed = true;
    ag::backward(tape.output, upstream);
    AttentionGrads<T> grads;
    for (auto& [name, v] : tape.inputs) {
        auto g = v.grad();
        grads[name] = g.empty() ? std::vector<T>(v.numel(), T(0)) : std::vector<T>(g.begin(), g.end());
    }
    return grads;
}

} // namespace mtcolor
