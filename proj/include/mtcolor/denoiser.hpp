#pragma once

// Noise-prediction network: a small U-Net over RGB pixels whose attention
// blocks are the instance guidance block followed by pixel-level masked
// cross-attention against grayscale condition features.

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mtcolor/attention.hpp"
#include "mtcolor/instance_guidance.hpp"
#include "mtcolor/mask_algebra.hpp"
#include "mtcolor/params.hpp"
#include "mtcolor/text_encoder.hpp"

namespace mtcolor {

struct DenoiserConfig {
    int image_size = 32;
    int channels = 3;
    int base_channels = 32;
    std::array<int, 3> mults{1, 2, 4};
    int time_dim = 128;
    int groups = 8;
    int heads = 1;
    MaskMode mode = MaskMode::pre_softmax_renorm;
    MaskPolicy policy{};
    bool guidance_first = true; // guidance block before the pixel cross-attention
    std::string text_encoder = "toy";
    std::string text_sidecar;
    GuidanceConfig guidance{};

    int level_channels(int l) const { return base_channels * mults[l]; }
    int level_size(int l) const { return image_size >> l; }

    void validate() const {
        if (image_size < 4 || image_size % 4 != 0)
            throw InvalidArgument("image_size must be a positive multiple of 4, got " + std::to_string(image_size));
        if (base_channels < 1 || time_dim < 2 || time_dim % 2 != 0)
            throw InvalidArgument("base_channels >= 1 and an even time_dim are required");
        for (int l = 0; l < 3; ++l)
            if (level_channels(l) % gn_groups(level_channels(l)) != 0) throw InvalidArgument("bad group count");
    }

    int gn_groups(int c) const {
        int g = std::min(groups, c);
        while (c % g != 0) --g;
        return g;
    }
};

// Everything the network is conditioned on for one sample. Null flags mark
// dropped conditions: null masks force all-ones attention masks, null texts
// embed as zero vectors.
struct Conditioning {
    std::vector<float> gray; // H*W luminance in [0,1]
    std::string global_text;
    MaskSet masks{0, 0};
    std::vector<std::string> texts;
    bool null_masks = false;
    bool null_texts = false;

    int count() const { return static_cast<int>(masks.size()); }
};

// Inference-time switches used by the ablation variants.
struct ForwardOptions {
    bool masks_enabled = true;    // false: every attention mask all-ones
    bool guidance_enabled = true; // false: guidance blocks bypassed
};

// Intermediate outputs recorded during a forward, keyed by block name
// ("d1.guide", "d1.xattn", ...). Values are the branch outputs before the
// residual add.
template <typename T>
using LayerTaps = std::map<std::string, std::vector<T>>;

// Sinusoidal features [sin(t f_0..), cos(t f_0..)], f_k = 10000^(-k/half).
inline std::vector<double> timestep_embedding(double t, int dim) {
    if (t < 0) throw InvalidArgument("timestep must be >= 0");
    if (dim < 2 || dim % 2 != 0) throw InvalidArgument("embedding dim must be even");
    const int half = dim / 2;
    std::vector<double> e(dim);
    for (int k = 0; k < half; ++k) {
        const double f = std::exp(-std::log(10000.0) * k / half);
        e[k] = std::sin(t * f);
        e[half + k] = std::cos(t * f);
    }
    return e;
}

// The unconditional counterpart of c: gray only.
inline Conditioning null_conditioning(const Conditioning& c) {
    Conditioning out;
    out.gray = c.gray;
    out.masks = MaskSet(c.masks.width(), c.masks.height());
    out.null_masks = true;
    out.null_texts = true;
    return out;
}

// With probability p (one draw) masks and all texts become null; gray stays.
template <typename Rng>
Conditioning drop_conditions(const Conditioning& c, double p, Rng& rng) {
    if (p < 0 || p > 1) throw InvalidArgument("drop probability must be in [0,1]");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool drop = u(rng) < p;
    if (!drop) return c;
    return null_conditioning(c);
}

template <typename T>
class Denoiser {
public:
    // Attention-bearing blocks and the U-Net level each sits on.
    static constexpr std::array<std::pair<const char*, int>, 3> kAttnBlocks{{{"d1", 1}, {"mid", 2}, {"u1", 1}}};

    Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        cfg_.guidance.mode = cfg_.mode;
        cfg_.guidance.policy = cfg_.policy;
        cfg_.guidance.heads = cfg_.heads;
        enc_ = make_text_encoder(cfg_.text_encoder, cfg_.text_sidecar);
        std::mt19937_64 rng(seed);
        build_params(rng);
    }

    // Wraps an existing parameter store (checkpoint load); shapes are checked.
    Denoiser(DenoiserConfig cfg, ParamStore<T> store) : Denoiser(cfg, std::uint64_t{0}) {
        for (const auto& p : store_.all()) {
            if (!store.contains(p.name)) throw CheckpointError("checkpoint is missing parameter '" + p.name + "'");
            const auto& q = store.at(p.name);
            if (q.shape != p.shape)
                throw CheckpointError("parameter '" + p.name + "' has shape " + shape_str(q.shape) + ", model expects " +
                                      shape_str(p.shape));
        }
        if (store.size() != store_.size()) throw CheckpointError("checkpoint has unexpected extra parameters");
        for (auto& p : store_.all()) p.value = store.at(p.name).value;
    }

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    const TextEncoder& text_encoder() const { return *enc_; }

    // Condition features: "inject" at full resolution and one cross-attention
    // feature map per attention level.
    struct ConditionFeatures {
        ag::Var<T> inject;
        std::array<ag::Var<T>, 3> f_y; // index by level; [0] unused
    };

    ConditionFeatures encode_condition(Binder<T>& b, const std::vector<float>& gray) const {
        const int s = cfg_.image_size;
        if (gray.size() != static_cast<std::size_t>(s) * s)
            throw DimensionMismatch("gray has " + std::to_string(gray.size()) + " pixels, expected " +
                                    std::to_string(s * s));
        std::vector<T> g(gray.size());
        for (std::size_t i = 0; i < gray.size(); ++i) {
            if (!(gray[i] >= 0.0f && gray[i] <= 1.0f)) throw InvalidInput("gray values must lie in [0,1]");
            g[i] = static_cast<T>(2.0 * gray[i] - 1.0);
        }
        const ag::Conv2dSpec same{1, 1, ag::PadMode::replicate};
        const ag::Conv2dSpec down{2, 1, ag::PadMode::replicate};
        const ag::Conv2dSpec pointwise{1, 0, ag::PadMode::zero};
        auto x = ag::Var<T>::constant({1, s, s}, std::move(g));
        auto a0 = ag::silu(ag::conv2d(x, b("cond.conv0.w"), b("cond.conv0.b"), same));
        auto a1 = ag::silu(ag::conv2d(a0, b("cond.conv1.w"), b("cond.conv1.b"), down));
        auto a2 = ag::silu(ag::conv2d(a1, b("cond.conv2.w"), b("cond.conv2.b"), down));
        ConditionFeatures f;
        f.inject = ag::conv2d(a0, b("cond.head0.w"), b("cond.head0.b"), pointwise);
        f.f_y[1] = ag::conv2d(a1, b("cond.head1.w"), b("cond.head1.b"), pointwise);
        f.f_y[2] = ag::conv2d(a2, b("cond.head2.w"), b("cond.head2.b"), pointwise);
        return f;
    }

    // ε̂(z_t, t, conditions). z is [3,H,W].
    ag::Var<T> forward(Binder<T>& b, const ag::Var<T>& z, double t, const Conditioning& c,
                       const ForwardOptions& opt = {}, LayerTaps<T>* taps = nullptr) const {
        const int s = cfg_.image_size;
        if (z.shape() != Shape{cfg_.channels, s, s})
            throw DimensionMismatch("noisy image is " + shape_str(z.shape()) + ", expected [" +
                                    std::to_string(cfg_.channels) + "," + std::to_string(s) + "," +
                                    std::to_string(s) + "]");
        if (!c.null_masks && c.count() > 0 && (c.masks.width() != s || c.masks.height() != s))
            throw DimensionMismatch("instance masks are " + std::to_string(c.masks.width()) + "x" +
                                    std::to_string(c.masks.height()) + ", image is " + std::to_string(s));
        if (!c.null_texts && c.texts.size() != c.masks.size())
            throw DimensionMismatch(std::to_string(c.texts.size()) + " instance texts for " +
                                    std::to_string(c.masks.size()) + " masks");

        auto temb = time_embedding(b, t, c);
        auto cond = encode_condition(b, c.gray);

        // Instance inputs shared by all guidance levels.
        InstanceInputs<T> inst;
        const bool use_instances = opt.guidance_enabled && !c.null_masks && c.count() > 0;
        if (use_instances) {
            std::vector<std::string> texts = c.null_texts ? std::vector<std::string>(c.masks.size()) : c.texts;
            inst = encode_instances(b, c.masks, texts, *enc_, cfg_.guidance);
        } else {
            inst.masks = MaskSet(s, s);
            inst.text_emb = ag::Var<T>::zeros({0, enc_->dim()});
            inst.mask_emb = ag::Var<T>::zeros({0, cfg_.guidance.d_mask()});
        }
        const bool masks_on = opt.masks_enabled && !c.null_masks;

        const ag::Conv2dSpec down{2, 1, ag::PadMode::zero};
        auto h = ag::conv2d(z, b("conv_in.w"), b("conv_in.b"));
        h = ag::add(h, cond.inject);
        auto h0 = res_block(b, "d0", h, temb);
        h = ag::conv2d(h0, b("down0.w"), b("down0.b"), down);
        h = res_block(b, "d1", h, temb);
        auto h1 = attn_block(b, "d1", 1, h, cond, inst, c.masks, masks_on, opt, taps);
        h = ag::conv2d(h1, b("down1.w"), b("down1.b"), down);
        h = res_block(b, "mid", h, temb);
        h = attn_block(b, "mid", 2, h, cond, inst, c.masks, masks_on, opt, taps);
        h = ag::concat0(ag::upsample2x(h), h1);
        h = res_block(b, "u1", h, temb);
        h = attn_block(b, "u1", 1, h, cond, inst, c.masks, masks_on, opt, taps);
        h = ag::concat0(ag::upsample2x(h), h0);
        h = res_block(b, "u0", h, temb);
        h = ag::silu(norm(b, "out.gn", h));
        return ag::conv2d(h, b("out.conv.w"), b("out.conv.b"));
    }

    // Inference convenience: no gradients.
    std::vector<T> predict(const std::vector<T>& z, double t, const Conditioning& c, const ForwardOptions& opt = {},
                           LayerTaps<T>* taps = nullptr) const {
        Binder<T> b(store_);
        const int s = cfg_.image_size;
        return forward(b, ag::Var<T>::constant({cfg_.channels, s, s}, z), t, c, opt, taps).to_vector();
    }

private:
    DenoiserConfig cfg_;
    std::shared_ptr<const TextEncoder> enc_;
    ParamStore<T> store_;

    // ---------------------------------------------------------------- parameters

    template <typename Rng>
    void add_conv(const std::string& name, ParamGroup g, int cout, int cin, int k, Rng& rng, bool zero = false) {
        const std::size_t n = static_cast<std::size_t>(cout) * cin * k * k;
        store_.add(name + ".w", g, {cout, cin, k, k},
                   zero ? init::constant<T>(n, T(0)) : init::fan_in<T>(n, cin * k * k, rng, 1.4));
        store_.add(name + ".b", g, {cout}, init::constant<T>(cout, T(0)));
    }

    template <typename Rng>
    void add_linear(const std::string& name, ParamGroup g, int in, int out, Rng& rng, bool zero = false) {
        const std::size_t n = static_cast<std::size_t>(in) * out;
        store_.add(name + ".w", g, {in, out}, zero ? init::constant<T>(n, T(0)) : init::fan_in<T>(n, in, rng, 1.4));
        store_.add(name + ".b", g, {out}, init::constant<T>(out, T(0)));
    }

    void add_norm(const std::string& name, int c) {
        store_.add(name + ".g", ParamGroup::backbone, {c}, init::constant<T>(c, T(1)));
        store_.add(name + ".b", ParamGroup::backbone, {c}, init::constant<T>(c, T(0)));
    }

    template <typename Rng>
    void add_res(const std::string& name, int cin, int cout, Rng& rng) {
        const auto bb = ParamGroup::backbone;
        add_norm(name + ".gn0", cin);
        add_conv(name + ".conv0", bb, cout, cin, 3, rng);
        add_linear(name + ".temb", bb, cfg_.time_dim, cout, rng);
        add_norm(name + ".gn1", cout);
        add_conv(name + ".conv1", bb, cout, cout, 3, rng);
        if (cin != cout) add_conv(name + ".skip", bb, cout, cin, 1, rng);
    }

    template <typename Rng>
    void build_params(Rng& rng) {
        const auto bb = ParamGroup::backbone;
        const auto cd = ParamGroup::condition;
        const int c0 = cfg_.level_channels(0), c1 = cfg_.level_channels(1), c2 = cfg_.level_channels(2);
        const int td = cfg_.time_dim;

        add_linear("temb.fc0", bb, td, td, rng);
        add_linear("temb.fc1", bb, td, td, rng);
        add_linear("temb.text", bb, enc_->dim(), td, rng, true);

        add_conv("conv_in", bb, c0, cfg_.channels, 3, rng);
        add_res("d0", c0, c0, rng);
        add_conv("down0", bb, c0, c0, 3, rng);
        add_res("d1", c0, c1, rng);
        add_conv("down1", bb, c1, c1, 3, rng);
        add_res("mid", c1, c2, rng);
        add_res("u1", c2 + c1, c1, rng);
        add_res("u0", c1 + c0, c0, rng);
        add_norm("out.gn", c0);
        add_conv("out.conv", bb, cfg_.channels, c0, 3, rng, true);

        for (const auto& [name, level] : kAttnBlocks) {
            const int c = cfg_.level_channels(level);
            const std::string p = name;
            add_norm(p + ".gn_g", c);
            add_norm(p + ".gn_x", c);
            add_guidance_params(store_, p + ".guide", c, *enc_, cfg_.guidance, rng);
            add_attention_params(store_, p + ".xattn", cd, c, false, rng);
        }

        add_conv("cond.conv0", cd, c0, 1, 3, rng);
        add_conv("cond.conv1", cd, c1, c0, 3, rng);
        add_conv("cond.conv2", cd, c2, c1, 3, rng);
        add_conv("cond.head0", cd, c0, c0, 1, rng, true);
        add_conv("cond.head1", cd, c1, c1, 1, rng, true);
        add_conv("cond.head2", cd, c2, c2, 1, rng, true);
    }

    // ---------------------------------------------------------------- blocks

    ag::Var<T> norm(Binder<T>& b, const std::string& name, const ag::Var<T>& x) const {
        return ag::group_norm(x, b(name + ".g"), b(name + ".b"), cfg_.gn_groups(x.dim(0)));
    }

    ag::Var<T> time_embedding(Binder<T>& b, double t, const Conditioning& c) const {
        const int td = cfg_.time_dim;
        auto sin = timestep_embedding(t, td);
        auto e = ag::Var<T>::constant({1, td}, std::vector<T>(sin.begin(), sin.end()));
        e = ag::silu(ag::linear(e, b("temb.fc0.w"), b("temb.fc0.b")));
        e = ag::linear(e, b("temb.fc1.w"), b("temb.fc1.b"));
        if (!c.null_texts && !c.global_text.empty()) {
            auto txt = encode_texts(b, {InstanceText::make(c.global_text, cfg_.guidance.max_tokens)}, *enc_);
            e = ag::add(e, ag::linear(txt, b("temb.text.w"), b("temb.text.b")));
        }
        return ag::silu(e);
    }

    ag::Var<T> res_block(Binder<T>& b, const std::string& name, const ag::Var<T>& x, const ag::Var<T>& temb) const {
        const int cout = b(name + ".conv0.w").dim(0);
        auto h = ag::conv2d(ag::silu(norm(b, name + ".gn0", x)), b(name + ".conv0.w"), b(name + ".conv0.b"));
        h = ag::add_channel(h, ag::linear(temb, b(name + ".temb.w"), b(name + ".temb.b")));
        h = ag::conv2d(ag::silu(norm(b, name + ".gn1", h)), b(name + ".conv1.w"), b(name + ".conv1.b"));
        auto skip = x.dim(0) == cout ? x : ag::conv2d(x, b(name + ".skip.w"), b(name + ".skip.b"), {1, 0});
        return ag::add(skip, h);
    }

    ag::Var<T> attn_block(Binder<T>& b, const std::string& name, int level, ag::Var<T> h,
                          const ConditionFeatures& cond, const InstanceInputs<T>& inst, const MaskSet& masks,
                          bool masks_on, const ForwardOptions& opt, LayerTaps<T>* taps) const {
        const int r = cfg_.level_size(level);
        auto guide = [&] {
            if (!opt.guidance_enabled) return;
            auto gcfg = cfg_.guidance;
            gcfg.masks_enabled = masks_on;
            auto d = guidance_delta(b, name + ".guide", norm(b, name + ".gn_g", h), inst, gcfg);
            if (taps) (*taps)[name + ".guide"] = d.to_vector();
            h = ag::add(h, d);
        };
        auto cross = [&] {
            AttentionMask m = masks_on && !masks.empty()
                                  ? build_pixel_attention_mask(resize_mask_set(masks, r, r), r, r, cfg_.policy)
                                  : (masks_on ? build_pixel_attention_mask(MaskSet(r, r), r, r, cfg_.policy)
                                              : AttentionMask::ones(r * r, r * r));
            auto d = masked_cross_attention(norm(b, name + ".gn_x", h), cond.f_y[level], m,
                                            bind_projection(b, name + ".xattn", cfg_.heads), cfg_.mode);
            if (taps) (*taps)[name + ".xattn"] = d.to_vector();
            h = ag::add(h, d);
        };
        if (cfg_.guidance_first) {
            guide();
            cross();
        } else {
            cross();
            guide();
        }
        return h;
    }
};

} // namespace mtcolor
