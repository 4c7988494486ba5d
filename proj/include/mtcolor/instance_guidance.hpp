#pragma once

// Instance mask-and-text guidance: instance masks and texts are encoded into
// one token per instance, appended to the latent tokens, and mixed by masked
// self-attention so each pixel only exchanges information with pixels of
// its own instance and with that instance's token.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "mtcolor/attention.hpp"
#include "mtcolor/mask_algebra.hpp"
#include "mtcolor/params.hpp"
#include "mtcolor/text_encoder.hpp"

namespace mtcolor {

struct GuidanceConfig {
    int mask_resolution = 32;                    // masks are resized to this before encoding
    std::array<int, 3> mask_channels{8, 16, 32}; // stride-2 conv widths; the last is d_mask
    int hidden = 128;                            // fusion MLP width
    int max_tokens = kDefaultMaxTokens;
    int heads = 1;
    MaskMode mode = MaskMode::pre_softmax_renorm;
    MaskPolicy policy{};
    bool masks_enabled = true; // false forces every attention mask to all-ones

    int d_mask() const { return mask_channels[2]; }
};

inline const std::string kTextTable = "guide.text.table";

// ---------------------------------------------------------------- parameter registration

template <typename T, typename Rng>
void add_text_encoder_params(ParamStore<T>& store, const TextEncoder& enc, Rng& rng) {
    if (!enc.trainable() || store.contains(kTextTable)) return;
    const int f = enc.feature_dim(), d = enc.dim();
    store.add(kTextTable, ParamGroup::guidance, {f, d}, init::normal<T>(static_cast<std::size_t>(f) * d, 0.5, rng));
}

template <typename T, typename Rng>
void add_mask_encoder_params(ParamStore<T>& store, const GuidanceConfig& cfg, Rng& rng) {
    int cin = 1;
    for (int l = 0; l < 3; ++l) {
        const int cout = cfg.mask_channels[l];
        const std::string p = "guide.mask.conv" + std::to_string(l);
        store.add(p + ".w", ParamGroup::guidance, {cout, cin, 3, 3},
                  init::fan_in<T>(static_cast<std::size_t>(cout) * cin * 9, cin * 9, rng, 1.4));
        store.add(p + ".b", ParamGroup::guidance, {cout}, init::constant<T>(cout, T(0)));
        cin = cout;
    }
}

template <typename T, typename Rng>
void add_fusion_params(ParamStore<T>& store, const std::string& prefix, int d_text, int d_mask, int hidden, int c,
                       Rng& rng) {
    const std::array<int, 4> widths{d_text + d_mask, hidden, hidden, c};
    for (int l = 0; l < 3; ++l) {
        const std::string p = prefix + ".fuse.fc" + std::to_string(l);
        store.add(p + ".w", ParamGroup::guidance, {widths[l], widths[l + 1]},
                  init::fan_in<T>(static_cast<std::size_t>(widths[l]) * widths[l + 1], widths[l], rng,
                                  l < 2 ? 1.4 : 1.0));
        store.add(p + ".b", ParamGroup::guidance, {widths[l + 1]}, init::constant<T>(widths[l + 1], T(0)));
    }
}

// q/k/v projections c -> c with fan-in init; output projection zero when
// zero_output is set (the branch starts inert).
template <typename T, typename Rng>
void add_attention_params(ParamStore<T>& store, const std::string& prefix, ParamGroup group, int c, bool zero_output,
                          Rng& rng) {
    const std::size_t cc = static_cast<std::size_t>(c) * c;
    store.add(prefix + ".w_q", group, {c, c}, init::fan_in<T>(cc, c, rng));
    store.add(prefix + ".w_k", group, {c, c}, init::fan_in<T>(cc, c, rng));
    store.add(prefix + ".w_v", group, {c, c}, init::fan_in<T>(cc, c, rng));
    store.add(prefix + ".w_o", group, {c, c}, zero_output ? init::constant<T>(cc, T(0)) : init::fan_in<T>(cc, c, rng));
    store.add(prefix + ".b_o", group, {c}, init::constant<T>(c, T(0)));
}

template <typename T>
ProjectionVars<T> bind_projection(Binder<T>& b, const std::string& prefix, int heads) {
    ProjectionVars<T> p;
    p.w_q = b(prefix + ".w_q");
    p.w_k = b(prefix + ".w_k");
    p.w_v = b(prefix + ".w_v");
    p.w_o = b(prefix + ".w_o");
    if (b.has(prefix + ".b_o")) p.b_o = b(prefix + ".b_o");
    p.heads = heads;
    return p;
}

// ---------------------------------------------------------------- encoders

// n x d_mask. Masks are resized to cfg.mask_resolution and encoded one by one
// by three stride-2 convolutions followed by global average pooling.
template <typename T>
ag::Var<T> encode_masks(Binder<T>& b, const MaskSet& masks, const GuidanceConfig& cfg) {
    const int d_mask = cfg.d_mask();
    if (masks.empty()) return ag::Var<T>::zeros({0, d_mask});
    const int r = cfg.mask_resolution;
    const MaskSet resized = resize_mask_set(masks, r, r);
    ag::Var<T> rows;
    for (const auto& m : resized) {
        std::vector<T> px(m.bits().begin(), m.bits().end());
        auto x = ag::Var<T>::constant({1, r, r}, std::move(px));
        for (int l = 0; l < 3; ++l) {
            const std::string p = "guide.mask.conv" + std::to_string(l);
            x = ag::silu(ag::conv2d(x, b(p + ".w"), b(p + ".b"), {2, 1, ag::PadMode::zero}));
        }
        auto row = ag::reshape(ag::mean_spatial(x), {1, d_mask});
        rows = rows.defined() ? ag::concat0(rows, row) : row;
    }
    return rows;
}

// Raw (pre-table) features for a list of texts, n x feature_dim.
template <typename T>
ag::Var<T> text_features(const std::vector<InstanceText>& texts, const TextEncoder& enc) {
    const int f = enc.feature_dim();
    std::vector<T> data;
    data.reserve(texts.size() * f);
    for (std::size_t k = 0; k < texts.size(); ++k) {
        std::vector<double> v;
        try {
            v = enc.features(texts[k]);
        } catch (const std::exception& e) {
            throw InvalidInput("text encoder '" + enc.name() + "' failed on instance " + std::to_string(k) + ": " +
                               e.what());
        }
        if (static_cast<int>(v.size()) != f)
            throw DimensionMismatch("text encoder returned " + std::to_string(v.size()) + " features for instance " +
                                    std::to_string(k));
        for (double x : v) data.push_back(static_cast<T>(x));
    }
    return ag::Var<T>::constant({static_cast<int>(texts.size()), f}, std::move(data));
}

// n x d_text. Empty text yields the zero vector.
template <typename T>
ag::Var<T> encode_texts(Binder<T>& b, const std::vector<InstanceText>& texts, const TextEncoder& enc) {
    auto feats = text_features<T>(texts, enc);
    if (!enc.trainable()) return feats;
    if (texts.empty()) return ag::Var<T>::zeros({0, enc.dim()});
    return ag::matmul(feats, b(kTextTable));
}

// concat(text, mask) -> FC -> GELU -> FC -> GELU -> FC, giving n x c.
template <typename T>
ag::Var<T> fuse_instance_features(Binder<T>& b, const std::string& prefix, const ag::Var<T>& text_emb,
                                  const ag::Var<T>& mask_emb) {
    if (text_emb.dim(0) != mask_emb.dim(0))
        throw DimensionMismatch("text rows " + std::to_string(text_emb.dim(0)) + " != mask rows " +
                                std::to_string(mask_emb.dim(0)));
    const int n = text_emb.dim(0);
    const std::string p = prefix + ".fuse.fc";
    if (n == 0) return ag::Var<T>::zeros({0, b(p + "2.w").dim(1)});
    auto x = ag::concat_cols(text_emb, mask_emb);
    x = ag::gelu(ag::linear(x, b(p + "0.w"), b(p + "0.b")));
    x = ag::gelu(ag::linear(x, b(p + "1.w"), b(p + "1.b")));
    return ag::linear(x, b(p + "2.w"), b(p + "2.b"));
}

// Encoded instance conditions shared by every guidance level of one forward.
template <typename T>
struct InstanceInputs {
    MaskSet masks;
    ag::Var<T> text_emb; // n x d_text
    ag::Var<T> mask_emb; // n x d_mask
    int count() const { return static_cast<int>(masks.size()); }
};

template <typename T>
InstanceInputs<T> encode_instances(Binder<T>& b, const MaskSet& masks, const std::vector<std::string>& texts,
                                   const TextEncoder& enc, const GuidanceConfig& cfg) {
    if (texts.size() != masks.size())
        throw DimensionMismatch(std::to_string(texts.size()) + " instance texts for " + std::to_string(masks.size()) +
                                " masks");
    std::vector<InstanceText> it;
    it.reserve(texts.size());
    for (const auto& t : texts) it.push_back(InstanceText::make(t, cfg.max_tokens));
    InstanceInputs<T> in;
    in.masks = masks;
    in.text_emb = encode_texts(b, it, enc);
    in.mask_emb = encode_masks(b, masks, cfg);
    return in;
}

// The (hw+n) x (hw+n) mask gating the guidance self-attention at a given
// latent resolution.
inline AttentionMask guidance_attention_mask(const MaskSet& masks, int h, int w, const GuidanceConfig& cfg) {
    const int n = static_cast<int>(masks.size());
    if (!cfg.masks_enabled || n == 0) return AttentionMask::ones(h * w + n, h * w + n);
    const MaskSet m = resize_mask_set(masks, h, w);
    return assemble_self_map_mask(build_self_mask(m, h, w, cfg.policy), build_latent_instance_mask(m, h, w), n);
}

// Masked self-attention output of the guidance branch (no residual).
// `prefix` names this level's fusion and attention parameters.
template <typename T>
ag::Var<T> guidance_delta(Binder<T>& b, const std::string& prefix, const ag::Var<T>& latent,
                          const InstanceInputs<T>& inst, const GuidanceConfig& cfg) {
    const int h = latent.dim(1), w = latent.dim(2);
    ag::Var<T> gamma;
    if (inst.count() > 0) gamma = fuse_instance_features(b, prefix, inst.text_emb, inst.mask_emb);
    const AttentionMask mask = guidance_attention_mask(inst.masks, h, w, cfg);
    return masked_self_attention(latent, gamma, mask, bind_projection(b, prefix + ".attn", cfg.heads), cfg.mode);
}

// latent + guidance branch.
template <typename T>
ag::Var<T> guidance_block(Binder<T>& b, const std::string& prefix, const ag::Var<T>& latent, const MaskSet& masks,
                          const std::vector<std::string>& texts, const TextEncoder& enc, const GuidanceConfig& cfg) {
    auto inst = encode_instances(b, masks, texts, enc, cfg);
    return ag::add(latent, guidance_delta(b, prefix, latent, inst, cfg));
}

// Registers everything a single guidance level needs (shared encoders plus
// the level's fusion and attention weights).
template <typename T, typename Rng>
void add_guidance_params(ParamStore<T>& store, const std::string& prefix, int c, const TextEncoder& enc,
                         const GuidanceConfig& cfg, Rng& rng) {
    add_text_encoder_params(store, enc, rng);
    if (!store.contains("guide.mask.conv0.w")) add_mask_encoder_params(store, cfg, rng);
    add_fusion_params(store, prefix, enc.dim(), cfg.d_mask(), cfg.hidden, c, rng);
    add_attention_params(store, prefix + ".attn", ParamGroup::guidance, c, true, rng);
}

} // namespace mtcolor
