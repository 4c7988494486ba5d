#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "model_fixture.hpp"
#include "mtcolor/checkpoint.hpp"
#include "mtcolor/denoiser.hpp"

using namespace mtcolor;
using namespace mtcolor::testing;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

template <typename T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

} // namespace

TEST(TimestepEmbedding, ZeroStepAndShape) {
    auto e = timestep_embedding(0, 16);
    ASSERT_EQ(e.size(), 16u);
    for (int k = 0; k < 8; ++k) {
        EXPECT_EQ(e[k], 0.0);
        EXPECT_EQ(e[8 + k], 1.0);
    }
    EXPECT_THROW(timestep_embedding(-1, 16), InvalidArgument);
    EXPECT_THROW(timestep_embedding(1, 7), InvalidArgument);
}

TEST(TimestepEmbedding, DistinctStepsGiveDistinctVectors) {
    std::vector<std::vector<double>> all;
    for (int t = 0; t < 1000; ++t) all.push_back(timestep_embedding(t, 128));
    double closest = 1e300;
    for (int i = 0; i < 1000; ++i)
        for (int j = i + 1; j < 1000; ++j) {
            double d = 0;
            for (int k = 0; k < 128; ++k) d += (all[i][k] - all[j][k]) * (all[i][k] - all[j][k]);
            closest = std::min(closest, d);
        }
    EXPECT_GT(closest, 1e-6);
}

TEST(ConditionEncoder, FreshInitIsZero) {
    Denoiser<double> m(tiny_config(), 3);
    Binder<double> b(m.params());
    std::vector<float> gray(64);
    for (int i = 0; i < 64; ++i) gray[i] = (i % 7) / 7.0f;
    auto f = m.encode_condition(b, gray);
    for (double v : f.inject.to_vector()) EXPECT_EQ(v, 0.0);
    for (int l : {1, 2})
        for (double v : f.f_y[l].to_vector()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(f.inject.shape(), (Shape{4, 8, 8}));
    EXPECT_EQ(f.f_y[1].shape(), (Shape{8, 4, 4}));
    EXPECT_EQ(f.f_y[2].shape(), (Shape{16, 2, 2}));
}

TEST(ConditionEncoder, ConstantGrayGivesSpatiallyConstantFeatures) {
    Denoiser<double> m(tiny_config(16, 4), 3);
    perturb_all(m.params(), 11);
    Binder<double> b(m.params());
    auto f = m.encode_condition(b, std::vector<float>(256, 0.37f));
    auto check = [](const ag::Var<double>& v) {
        const int c = v.dim(0), plane = v.dim(1) * v.dim(2);
        auto x = v.to_vector();
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < plane; ++p) EXPECT_NEAR(x[ch * plane + p], x[ch * plane], 1e-6);
    };
    check(f.inject);
    check(f.f_y[1]);
    check(f.f_y[2]);
}

TEST(ConditionEncoder, RejectsOutOfRangeGray) {
    Denoiser<float> m(tiny_config(), 3);
    Binder<float> b(m.params());
    std::vector<float> gray(64, 0.5f);
    gray[5] = 1.5f;
    EXPECT_THROW(m.encode_condition(b, gray), InvalidInput);
    gray[5] = std::nanf("");
    EXPECT_THROW(m.encode_condition(b, gray), InvalidInput);
}

// With every zero-initialized fusion layer still at zero, conditions cannot
// reach the output, so the conditioned and null-conditioned predictions are
// bit-identical even for a non-trivial backbone.
TEST(Denoiser, ZeroInitFusionMakesOutputIndependentOfConditions) {
    Denoiser<double> m(tiny_config(), 5);
    auto& st = m.params();
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd(0, 0.3);
    // Perturb backbone-only parameters (the zero-init output conv included).
    for (auto& p : st.all()) {
        const bool fusion = p.name.rfind("cond.head", 0) == 0 || p.name.rfind("temb.text", 0) == 0 ||
                            p.name.find(".guide.attn.w_o") != std::string::npos ||
                            p.name.find(".guide.attn.b_o") != std::string::npos;
        if (fusion || p.group != ParamGroup::backbone) continue;
        for (auto& v : p.value) v += nd(rng);
    }
    auto c = two_square_conditioning(8);
    auto z = noise(3 * 64, 1);
    auto full = m.predict(z, 37, c);
    auto null = m.predict(z, 37, null_conditioning(c));
    EXPECT_TRUE(bit_equal(full, null));
    double mag = 0;
    for (double v : full) mag += std::abs(v);
    EXPECT_GT(mag, 0.0);
}

TEST(Denoiser, NullPathIsFiniteAndShapePreserving) {
    Denoiser<float> m(tiny_config(), 5);
    perturb_all(m.params(), 2);
    Conditioning c;
    c.gray.assign(64, 0.5f);
    c = null_conditioning(c);
    std::vector<float> z(3 * 64, 0.25f);
    auto out = m.predict(z, 10, c);
    ASSERT_EQ(out.size(), z.size());
    for (float v : out) EXPECT_TRUE(std::isfinite(v));
}

TEST(Denoiser, ShapeErrors) {
    Denoiser<float> m(tiny_config(), 5);
    auto c = two_square_conditioning(8);
    EXPECT_THROW(m.predict(std::vector<float>(3 * 63), 1, c), DimensionMismatch);
    auto bad = c;
    bad.texts.pop_back();
    EXPECT_THROW(m.predict(std::vector<float>(3 * 64), 1, bad), DimensionMismatch);
    auto wrong = two_square_conditioning(16);
    EXPECT_THROW(m.predict(std::vector<float>(3 * 64), 1, wrong), DimensionMismatch);
}

// Gray changes confined to instance B do not alter the first pixel-attention
// layer's contribution at instance A. Full-resolution injection is kept at
// zero so the query/key path carries no gray information; only the value
// path (masked) does. B is placed beyond the condition encoder's receptive
// field of A's keys.
TEST(Denoiser, PixelAttentionTapIsLocalToInstances) {
    auto cfg = tiny_config(32, 4);
    Denoiser<double> m(cfg, 8);
    perturb_all(m.params(), 21, 0.3, "cond.head0");
    const int s = 32;
    Conditioning c;
    c.gray.assign(s * s, 0.5f);
    c.masks = MaskSet(s, s);
    InstanceMask a(s, s), b(s, s);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) a.set(x, y, true);
    for (int y = 20; y < 32; ++y)
        for (int x = 20; x < 32; ++x) b.set(x, y, true);
    c.masks.push_back(a);
    c.masks.push_back(b);
    c.texts = {"a red square", "a blue square"};
    auto perturbed = c;
    std::mt19937 rng(4);
    std::uniform_real_distribution<float> u(0, 1);
    for (int i = 0; i < s * s; ++i)
        if (b[i]) perturbed.gray[i] = u(rng);

    auto z = noise(3 * s * s, 3);
    auto run = [&](const Conditioning& cc, ForwardOptions opt) {
        LayerTaps<double> taps;
        m.predict(z, 50, cc, opt, &taps);
        return taps.at("d1.xattn");
    };
    const auto a16 = resize_mask(a, 16, 16), b16 = resize_mask(b, 16, 16);
    const int ch = cfg.level_channels(1);
    auto compare = [&](const std::vector<double>& x, const std::vector<double>& y, const InstanceMask& region) {
        bool equal = true;
        for (int k = 0; k < ch; ++k)
            for (int p = 0; p < 256; ++p)
                if (region[p] && std::memcmp(&x[k * 256 + p], &y[k * 256 + p], sizeof(double)) != 0) equal = false;
        return equal;
    };
    auto base = run(c, {});
    auto pert = run(perturbed, {});
    EXPECT_TRUE(compare(base, pert, a16));
    EXPECT_FALSE(compare(base, pert, b16));

    // Without masks the same perturbation reaches instance A.
    ForwardOptions off;
    off.masks_enabled = false;
    EXPECT_FALSE(compare(run(c, off), run(perturbed, off), a16));
}

TEST(Denoiser, FullNetworkGradientMatchesFiniteDifferences) {
    Denoiser<double> m(tiny_config(8, 4), 12);
    perturb_all(m.params(), 13, 0.3);
    auto c = two_square_conditioning(8);
    auto z = noise(3 * 64, 14);
    auto target = noise(3 * 64, 15);
    const double t = 23;

    Binder<double> b(m.params(), {ParamGroup::backbone, ParamGroup::guidance, ParamGroup::condition});
    auto pred = m.forward(b, ag::Var<double>::constant({3, 8, 8}, z), t, c);
    auto loss = ag::mse(pred, std::span<const double>(target));
    ag::backward(loss);

    auto eval = [&] {
        auto p = m.predict(z, t, c);
        double s = 0;
        for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - target[i]) * (p[i] - target[i]);
        return s / p.size();
    };

    std::mt19937_64 rng(16);
    std::vector<double> analytic, numeric;
    auto& st = m.params();
    int tensors = 0;
    for (std::size_t k = 0; k < st.size(); ++k) {
        auto it = b.bound().find(k);
        if (it == b.bound().end()) continue;
        const auto g = it->second.grad();
        auto& vals = st[k].value;
        std::uniform_int_distribution<std::size_t> pick(0, vals.size() - 1);
        for (int r = 0; r < 2; ++r) {
            const std::size_t j = pick(rng);
            const double keep = vals[j];
            auto f = [&](const std::vector<double>& x) {
                vals[j] = x[0];
                const double v = eval();
                vals[j] = keep;
                return v;
            };
            analytic.push_back(g[j]);
            numeric.push_back(finite_difference(f, {keep})[0]);
        }
        ++tensors;
    }
    EXPECT_GT(tensors, 100);
    EXPECT_LE(max_relative_error(analytic, numeric), 1e-3);
}

TEST(DropConditions, ProbabilityEdgesAndMonteCarlo) {
    auto c = two_square_conditioning(8);
    std::mt19937_64 rng(1);
    auto same = drop_conditions(c, 0.0, rng);
    EXPECT_EQ(same.masks, c.masks);
    EXPECT_EQ(same.texts, c.texts);
    EXPECT_FALSE(same.null_masks);
    auto gone = drop_conditions(c, 1.0, rng);
    EXPECT_TRUE(gone.null_masks);
    EXPECT_TRUE(gone.null_texts);
    EXPECT_EQ(gone.gray, c.gray);
    EXPECT_TRUE(gone.masks.empty());

    int dropped = 0;
    for (int i = 0; i < 10000; ++i) dropped += drop_conditions(c, 0.5, rng).null_masks;
    EXPECT_NEAR(dropped / 10000.0, 0.5, 0.02);
    EXPECT_THROW(drop_conditions(c, 1.5, rng), InvalidArgument);
}

TEST(Denoiser, ReloadValidatesParameterShapes) {
    auto cfg = tiny_config();
    Denoiser<float> m(cfg, 1);
    Denoiser<float> copy(cfg, m.params());
    std::vector<float> z(3 * 64, 0.1f);
    auto c = two_square_conditioning(8);
    EXPECT_EQ(m.predict(z, 5, c), copy.predict(z, 5, c));

    auto bigger = cfg;
    bigger.base_channels = 8;
    EXPECT_THROW(Denoiser<float>(bigger, m.params()), CheckpointError);
}
