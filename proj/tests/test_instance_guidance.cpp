#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "gradcheck.hpp"
#include "mask_oracle.hpp"
#include "mtcolor/instance_guidance.hpp"

using namespace mtcolor;
using mtcolor::testing::finite_difference;
using mtcolor::testing::max_relative_error;

namespace {

GuidanceConfig small_config() {
    GuidanceConfig cfg;
    cfg.mask_resolution = 8;
    cfg.mask_channels = {2, 3, 4};
    cfg.hidden = 6;
    return cfg;
}

// Two horizontal bands plus an uncovered bottom strip, on an h x w grid.
MaskSet band_masks(int h, int w) {
    MaskSet s(w, h);
    InstanceMask a(w, h), b(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (y < h / 3) a.set(y * w + x, true);
            else if (y < 2 * h / 3) b.set(y * w + x, true);
        }
    s.push_back(a);
    s.push_back(b);
    return s;
}

std::vector<double> randn(std::size_t n, std::mt19937& rng) {
    std::normal_distribution<double> nd;
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

// Makes the zero-initialized output projection non-trivial so the branch
// actually does something.
void randomize_output(ParamStore<double>& store, const std::string& prefix, std::mt19937& rng) {
    for (auto& x : store.at(prefix + ".attn.w_o").value) x = std::normal_distribution<double>(0, 0.5)(rng);
}

} // namespace

TEST(InstanceText, Normalization) {
    auto t = InstanceText::make("  A Red, CIRCLE!  ");
    EXPECT_EQ(t.normalized(), "a red circle");
    EXPECT_EQ(t.tokens.size(), 3u);
    EXPECT_TRUE(InstanceText::make("   ").empty());
    auto long_text = InstanceText::make("one two three four five", 3);
    EXPECT_EQ(long_text.normalized(), "one two three");
    EXPECT_EQ(text_hash(InstanceText::make("Red circle")), text_hash(InstanceText::make("red  circle.")));
}

TEST(ToyTextEncoder, DeterministicBagOfWords) {
    ToyTextEncoder enc;
    EXPECT_EQ(enc.dim(), 64);
    auto f = enc.features(InstanceText::make("red circle"));
    ASSERT_EQ(static_cast<int>(f.size()), enc.feature_dim());
    EXPECT_EQ(f[enc.vocab_index("red")], 1.0);
    EXPECT_EQ(f[enc.vocab_index("circle")], 1.0);
    EXPECT_EQ(f, enc.features(InstanceText::make("Red Circle")));
    EXPECT_NE(f, enc.features(InstanceText::make("blue circle")));
    for (double x : enc.features(InstanceText::make(""))) EXPECT_EQ(x, 0.0);
}

TEST(ExternalTextEncoder, SidecarLookup) {
    auto path = std::filesystem::temp_directory_path() / "mtcolor_sidecar_test.json";
    {
        std::ofstream out(path);
        out << R"({"dim": 3, "embeddings": {")" << text_hash(InstanceText::make("red car"))
            << R"(": [1, 2, 3]}})";
    }
    auto enc = make_text_encoder("external", path.string());
    EXPECT_EQ(enc->dim(), 3);
    EXPECT_FALSE(enc->trainable());
    EXPECT_EQ(enc->features(InstanceText::make("Red car")), (std::vector<double>{1, 2, 3}));
    EXPECT_EQ(enc->features(InstanceText::make("")), (std::vector<double>{0, 0, 0}));
    EXPECT_THROW(enc->features(InstanceText::make("blue car")), InvalidInput);
    EXPECT_THROW(make_text_encoder("nope"), InvalidArgument);
    std::filesystem::remove(path);
}

TEST(InstanceGuidance, EncodedShapes) {
    std::mt19937 rng(1);
    ToyTextEncoder enc;
    GuidanceConfig cfg;
    ParamStore<double> store;
    add_guidance_params(store, "lvl", 16, enc, cfg, rng);
    Binder<double> b(store);
    auto masks = band_masks(12, 12);
    auto inst = encode_instances(b, masks, {"red circle", "blue square"}, enc, cfg);
    EXPECT_EQ(inst.text_emb.shape(), (Shape{2, 64}));
    EXPECT_EQ(inst.mask_emb.shape(), (Shape{2, 32}));
    auto gamma = fuse_instance_features(b, "lvl", inst.text_emb, inst.mask_emb);
    EXPECT_EQ(gamma.shape(), (Shape{2, 16}));
    EXPECT_THROW(encode_instances(b, masks, {"only one"}, enc, cfg), DimensionMismatch);

    auto none = encode_instances(b, MaskSet(12, 12), {}, enc, cfg);
    EXPECT_EQ(none.count(), 0);
    auto lat = ag::Var<double>::constant({16, 4, 4}, randn(256, rng));
    EXPECT_EQ(guidance_delta(b, "lvl", lat, none, cfg).shape(), (Shape{16, 4, 4}));
}

TEST(InstanceGuidance, ZeroInitializedBranchIsIdentity) {
    std::mt19937 rng(2);
    ToyTextEncoder enc;
    GuidanceConfig cfg;
    ParamStore<double> store;
    add_guidance_params(store, "lvl", 8, enc, cfg, rng);
    Binder<double> b(store);
    auto lat_v = randn(8 * 6 * 6, rng);
    auto lat = ag::Var<double>::constant({8, 6, 6}, lat_v);
    auto out = guidance_block(b, "lvl", lat, band_masks(6, 6), {"red circle", "green square"}, enc, cfg);
    for (std::size_t i = 0; i < lat_v.size(); ++i) EXPECT_EQ(out.value()[i], lat_v[i]);
}

TEST(InstanceGuidance, TextOfOneInstanceStaysInsideItsMask) {
    std::mt19937 rng(3);
    ToyTextEncoder enc;
    GuidanceConfig cfg;
    ParamStore<double> store;
    add_guidance_params(store, "lvl", 8, enc, cfg, rng);
    randomize_output(store, "lvl", rng);
    auto masks = band_masks(6, 6);
    auto lat = ag::Var<double>::constant({8, 6, 6}, randn(8 * 36, rng));
    auto run = [&](const std::vector<std::string>& texts, bool masked) {
        auto c = cfg;
        c.masks_enabled = masked;
        Binder<double> b(store);
        return guidance_block(b, "lvl", lat, masks, texts, enc, c).to_vector();
    };
    auto a = run({"red circle", "blue square"}, true);
    auto z = run({"red circle", "yellow square"}, true);
    bool inside_changed = false;
    for (int i = 0; i < 36; ++i)
        for (int ch = 0; ch < 8; ++ch) {
            if (masks[1][i])
                inside_changed = inside_changed || a[ch * 36 + i] != z[ch * 36 + i];
            else
                ASSERT_EQ(a[ch * 36 + i], z[ch * 36 + i]) << "pixel " << i;
        }
    EXPECT_TRUE(inside_changed);

    // With masks disabled the same edit reaches the other instance.
    auto a2 = run({"red circle", "blue square"}, false);
    auto z2 = run({"red circle", "yellow square"}, false);
    bool outside_changed = false;
    for (int i = 0; i < 36; ++i)
        if (masks[0][i])
            for (int ch = 0; ch < 8; ++ch) outside_changed = outside_changed || a2[ch * 36 + i] != z2[ch * 36 + i];
    EXPECT_TRUE(outside_changed);
}

TEST(InstanceGuidance, AttentionMaskMatchesOracle) {
    std::mt19937 rng(4);
    GuidanceConfig cfg;
    for (int trial = 0; trial < 10; ++trial) {
        auto s = mtcolor::testing::random_mask_set(5, 4, 3, rng);
        auto m = guidance_attention_mask(s, 4, 5, cfg);
        auto self = mtcolor::testing::oracle_self_mask(s, cfg.policy);
        auto cross = mtcolor::testing::oracle_cross_mask(s);
        ASSERT_EQ(m.rows(), 23);
        for (int i = 0; i < 23; ++i)
            for (int j = 0; j < 23; ++j) {
                bool expect;
                if (i < 20 && j < 20) expect = self(i, j);
                else if (i < 20) expect = cross(i, j - 20);
                else if (j < 20) expect = cross(j, i - 20);
                else expect = i == j;
                ASSERT_EQ(m(i, j), expect) << i << "," << j;
            }
    }
    cfg.masks_enabled = false;
    auto ones = guidance_attention_mask(band_masks(4, 4), 4, 4, cfg);
    for (int i = 0; i < 18; ++i)
        for (int j = 0; j < 18; ++j) EXPECT_TRUE(ones(i, j));
}

// Gradient of the full branch (mask encoder, fusion, attention and, for the
// toy encoder, the text table) against finite differences over a parameter
// subset.
TEST(InstanceGuidance, GradientsMatchFiniteDifferences) {
    std::mt19937 rng(5);
    ToyTextEncoder enc;
    auto cfg = small_config();
    ParamStore<double> store;
    add_guidance_params(store, "lvl", 4, enc, cfg, rng);
    randomize_output(store, "lvl", rng);
    auto masks = band_masks(4, 4);
    const std::vector<std::string> texts{"red circle", "blue square"};
    auto lat = randn(4 * 16, rng);
    auto probe = randn(4 * 16, rng);

    Binder<double> b(store, {ParamGroup::guidance});
    auto out = guidance_block(b, "lvl", ag::Var<double>::constant({4, 4, 4}, lat), masks, texts, enc, cfg);
    ag::backward(ag::weighted_sum(out, std::span<const double>(probe)));

    std::uniform_real_distribution<double> u;
    std::size_t checked = 0;
    for (auto& [idx, var] : b.bound()) {
        auto& p = store[idx];
        auto g = var.grad();
        // sample at most 12 entries per tensor; the text table is mostly rows
        // that these texts never touch, so pick the used rows there
        std::vector<std::size_t> picks;
        if (p.name == kTextTable) {
            for (const char* word : {"red", "circle", "blue", "square"})
                for (int col = 0; col < 3; ++col) picks.push_back(enc.feature_index(word) * enc.dim() + col);
        } else {
            for (int k = 0; k < 12; ++k) picks.push_back(static_cast<std::size_t>(u(rng) * p.value.size()));
        }
        std::sort(picks.begin(), picks.end());
        picks.erase(std::unique(picks.begin(), picks.end()), picks.end());
        std::vector<double> analytic, x0;
        for (auto i : picks) {
            analytic.push_back(g.empty() ? 0.0 : g[i]);
            x0.push_back(p.value[i]);
        }
        auto f = [&](const std::vector<double>& x) {
            auto saved = p.value;
            for (std::size_t k = 0; k < picks.size(); ++k) p.value[picks[k]] = x[k];
            Binder<double> fb(store);
            auto o = guidance_block(fb, "lvl", ag::Var<double>::constant({4, 4, 4}, lat), masks, texts, enc, cfg);
            double acc = 0;
            for (std::size_t i = 0; i < probe.size(); ++i) acc += o.value()[i] * probe[i];
            p.value = saved;
            return acc;
        };
        EXPECT_LE(max_relative_error(analytic, finite_difference(f, x0), 1e-4), 1e-4) << p.name;
        ++checked;
    }
    EXPECT_GT(checked, 10u);
}
