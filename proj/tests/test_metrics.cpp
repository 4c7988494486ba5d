#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "model_fixture.hpp"
#include "mtcolor/experiment.hpp"
#include "mtcolor/metrics.hpp"

using namespace mtcolor;
using namespace mtcolor::testing;

namespace {

RgbImage random_rgb(std::mt19937_64& rng, int w, int h) {
    RgbImage img(w, h);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng() % 256);
    return img;
}

// Two-pass reference statistics.
double colorfulness_oracle(const RgbImage& img) {
    std::vector<double> rg, yb;
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        const auto* p = img.data.data() + 3 * i;
        rg.push_back(double(p[0]) - p[1]);
        yb.push_back((double(p[0]) + p[1]) / 2 - p[2]);
    }
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    auto var = [&](const std::vector<double>& v) {
        const double m = mean(v);
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return s / v.size();
    };
    return std::sqrt(var(rg) + var(yb)) + 0.3 * std::hypot(mean(rg), mean(yb));
}

double ssim_oracle(const RgbImage& a, const RgbImage& b) {
    auto luma = [](const RgbImage& im, int x, int y) {
        const auto* p = im.at(x, y);
        return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    };
    const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
    double total = 0;
    int n = 0;
    for (int y0 = 0; y0 + 8 <= a.height; ++y0)
        for (int x0 = 0; x0 + 8 <= a.width; ++x0) {
            double ma = 0, mb = 0;
            for (int y = y0; y < y0 + 8; ++y)
                for (int x = x0; x < x0 + 8; ++x) {
                    ma += luma(a, x, y) / 64;
                    mb += luma(b, x, y) / 64;
                }
            double va = 0, vb = 0, cov = 0;
            for (int y = y0; y < y0 + 8; ++y)
                for (int x = x0; x < x0 + 8; ++x) {
                    const double u = luma(a, x, y) - ma, v = luma(b, x, y) - mb;
                    va += u * u / 64;
                    vb += v * v / 64;
                    cov += u * v / 64;
                }
            total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++n;
        }
    return total / n;
}

void fill_mask(RgbImage& img, const InstanceMask& m, const std::array<std::uint8_t, 3>& rgb) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (m.at(x, y))
                for (int c = 0; c < 3; ++c) img.at(x, y)[c] = rgb[c];
}

SynthConfig synth(int count, std::uint64_t seed) {
    SynthConfig c;
    c.count = count;
    c.seed = seed;
    return c;
}

} // namespace

TEST(Colorfulness, GrayImagesScoreZero) {
    for (int g : {0, 77, 255}) EXPECT_EQ(colorfulness(RgbImage(9, 7, static_cast<std::uint8_t>(g))), 0.0);
    RgbImage ramp(16, 1);
    for (int x = 0; x < 16; ++x) std::fill_n(ramp.at(x, 0), 3, static_cast<std::uint8_t>(x * 16));
    EXPECT_EQ(colorfulness(ramp), 0.0);
}

TEST(Colorfulness, HalfRedHalfGreen) {
    RgbImage img(10, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 10; ++x) img.at(x, y)[x < 5 ? 0 : 1] = 255;
    EXPECT_NEAR(colorfulness(img), 293.25, 0.01);
}

TEST(Colorfulness, ConstantColorAndOracle) {
    RgbImage c(5, 5, 0);
    for (std::size_t i = 0; i < c.pixels(); ++i) c.data[3 * i] = 200, c.data[3 * i + 1] = 50, c.data[3 * i + 2] = 10;
    EXPECT_NEAR(colorfulness(c), 0.3 * std::hypot(150.0, 115.0), 1e-9);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        auto img = random_rgb(rng, 1 + t, 3 + t % 5);
        EXPECT_NEAR(colorfulness(img), colorfulness_oracle(img), 1e-9);
        // Pixel order does not matter.
        auto shuffled = img;
        std::vector<std::size_t> perm(img.pixels());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t i = 0; i < perm.size(); ++i) std::copy_n(img.data.data() + 3 * perm[i], 3, shuffled.data.data() + 3 * i);
        EXPECT_NEAR(colorfulness(shuffled), colorfulness(img), 1e-9);
    }
}

TEST(Psnr, CapOffsetAndSymmetry) {
    std::mt19937_64 rng(2);
    auto a = random_rgb(rng, 12, 9);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(std::min<int>(v, 254));
    EXPECT_EQ(psnr(a, a), 100.0);
    auto b = a;
    for (auto& v : b.data) ++v;
    EXPECT_NEAR(psnr(a, b), 48.13, 0.01);
    EXPECT_DOUBLE_EQ(psnr(a, b), 20 * std::log10(255.0));
    auto c = random_rgb(rng, 12, 9);
    EXPECT_EQ(psnr(a, c), psnr(c, a));
    EXPECT_THROW(psnr(a, RgbImage(9, 12)), DimensionMismatch);
}

TEST(Ssim, IdentityInversionAndOracle) {
    std::mt19937_64 rng(3);
    auto a = random_rgb(rng, 16, 12);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
    for (int t = 0; t < 5; ++t) {
        auto b = random_rgb(rng, 16, 12);
        EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-9);
        EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
    }
    RgbImage bin(16, 16), inv(16, 16);
    for (std::size_t i = 0; i < bin.pixels(); ++i) {
        const std::uint8_t v = (rng() & 1) ? 255 : 0;
        std::fill_n(bin.data.data() + 3 * i, 3, v);
        std::fill_n(inv.data.data() + 3 * i, 3, static_cast<std::uint8_t>(255 - v));
    }
    EXPECT_LT(ssim(bin, inv), 0.0);
    EXPECT_THROW(ssim(a, bin), DimensionMismatch);
    // Smaller than one window: a single window over the whole image.
    auto tiny = random_rgb(rng, 5, 3);
    EXPECT_NEAR(ssim(tiny, tiny), 1.0, 1e-12);
}

TEST(Fidelity, GroundTruthScoresOne) {
    auto data = generate_synthetic(synth(100, 4));
    for (const auto& s : data) EXPECT_EQ(instance_color_fidelity(s.image, s.ann), 1.0) << s.ann.image_id;
}

TEST(Fidelity, RandomPaletteFillsScoreOneEighth) {
    std::mt19937_64 rng(5);
    double hits = 0;
    int scored = 0;
    for (const auto& s : generate_synthetic(synth(800, 6))) {
        auto img = s.image;
        for (const auto& i : s.ann.instances) fill_mask(img, i.mask, kPalette[rng() % 8].rgb);
        const auto f = instance_color_fidelity(img, s.ann);
        ASSERT_TRUE(f);
        hits += *f * s.ann.instances.size();
        scored += static_cast<int>(s.ann.instances.size());
    }
    ASSERT_GT(scored, 1000);
    EXPECT_NEAR(hits / scored, 1.0 / 8, 0.05);
}

TEST(Fidelity, UndefinedWithoutColorWordsAndOrderInvariant) {
    auto s = generate_sample(synth(1, 7), 2);
    auto ann = s.ann;
    for (auto& i : ann.instances) i.text = "a thing";
    EXPECT_FALSE(instance_color_fidelity(s.image, ann).has_value());
    ann.instances.clear();
    EXPECT_FALSE(instance_color_fidelity(s.image, ann).has_value());

    // One wrong color out of the set, then relabel the instance order.
    auto img = s.image;
    ASSERT_GE(s.ann.instances.size(), 2u) << "fixture needs two instances";
    const int k = *text_color(s.ann.instances[0].text);
    fill_mask(img, s.ann.instances[0].mask, kPalette[(k + 1) % 8].rgb);
    const double f = *instance_color_fidelity(img, s.ann);
    EXPECT_DOUBLE_EQ(f, 1.0 - 1.0 / s.ann.instances.size());
    auto rev = s.ann;
    std::reverse(rev.instances.begin(), rev.instances.end());
    EXPECT_EQ(*instance_color_fidelity(img, rev), f);
}

TEST(Summary, IgnoresUndefinedValues) {
    auto s = summarize({1.0, std::nan(""), 0.0, 0.5});
    EXPECT_EQ(s.defined, 3);
    EXPECT_DOUBLE_EQ(s.mean, 0.5);
    EXPECT_NEAR(s.stddev, std::sqrt(1.0 / 6), 1e-12);
    EXPECT_TRUE(to_json(s)["values"][1].is_null());
    EXPECT_EQ(summarize({}).defined, 0);
}

TEST(Leakage, ColorWordSwap) {
    EXPECT_EQ(swap_color_word("a red circle"), "a " + std::string(kPalette[swapped_color(0)].name) + " circle");
    EXPECT_EQ(swap_color_word("Bright RED, redder"), "Bright " + std::string(kPalette[swapped_color(0)].name) + ", redder");
    for (int k = 0; k < 8; ++k) EXPECT_NE(swapped_color(k), k);
    EXPECT_THROW(swap_color_word("a thing"), InvalidInput);
}

TEST(Leakage, UntrainedModelShowsNoDifference) {
    Denoiser<float> model(tiny_config(), 4);
    const auto sched = make_schedule(50, 1e-3, 0.05);
    auto c = two_square_conditioning(8);
    ColorizeRequest r;
    r.gray = c.gray;
    r.global_text = c.global_text;
    r.masks = c.masks;
    r.texts = c.texts;
    r.sampler.ddim_steps = 10;
    auto rep = leakage_probe(model, sched, r, 0);
    EXPECT_EQ(rep.inside, 0.0);
    EXPECT_EQ(rep.outside, 0.0);
    EXPECT_TRUE(std::isnan(rep.ratio));
    EXPECT_TRUE(rep.to_json()["ratio"].is_null());
    EXPECT_THROW(leakage_probe(model, sched, r, 2), InvalidArgument);

    // Once the network is live the swap changes the target region.
    perturb_all(model.params(), 8);
    auto live = leakage_probe(model, sched, r, 0);
    EXPECT_GT(live.inside, 0.0);
    EXPECT_TRUE(std::isfinite(live.ratio));
}
