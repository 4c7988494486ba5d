#pragma once

// Image metrics on 8-bit RGB: colorfulness (Hasler-Susstrunk), PSNR, SSIM on
// luma, and palette-based instance color fidelity.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtcolor/dataset.hpp"
#include "mtcolor/image.hpp"
#include "mtcolor/lexicon.hpp"

namespace mtcolor {

inline double colorfulness(const RgbImage& img) {
    const std::size_t n = img.pixels();
    if (n == 0) return 0.0;
    double s_rg = 0, s_yb = 0, q_rg = 0, q_yb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto* p = img.data.data() + i * 3;
        const double rg = double(p[0]) - p[1];
        const double yb = 0.5 * (double(p[0]) + p[1]) - p[2];
        s_rg += rg;
        s_yb += yb;
        q_rg += rg * rg;
        q_yb += yb * yb;
    }
    const double m_rg = s_rg / n, m_yb = s_yb / n;
    const double v_rg = std::max(0.0, q_rg / n - m_rg * m_rg);
    const double v_yb = std::max(0.0, q_yb / n - m_yb * m_yb);
    return std::sqrt(v_rg + v_yb) + 0.3 * std::sqrt(m_rg * m_rg + m_yb * m_yb);
}

inline void check_same_shape(const RgbImage& a, const RgbImage& b) {
    if (a.width != b.width || a.height != b.height)
        throw DimensionMismatch("images are " + std::to_string(a.width) + "x" + std::to_string(a.height) + " and " +
                                std::to_string(b.width) + "x" + std::to_string(b.height));
}

inline constexpr double kPsnrCap = 100.0;

inline double psnr(const RgbImage& a, const RgbImage& b) {
    check_same_shape(a, b);
    double se = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = double(a.data[i]) - b.data[i];
        se += d * d;
    }
    if (se == 0 || a.data.empty()) return kPsnrCap;
    const double mse = se / a.data.size();
    return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

// Mean SSIM over all 8x8 windows (stride 1) of BT.601 luma in [0,255];
// population statistics, k1 = 0.01, k2 = 0.03. Images smaller than the
// window use one window covering the image.
inline double ssim(const RgbImage& a, const RgbImage& b, int window = 8) {
    check_same_shape(a, b);
    auto luma8 = [](const RgbImage& im) {
        std::vector<double> y(im.pixels());
        for (std::size_t i = 0; i < y.size(); ++i) {
            const auto* p = im.data.data() + i * 3;
            y[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
        return y;
    };
    const auto ya = luma8(a), yb = luma8(b);
    const double c1 = (0.01 * 255) * (0.01 * 255), c2 = (0.03 * 255) * (0.03 * 255);
    const int wx = std::min(window, a.width), wy = std::min(window, a.height);
    double total = 0;
    int windows = 0;
    for (int y0 = 0; y0 + wy <= a.height; ++y0)
        for (int x0 = 0; x0 + wx <= a.width; ++x0) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (int y = y0; y < y0 + wy; ++y)
                for (int x = x0; x < x0 + wx; ++x) {
                    const double u = ya[static_cast<std::size_t>(y) * a.width + x];
                    const double v = yb[static_cast<std::size_t>(y) * a.width + x];
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            const double n = double(wx) * wy;
            const double ma = sa / n, mb = sb / n;
            const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++windows;
        }
    return windows ? total / windows : 1.0;
}

// First palette color word in a text, if any.
inline std::optional<int> text_color(const std::string& text) {
    for (const auto& tok : InstanceText::make(text, 1 << 20).tokens)
        if (auto k = palette_index(tok)) return k;
    return std::nullopt;
}

inline std::array<double, 3> region_mean(const RgbImage& img, const InstanceMask& m) {
    std::array<double, 3> s{0, 0, 0};
    int n = 0;
    for (int i = 0; i < m.size(); ++i) {
        if (!m[i]) continue;
        for (int c = 0; c < 3; ++c) s[c] += img.data[static_cast<std::size_t>(i) * 3 + c];
        ++n;
    }
    if (n)
        for (auto& v : s) v /= n;
    return s;
}

// Fraction of color-named instances whose region mean is nearest to the
// named palette color. nullopt when no instance names a color.
inline std::optional<double> instance_color_fidelity(const RgbImage& img, const AnnotatedImage& ann) {
    int scored = 0, hits = 0;
    for (const auto& inst : ann.instances) {
        const auto k = text_color(inst.text);
        if (!k || !inst.mask.any()) continue;
        if (inst.mask.width() != img.width || inst.mask.height() != img.height)
            throw DimensionMismatch("instance mask does not match the image");
        const auto m = region_mean(img, inst.mask);
        ++scored;
        hits += nearest_palette(m[0], m[1], m[2]) == *k;
    }
    if (!scored) return std::nullopt;
    return double(hits) / scored;
}

struct MetricSummary {
    std::vector<double> values; // per image; NaN when undefined
    double mean = 0, stddev = 0;
    int defined = 0;
};

inline MetricSummary summarize(std::vector<double> v) {
    MetricSummary s;
    s.values = std::move(v);
    double sum = 0, sq = 0;
    for (double x : s.values)
        if (std::isfinite(x)) {
            sum += x;
            sq += x * x;
            ++s.defined;
        }
    if (s.defined) {
        s.mean = sum / s.defined;
        s.stddev = std::sqrt(std::max(0.0, sq / s.defined - s.mean * s.mean));
    }
    return s;
}

inline nlohmann::json to_json(const MetricSummary& s) {
    nlohmann::json vals = nlohmann::json::array();
    for (double v : s.values) vals.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
    return {{"mean", s.mean}, {"std", s.stddev}, {"defined", s.defined}, {"values", vals}};
}

} // namespace mtcolor
