#pragma once

// Glue between datasets, the trainer and the sampler: training examples,
// colorize requests, ablation variants, fidelity evaluation and the color
// leakage probe.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtcolor/dataset.hpp"
#include "mtcolor/metrics.hpp"
#include "mtcolor/multisample.hpp"
#include "mtcolor/trainer.hpp"

namespace mtcolor {

inline Conditioning conditioning_of(const AnnotatedImage& a, const std::vector<float>& gray) {
    Conditioning c;
    c.gray = gray;
    c.global_text = a.global_text;
    c.masks = a.mask_set();
    c.texts = a.texts();
    return c;
}

inline TrainingExample training_example(const Sample& s) {
    TrainingExample ex;
    ex.rgb = planar_from_image(s.image);
    ex.cond = conditioning_of(s.ann, gray_of(s.image));
    return ex;
}

inline std::vector<TrainingExample> training_examples(const std::vector<Sample>& data) {
    std::vector<TrainingExample> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(training_example(s));
    return out;
}

inline ColorizeRequest colorize_request(const AnnotatedImage& a, const std::vector<float>& gray,
                                        const SamplerConfig& sc) {
    ColorizeRequest r;
    r.gray = gray;
    r.global_text = a.global_text;
    r.masks = a.mask_set();
    r.texts = a.texts();
    r.sampler = sc;
    return r;
}

// Ablation variants: "no-mask" forces every attention mask to all-ones,
// "no-instance" bypasses the guidance blocks, "ddim" skips the instance
// phase (single pass).
enum class Variant { full, no_mask, no_instance, ddim };

inline const char* to_string(Variant v) {
    switch (v) {
    case Variant::full: return "full";
    case Variant::no_mask: return "no-mask";
    case Variant::no_instance: return "no-instance";
    case Variant::ddim: return "ddim";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    for (auto v : {Variant::full, Variant::no_mask, Variant::no_instance, Variant::ddim})
        if (s == to_string(v)) return v;
    throw InvalidArgument("unknown variant '" + s + "' (full, no-mask, no-instance, ddim)");
}

inline ForwardOptions variant_options(Variant v) {
    ForwardOptions o;
    if (v == Variant::no_mask) o.masks_enabled = false;
    if (v == Variant::no_instance) o.guidance_enabled = false;
    return o;
}

inline SamplerConfig variant_sampler(Variant v, SamplerConfig sc) {
    if (v == Variant::ddim) sc.alpha = 0.0;
    return sc;
}

template <typename T>
ColorizeResult colorize_variant(const ColorizeRequest& req, const Denoiser<T>& model, const NoiseSchedule& s,
                                Variant v) {
    ColorizeRequest r = req;
    r.sampler = variant_sampler(v, req.sampler);
    auto out = colorize(r, model, s, variant_options(v));
    out.provenance["variant"] = to_string(v);
    return out;
}

// Palette color used to replace color k in the leakage probe.
inline int swapped_color(int k) { return (k + 4) % static_cast<int>(kPalette.size()); }

// Text with its first palette word replaced by the swapped color.
inline std::string swap_color_word(const std::string& text) {
    const auto k = text_color(text);
    if (!k) throw InvalidInput("text '" + text + "' names no palette color");
    const std::string from(kPalette[*k].name), to(kPalette[swapped_color(*k)].name);
    std::string out;
    std::size_t i = 0;
    bool done = false;
    while (i < text.size()) {
        // Whole-word, case-insensitive match of the color name.
        if (!done && i + from.size() <= text.size()) {
            bool eq = true;
            for (std::size_t j = 0; j < from.size() && eq; ++j)
                eq = std::tolower(static_cast<unsigned char>(text[i + j])) == from[j];
            const bool left = i == 0 || !std::isalnum(static_cast<unsigned char>(text[i - 1]));
            const bool right = i + from.size() == text.size() ||
                               !std::isalnum(static_cast<unsigned char>(text[i + from.size()]));
            if (eq && left && right) {
                out += to;
                i += from.size();
                done = true;
                continue;
            }
        }
        out += text[i++];
    }
    return out;
}

struct LeakageReport {
    double inside = 0;  // mean |delta| inside the target mask
    double outside = 0; // mean |delta| outside every mask
    double ratio = std::nan("");

    nlohmann::json to_json() const {
        return {{"inside", inside}, {"outside", outside},
                {"ratio", std::isfinite(ratio) ? nlohmann::json(ratio) : nlohmann::json(nullptr)}};
    }
};

// Colorizes twice, the second time with the target instance's color word
// swapped in its instance text only, and compares the two outputs.
template <typename T>
LeakageReport leakage_probe(const Denoiser<T>& model, const NoiseSchedule& s, const ColorizeRequest& req,
                            std::size_t target, const ForwardOptions& opt = {}) {
    if (target >= req.masks.size()) throw InvalidArgument("leakage target index out of range");
    ColorizeRequest alt = req;
    alt.texts[target] = swap_color_word(req.texts[target]);
    const auto a = colorize(req, model, s, opt).rgb;
    const auto b = colorize(alt, model, s, opt).rgb;
    const auto& m = req.masks[target];
    const auto bg = background_mask(req.masks);
    const std::size_t px = static_cast<std::size_t>(m.size());
    double in = 0, out = 0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t p = 0; p < px; ++p) {
        const int i = static_cast<int>(p);
        double d = 0;
        for (int c = 0; c < 3; ++c) d += std::abs(double(a[c * px + p]) - b[c * px + p]);
        d /= 3;
        if (m[i]) {
            in += d;
            ++n_in;
        } else if (bg[i]) {
            out += d;
            ++n_out;
        }
    }
    LeakageReport r;
    r.inside = n_in ? in / n_in : 0.0;
    r.outside = n_out ? out / n_out : 0.0;
    if (r.inside > 0) r.ratio = r.outside / r.inside;
    return r;
}

struct VariantScore {
    Variant variant = Variant::full;
    MetricSummary fidelity;
    MetricSummary leakage_ratio;
    double leak_inside = 0, leak_outside = 0;
};

// Fidelity of each variant on the given layouts; the leakage probe targets
// instance 0 of every layout with at least one color-named instance.
template <typename T>
VariantScore evaluate_variant(const Denoiser<T>& model, const NoiseSchedule& s, const std::vector<Sample>& data,
                              const SamplerConfig& sc, Variant v, bool with_leakage) {
    VariantScore out;
    out.variant = v;
    std::vector<double> fid, leak;
    double in = 0, outside = 0;
    int probes = 0;
    for (const auto& smp : data) {
        auto req = colorize_request(smp.ann, gray_of(smp.image), sc);
        const auto res = colorize_variant(req, model, s, v);
        const auto img = image_from_planar(res.rgb, smp.image.width, smp.image.height);
        fid.push_back(instance_color_fidelity(img, smp.ann).value_or(std::nan("")));
        if (with_leakage && !req.masks.empty() && text_color(req.texts[0])) {
            req.sampler = variant_sampler(v, sc);
            auto r = leakage_probe(model, s, req, 0, variant_options(v));
            leak.push_back(r.ratio);
            in += r.inside;
            outside += r.outside;
            ++probes;
        }
    }
    out.fidelity = summarize(std::move(fid));
    out.leakage_ratio = summarize(std::move(leak));
    if (probes) {
        out.leak_inside = in / probes;
        out.leak_outside = outside / probes;
    }
    return out;
}

inline nlohmann::json to_json(const VariantScore& v) {
    return {{"variant", to_string(v.variant)},
            {"fidelity", to_json(v.fidelity)},
            {"leakage_ratio", to_json(v.leakage_ratio)},
            {"leak_inside", v.leak_inside},
            {"leak_outside", v.leak_outside},
            {"pooled_leakage_ratio", v.leak_inside > 0 ? nlohmann::json(v.leak_outside / v.leak_inside)
                                                       : nlohmann::json(nullptr)}};
}

} // namespace mtcolor
