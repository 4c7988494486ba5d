#pragma once

// Annotated-image schema (JSON lines with RLE masks), the synthetic shape
// generator, and the detect -> crop -> caption -> validate pipeline with
// pluggable clients.

#include <algorithm>
#include <array>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtcolor/checkpoint.hpp"
#include "mtcolor/error.hpp"
#include "mtcolor/image.hpp"
#include "mtcolor/lexicon.hpp"
#include "mtcolor/mask_algebra.hpp"
#include "mtcolor/text_encoder.hpp"

namespace mtcolor {

struct AnnotatedInstance {
    int index = 0;
    std::string text;
    InstanceMask mask;
    std::array<int, 4> bbox{0, 0, 0, 0}; // x, y, w, h
    std::string source;                  // primary | fallback | none; empty for ground truth
    std::string reason;                  // why the text is empty, when it is

    bool operator==(const AnnotatedInstance&) const = default;
};

struct AnnotatedImage {
    std::string image_id;
    int width = 0;
    int height = 0;
    std::string global_text;
    std::string global_source;
    std::vector<AnnotatedInstance> instances;

    MaskSet mask_set() const {
        MaskSet m(width, height);
        for (const auto& i : instances) m.push_back(i.mask);
        return m;
    }
    std::vector<std::string> texts() const {
        std::vector<std::string> t;
        for (const auto& i : instances) t.push_back(i.text);
        return t;
    }

    bool operator==(const AnnotatedImage&) const = default;
};

// Tight box of the set bits; {0,0,0,0} for an empty mask.
inline std::array<int, 4> mask_bbox(const InstanceMask& m) {
    int x0 = m.width(), y0 = m.height(), x1 = -1, y1 = -1;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m.at(x, y)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) return {0, 0, 0, 0};
    return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

// ------------------------------------------------------------------ JSON schema

inline nlohmann::json mask_to_json(const InstanceMask& m) {
    return {{"h", m.height()}, {"w", m.width()}, {"runs", rle_encode(m)}};
}

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& path) {
    if (!j.is_object()) throw SchemaError(path, "expected an object");
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(path.empty() ? key : path + "." + key, "missing field");
    return *it;
}

inline std::string join_path(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

inline int require_int(const nlohmann::json& j, const std::string& key, const std::string& path, int lo, int hi) {
    const auto& v = require(j, key, path);
    if (!v.is_number_integer()) throw SchemaError(join_path(path, key), "expected an integer");
    const auto x = v.get<long long>();
    if (x < lo || x > hi)
        throw SchemaError(join_path(path, key), "value " + std::to_string(x) + " outside [" + std::to_string(lo) +
                                                    "," + std::to_string(hi) + "]");
    return static_cast<int>(x);
}

inline std::string require_string(const nlohmann::json& j, const std::string& key, const std::string& path) {
    const auto& v = require(j, key, path);
    if (!v.is_string()) throw SchemaError(join_path(path, key), "expected a string");
    return v.get<std::string>();
}

inline std::string optional_string(const nlohmann::json& j, const std::string& key, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) return {};
    if (!it->is_string()) throw SchemaError(join_path(path, key), "expected a string");
    return it->get<std::string>();
}

} // namespace detail

inline constexpr int kMaxSide = 1 << 14;

// path names the mask object itself, e.g. "instances[0].mask".
inline InstanceMask mask_from_json(const nlohmann::json& j, const std::string& path) {
    const int h = detail::require_int(j, "h", path, 1, kMaxSide);
    const int w = detail::require_int(j, "w", path, 1, kMaxSide);
    const auto& r = detail::require(j, "runs", path);
    const std::string rp = path + ".runs";
    if (!r.is_array()) throw SchemaError(rp, "expected an integer array");
    std::vector<int> runs;
    runs.reserve(r.size());
    for (const auto& v : r) {
        if (!v.is_number_integer() || v.get<long long>() < 0 || v.get<long long>() > static_cast<long long>(h) * w)
            throw SchemaError(rp, "runs must be non-negative integers");
        runs.push_back(static_cast<int>(v.get<long long>()));
    }
    try {
        return rle_decode(runs, h, w);
    } catch (const CorruptMask& e) {
        throw SchemaError(rp, e.what());
    }
}

inline nlohmann::json to_json(const AnnotatedImage& a) {
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& i : a.instances) {
        nlohmann::json r = {{"index", i.index}, {"text", i.text}, {"mask", mask_to_json(i.mask)}, {"bbox", i.bbox}};
        if (!i.source.empty()) r["source"] = i.source;
        if (!i.reason.empty()) r["reason"] = i.reason;
        inst.push_back(std::move(r));
    }
    nlohmann::json j = {{"image_id", a.image_id},
                        {"width", a.width},
                        {"height", a.height},
                        {"global_text", a.global_text},
                        {"instances", std::move(inst)}};
    if (!a.global_source.empty()) j["global_source"] = a.global_source;
    return j;
}

inline AnnotatedImage annotated_image_from_json(const nlohmann::json& j) {
    AnnotatedImage a;
    if (!j.is_object()) throw SchemaError("", "record is not an object");
    a.image_id = detail::require_string(j, "image_id", "");
    a.width = detail::require_int(j, "width", "", 1, kMaxSide);
    a.height = detail::require_int(j, "height", "", 1, kMaxSide);
    a.global_text = detail::require_string(j, "global_text", "");
    a.global_source = detail::optional_string(j, "global_source", "");
    const auto& inst = detail::require(j, "instances", "");
    if (!inst.is_array()) throw SchemaError("instances", "expected an array");
    for (std::size_t k = 0; k < inst.size(); ++k) {
        const std::string p = "instances[" + std::to_string(k) + "]";
        const auto& r = inst[k];
        if (!r.is_object()) throw SchemaError(p, "expected an object");
        AnnotatedInstance i;
        i.index = detail::require_int(r, "index", p, 0, 1 << 20);
        i.text = detail::require_string(r, "text", p);
        i.mask = mask_from_json(detail::require(r, "mask", p), p + ".mask");
        if (i.mask.width() != a.width || i.mask.height() != a.height)
            throw SchemaError(p + ".mask", "mask is " + std::to_string(i.mask.width()) + "x" +
                                               std::to_string(i.mask.height()) + ", image is " +
                                               std::to_string(a.width) + "x" + std::to_string(a.height));
        const auto& bb = detail::require(r, "bbox", p);
        if (!bb.is_array() || bb.size() != 4) throw SchemaError(p + ".bbox", "expected [x,y,w,h]");
        for (int c = 0; c < 4; ++c) {
            if (!bb[c].is_number_integer()) throw SchemaError(p + ".bbox", "expected integers");
            i.bbox[c] = bb[c].get<int>();
        }
        if (i.bbox[0] < 0 || i.bbox[1] < 0 || i.bbox[2] < 0 || i.bbox[3] < 0 || i.bbox[0] + i.bbox[2] > a.width ||
            i.bbox[1] + i.bbox[3] > a.height)
            throw SchemaError(p + ".bbox", "box lies outside the image");
        i.source = detail::optional_string(r, "source", p);
        i.reason = detail::optional_string(r, "reason", p);
        a.instances.push_back(std::move(i));
    }
    return a;
}

inline std::string annotations_to_jsonl(const std::vector<AnnotatedImage>& recs) {
    std::string out;
    for (const auto& r : recs) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

// Errors carry "records[i]." in front of the field path.
inline std::vector<AnnotatedImage> annotations_from_jsonl(const std::string& text) {
    std::vector<AnnotatedImage> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string rec = "records[" + std::to_string(out.size()) + "]";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(rec, std::string("not valid JSON: ") + e.what());
        }
        try {
            out.push_back(annotated_image_from_json(j));
        } catch (const SchemaError& e) {
            const std::string f = e.field().empty() ? rec : rec + "." + e.field();
            const std::string w = e.what();
            throw SchemaError(f, w.substr(w.find(": ") + 2));
        }
    }
    return out;
}

inline void write_annotations(const std::string& path, const std::vector<AnnotatedImage>& recs) {
    write_file_atomic(path, annotations_to_jsonl(recs));
}

inline std::vector<AnnotatedImage> read_annotations(const std::string& path) {
    return annotations_from_jsonl(read_file(path));
}

// ------------------------------------------------------------------ synthetic data

struct SynthConfig {
    int count = 100;
    int size = 32;
    int min_shapes = 1;
    int max_shapes = 4;
    std::uint64_t seed = 0;
    // Background gray levels (0..255) and the words used for them.
    std::vector<std::pair<int, std::string>> backgrounds{{60, "dark gray"}, {120, "gray"}, {185, "light gray"}};

    void validate() const {
        if (count < 0) throw InvalidArgument("count must be >= 0");
        if (size < 8) throw InvalidArgument("size must be >= 8");
        if (min_shapes < 0 || max_shapes < min_shapes || max_shapes > static_cast<int>(kPalette.size()))
            throw InvalidArgument("need 0 <= min_shapes <= max_shapes <= palette size");
        if (backgrounds.empty()) throw InvalidArgument("at least one background level is required");
    }
};

struct Sample {
    RgbImage image;
    AnnotatedImage ann;
};

// Rasterizes a shape at pixel centres.
inline InstanceMask rasterize_shape(std::string_view shape, int size, double cx, double cy, double r) {
    InstanceMask m(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            bool in = false;
            if (shape == "circle") {
                in = dx * dx + dy * dy <= r * r;
            } else if (shape == "square") {
                in = std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
            } else if (shape == "diamond") {
                in = std::abs(dx) + std::abs(dy) <= r;
            } else if (shape == "triangle") {
                in = dy >= -r && dy <= 0.8 * r && std::abs(dx) <= (dy + r) / 1.8;
            } else {
                throw InvalidArgument("unknown shape '" + std::string(shape) + "'");
            }
            m.set(x, y, in);
        }
    return m;
}

namespace detail {

// True if any set bit of a is within Chebyshev distance 1 of a set bit of b.
inline bool touches(const InstanceMask& a, const InstanceMask& b) {
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) {
            if (!a.at(x, y)) continue;
            for (int yy = std::max(0, y - 1); yy <= std::min(a.height() - 1, y + 1); ++yy)
                for (int xx = std::max(0, x - 1); xx <= std::min(a.width() - 1, x + 1); ++xx)
                    if (b.at(xx, yy)) return true;
        }
    return false;
}

inline std::string join_phrases(const std::vector<std::string>& p) {
    std::string s;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (i) s += i + 1 == p.size() ? " and " : ", ";
        s += p[i];
    }
    return s;
}

} // namespace detail

inline std::string shape_phrase(int color, std::string_view shape) {
    return "a " + std::string(kPalette.at(color).name) + " " + std::string(shape);
}

// Synthetic sample k of a config; independent of the other samples.
inline Sample generate_sample(const SynthConfig& cfg, int k) {
    std::mt19937_64 rng(fnv1a64("synthetic:" + std::to_string(k), cfg.seed));
    auto uniform = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
    const int s = cfg.size;
    const int target = cfg.min_shapes + pick(cfg.max_shapes - cfg.min_shapes + 1);
    const auto& bg = cfg.backgrounds[static_cast<std::size_t>(pick(static_cast<int>(cfg.backgrounds.size())))];

    std::vector<int> colors(kPalette.size());
    for (std::size_t i = 0; i < colors.size(); ++i) colors[i] = static_cast<int>(i);
    std::shuffle(colors.begin(), colors.end(), rng);

    Sample out;
    out.image = RgbImage(s, s, static_cast<std::uint8_t>(bg.first));
    auto& a = out.ann;
    a.image_id = "img" + std::to_string(k);
    a.width = a.height = s;
    std::vector<std::string> phrases;
    const double rmin = s / 8.0, rmax = s / 3.5;
    for (int placed = 0; placed < target; ++placed) {
        std::optional<InstanceMask> mask;
        const auto shape = kShapes[static_cast<std::size_t>(pick(static_cast<int>(kShapes.size())))];
        for (int attempt = 0; attempt < 200 && !mask; ++attempt) {
            const double r = uniform(rmin, rmax) * (1.0 - attempt / 400.0);
            auto m = rasterize_shape(shape, s, uniform(r, s - r), uniform(r, s - r), r);
            if (m.count() < 4) continue;
            bool ok = true;
            for (const auto& o : a.instances) ok = ok && !detail::touches(m, o.mask);
            if (ok) mask = std::move(m);
        }
        if (!mask) break;
        const int color = colors[static_cast<std::size_t>(placed)];
        AnnotatedInstance inst;
        inst.index = placed;
        inst.text = shape_phrase(color, shape);
        inst.mask = std::move(*mask);
        inst.bbox = mask_bbox(inst.mask);
        for (int i = 0; i < inst.mask.size(); ++i)
            if (inst.mask[i]) std::copy_n(kPalette[color].rgb.begin(), 3, out.image.data.data() + i * 3);
        phrases.push_back(inst.text);
        a.instances.push_back(std::move(inst));
    }
    a.global_text = "a " + bg.second + " background";
    if (!phrases.empty()) a.global_text += " with " + detail::join_phrases(phrases);
    return out;
}

inline std::vector<Sample> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int k = 0; k < cfg.count; ++k) out.push_back(generate_sample(cfg, k));
    return out;
}

// Dataset directory: annotations.jsonl plus images/<image_id>.png.
inline void write_dataset(const std::string& dir, const std::vector<Sample>& data) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    std::vector<AnnotatedImage> recs;
    for (const auto& s : data) {
        write_png((fs::path(dir) / "images" / (s.ann.image_id + ".png")).string(), s.image);
        recs.push_back(s.ann);
    }
    write_annotations((fs::path(dir) / "annotations.jsonl").string(), recs);
}

inline std::vector<Sample> read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto ann_path = fs::path(dir) / "annotations.jsonl";
    if (!fs::exists(ann_path)) throw InvalidArgument("'" + dir + "' has no annotations.jsonl");
    std::vector<Sample> out;
    for (auto& a : read_annotations(ann_path.string())) {
        Sample s;
        s.image = read_png((fs::path(dir) / "images" / (a.image_id + ".png")).string());
        if (s.image.width != a.width || s.image.height != a.height)
            throw SchemaError(a.image_id, "image size does not match its annotation");
        s.ann = std::move(a);
        out.push_back(std::move(s));
    }
    return out;
}

// ------------------------------------------------------------------ captions

// Bounding-box crop with every pixel outside the mask set to 128.
inline RgbImage crop_instance(const RgbImage& img, const InstanceMask& m) {
    if (m.width() != img.width || m.height() != img.height) throw DimensionMismatch("mask and image sizes differ");
    if (!m.any()) throw InvalidInput("cannot crop an empty mask");
    const auto [x0, y0, w, h] = mask_bbox(m);
    RgbImage c(w, h, 128);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (m.at(x0 + x, y0 + y)) std::copy_n(img.at(x0 + x, y0 + y), 3, c.at(x, y));
    return c;
}

struct CaptionRules {
    std::vector<std::string> refusals{"unable to provide", "too blurred"};
};

struct CaptionCheck {
    bool valid = false;
    std::string reason; // "empty", "refusal" or "no color word" when invalid
};

inline CaptionCheck validate_caption(const std::string& text, const CaptionRules& rules = {}) {
    std::string lower = text;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c); });
    const auto t = InstanceText::make(text, 1 << 20);
    if (t.empty()) return {false, "empty"};
    for (const auto& r : rules.refusals) {
        std::string rl = r;
        std::transform(rl.begin(), rl.end(), rl.begin(), [](unsigned char c) { return std::tolower(c); });
        if (!rl.empty() && lower.find(rl) != std::string::npos) return {false, "refusal"};
    }
    for (const auto& tok : t.tokens)
        if (palette_index(tok)) return {true, ""};
    return {false, "no color word"};
}

struct Detection {
    MaskSet masks;
    std::vector<std::string> labels;
};

class DetectorClient {
public:
    virtual ~DetectorClient() = default;
    virtual std::string name() const = 0;
    virtual Detection detect(const RgbImage& img) = 0;
};

// nullopt or an exception both count as a failed call.
class CaptionerClient {
public:
    virtual ~CaptionerClient() = default;
    virtual std::string name() const = 0;
    virtual std::optional<std::string> caption(const RgbImage& img) = 0;
    int calls() const { return calls_.load(); }

protected:
    void count() { ++calls_; }

private:
    std::atomic<int> calls_{0};
};

inline bool is_chromatic(const std::uint8_t* p) {
    const int mx = std::max({p[0], p[1], p[2]}), mn = std::min({p[0], p[1], p[2]});
    return mx - mn > 40;
}

inline int nearest_palette(double r, double g, double b) {
    int best = 0;
    double bd = 1e300;
    for (std::size_t k = 0; k < kPalette.size(); ++k) {
        const auto& c = kPalette[k].rgb;
        const double d = (r - c[0]) * (r - c[0]) + (g - c[1]) * (g - c[1]) + (b - c[2]) * (b - c[2]);
        if (d < bd) {
            bd = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

// Connected components (8-neighbourhood) of chromatic pixels, raster order.
class ComponentsDetector : public DetectorClient {
public:
    std::string name() const override { return "components"; }
    Detection detect(const RgbImage& img) override {
        Detection d{MaskSet(img.width, img.height), {}};
        std::vector<int> label(img.pixels(), -1);
        int next = 0;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
                if (label[i] >= 0 || !is_chromatic(img.at(x, y))) continue;
                InstanceMask m(img.width, img.height);
                std::vector<std::pair<int, int>> stack{{x, y}};
                label[i] = next;
                double sum[3] = {0, 0, 0};
                int n = 0;
                while (!stack.empty()) {
                    auto [cx, cy] = stack.back();
                    stack.pop_back();
                    m.set(cx, cy, true);
                    for (int c = 0; c < 3; ++c) sum[c] += img.at(cx, cy)[c];
                    ++n;
                    for (int yy = std::max(0, cy - 1); yy <= std::min(img.height - 1, cy + 1); ++yy)
                        for (int xx = std::max(0, cx - 1); xx <= std::min(img.width - 1, cx + 1); ++xx) {
                            const std::size_t j = static_cast<std::size_t>(yy) * img.width + xx;
                            if (label[j] < 0 && is_chromatic(img.at(xx, yy))) {
                                label[j] = next;
                                stack.emplace_back(xx, yy);
                            }
                        }
                }
                d.masks.push_back(std::move(m));
                d.labels.emplace_back(kPalette[nearest_palette(sum[0] / n, sum[1] / n, sum[2] / n)].name);
                ++next;
            }
        return d;
    }
};

// Names the palette colors of the chromatic pixels in order of first
// appearance: "a red object", "a red and blue object".
class PaletteCaptioner : public CaptionerClient {
public:
    std::string name() const override { return "palette"; }
    std::optional<std::string> caption(const RgbImage& img) override {
        count();
        return describe(img);
    }
    static std::string describe(const RgbImage& img) {
        std::vector<int> seen;
        for (std::size_t i = 0; i < img.pixels(); ++i) {
            const auto* p = img.data.data() + i * 3;
            if (!is_chromatic(p)) continue;
            const int k = nearest_palette(p[0], p[1], p[2]);
            if (std::find(seen.begin(), seen.end(), k) == seen.end()) seen.push_back(k);
        }
        if (seen.empty()) return "a plain gray object";
        std::vector<std::string> names;
        for (int k : seen) names.emplace_back(kPalette[k].name);
        return "a " + detail::join_phrases(names) + " object";
    }
};

class RefusalCaptioner : public CaptionerClient {
public:
    std::string name() const override { return "refusal"; }
    std::optional<std::string> caption(const RgbImage&) override {
        count();
        return "Unable to provide color description, image is too blurred and unclear.";
    }
};

class FailingCaptioner : public CaptionerClient {
public:
    std::string name() const override { return "failing"; }
    std::optional<std::string> caption(const RgbImage&) override {
        count();
        return std::nullopt;
    }
};

// Fails on images with a side shorter than min_side, else behaves like
// the palette captioner.
class SmallFailCaptioner : public CaptionerClient {
public:
    explicit SmallFailCaptioner(int min_side = 5) : min_side_(min_side) {}
    std::string name() const override { return "small-fail"; }
    std::optional<std::string> caption(const RgbImage& img) override {
        count();
        if (img.width < min_side_ || img.height < min_side_) return std::nullopt;
        return PaletteCaptioner::describe(img);
    }

private:
    int min_side_;
};

inline std::unique_ptr<DetectorClient> make_detector(const std::string& name) {
    if (name == "components") return std::make_unique<ComponentsDetector>();
    throw InvalidArgument("unknown detector '" + name + "' (available: components)");
}

inline std::unique_ptr<CaptionerClient> make_captioner(const std::string& name) {
    if (name == "palette") return std::make_unique<PaletteCaptioner>();
    if (name == "refusal") return std::make_unique<RefusalCaptioner>();
    if (name == "failing") return std::make_unique<FailingCaptioner>();
    if (name == "small-fail") return std::make_unique<SmallFailCaptioner>();
    throw InvalidArgument("unknown captioner '" + name + "' (available: palette, refusal, failing, small-fail)");
}

namespace detail {

struct CaptionOutcome {
    std::string text, source, reason;
};

inline CaptionOutcome caption_with_fallback(const RgbImage& img, CaptionerClient& primary, CaptionerClient& fallback,
                                            const CaptionRules& rules) {
    auto attempt = [&](CaptionerClient& c, std::string& why) -> std::optional<std::string> {
        std::optional<std::string> t;
        try {
            t = c.caption(img);
        } catch (const std::exception& e) {
            why = c.name() + " failed: " + e.what();
            return std::nullopt;
        }
        if (!t) {
            why = c.name() + " failed";
            return std::nullopt;
        }
        auto chk = validate_caption(*t, rules);
        if (!chk.valid) {
            why = c.name() + ": " + chk.reason;
            return std::nullopt;
        }
        return t;
    };
    std::string why_p, why_f;
    if (auto t = attempt(primary, why_p)) return {*t, "primary", ""};
    if (auto t = attempt(fallback, why_f)) return {*t, "fallback", ""};
    return {"", "none", why_p + "; " + why_f};
}

} // namespace detail

inline AnnotatedImage annotate_image(const RgbImage& img, const std::string& image_id, DetectorClient& det,
                                     CaptionerClient& primary, CaptionerClient& fallback,
                                     const CaptionRules& rules = {}) {
    Detection d;
    try {
        d = det.detect(img);
    } catch (const std::exception& e) {
        throw Error("detector '" + det.name() + "' failed on " + image_id + ": " + e.what());
    }
    if (d.masks.width() != img.width || d.masks.height() != img.height)
        throw Error("detector '" + det.name() + "' returned masks outside the image bounds");
    AnnotatedImage a;
    a.image_id = image_id;
    a.width = img.width;
    a.height = img.height;
    auto g = detail::caption_with_fallback(img, primary, fallback, rules);
    a.global_text = g.text;
    a.global_source = g.source;
    for (std::size_t k = 0; k < d.masks.size(); ++k) {
        if (!d.masks[k].any()) continue;
        AnnotatedInstance inst;
        inst.index = static_cast<int>(a.instances.size());
        inst.mask = d.masks[k];
        inst.bbox = mask_bbox(inst.mask);
        auto c = detail::caption_with_fallback(crop_instance(img, inst.mask), primary, fallback, rules);
        inst.text = c.text;
        inst.source = c.source;
        inst.reason = c.reason;
        a.instances.push_back(std::move(inst));
    }
    return a;
}

} // namespace mtcolor
