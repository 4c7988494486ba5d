#pragma once

#include <random>
#include <string>

#include "mtcolor/dataset.hpp"

namespace mtcolor::testing {

// Random records with random masks (including empty and full) and texts
// mixing ASCII, accents, CJK, emoji, quotes and control characters.
inline AnnotatedImage random_record(std::mt19937_64& rng, int k) {
    static const std::vector<std::string> pieces{"a red circle", "héllo", "青い四角", "🍎", "\"quoted\"", "tab\there",
                                                 "line\nbreak", "back\\slash", "", " ", "ñ", "Ω≈ç√"};
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    auto text = [&] {
        std::string s;
        for (int i = pick(0, 4); i > 0; --i) s += pieces[static_cast<std::size_t>(pick(0, static_cast<int>(pieces.size()) - 1))];
        return s;
    };
    AnnotatedImage a;
    a.image_id = "rec" + std::to_string(k) + text();
    a.width = pick(1, 24);
    a.height = pick(1, 24);
    a.global_text = text();
    if (pick(0, 1)) a.global_source = pick(0, 1) ? "primary" : "fallback";
    for (int i = 0, n = pick(0, 5); i < n; ++i) {
        AnnotatedInstance inst;
        inst.index = i;
        inst.text = text();
        const int mode = pick(0, 3);
        const double p = std::uniform_real_distribution<double>(0, 1)(rng);
        inst.mask = InstanceMask(a.width, a.height);
        for (int j = 0; j < inst.mask.size(); ++j)
            inst.mask.set(j, mode == 0 ? false : mode == 1 ? true : std::bernoulli_distribution(p)(rng));
        inst.bbox = mask_bbox(inst.mask);
        if (pick(0, 2) == 0) {
            inst.source = "none";
            inst.reason = text();
        }
        a.instances.push_back(std::move(inst));
    }
    return a;
}

} // namespace mtcolor::testing
