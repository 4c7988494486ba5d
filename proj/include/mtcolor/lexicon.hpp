#pragma once

// Color and shape vocabulary shared by the synthetic dataset, the toy text
// encoder, caption validation and the fidelity metric.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mtcolor {

struct NamedColor {
    std::string_view name;
    std::array<std::uint8_t, 3> rgb;
};

inline constexpr std::array<NamedColor, 8> kPalette{{
    {"red", {230, 30, 30}},
    {"green", {30, 200, 60}},
    {"blue", {40, 80, 230}},
    {"yellow", {235, 220, 40}},
    {"purple", {150, 60, 200}},
    {"orange", {240, 140, 30}},
    {"cyan", {40, 200, 210}},
    {"brown", {140, 90, 40}},
}};

inline constexpr std::array<std::string_view, 4> kShapes{"circle", "square", "triangle", "diamond"};

inline std::optional<int> palette_index(std::string_view word) {
    for (std::size_t k = 0; k < kPalette.size(); ++k)
        if (kPalette[k].name == word) return static_cast<int>(k);
    return std::nullopt;
}

// Words the toy text encoder maps to dedicated embedding rows.
inline std::vector<std::string> toy_vocabulary() {
    std::vector<std::string> v;
    for (const auto& c : kPalette) v.emplace_back(c.name);
    for (auto s : kShapes) v.emplace_back(s);
    return v;
}

} // namespace mtcolor
