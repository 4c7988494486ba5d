#pragma once

// Binary instance masks and the attention masks derived from them.
//
// Pixel indexing is row-major throughout: flat index i = y * width + x.

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtcolor/error.hpp"

namespace mtcolor {

struct PixelIndex {
    int width = 0;
    int height = 0;

    int flatten(int x, int y) const { return y * width + x; }
    std::pair<int, int> unflatten(int i) const { return {i % width, i / width}; }
    int size() const { return width * height; }
};

class InstanceMask {
public:
    InstanceMask() = default;
    InstanceMask(int width, int height)
        : width_(width), height_(height), bits_(static_cast<std::size_t>(width) * height, 0) {
        if (width < 0 || height < 0) throw InvalidArgument("negative mask dimensions");
    }
    InstanceMask(int width, int height, std::vector<std::uint8_t> bits) : width_(width), height_(height), bits_(std::move(bits)) {
        if (bits_.size() != static_cast<std::size_t>(width) * height)
            throw DimensionMismatch("mask bit count " + std::to_string(bits_.size()) + " != " +
                                    std::to_string(width) + "x" + std::to_string(height));
        for (auto& b : bits_) {
            if (b > 1) throw InvalidArgument("mask values must be 0 or 1");
        }
    }

    static InstanceMask filled(int width, int height, bool value) {
        InstanceMask m(width, height);
        std::fill(m.bits_.begin(), m.bits_.end(), value ? 1 : 0);
        return m;
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int size() const { return width_ * height_; }
    PixelIndex index() const { return {width_, height_}; }

    bool at(int x, int y) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
    bool operator[](int i) const { return bits_[i] != 0; }
    void set(int x, int y, bool v) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
    void set(int i, bool v) { bits_[i] = v ? 1 : 0; }

    const std::vector<std::uint8_t>& bits() const { return bits_; }
    int count() const { return static_cast<int>(std::count(bits_.begin(), bits_.end(), 1)); }
    bool any() const { return std::find(bits_.begin(), bits_.end(), 1) != bits_.end(); }

    bool operator==(const InstanceMask&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> bits_;
};

class MaskSet {
public:
    MaskSet() = default;
    MaskSet(int width, int height) : width_(width), height_(height) {}
    MaskSet(int width, int height, std::vector<InstanceMask> masks) : width_(width), height_(height) {
        for (auto& m : masks) push_back(std::move(m));
    }

    void push_back(InstanceMask m) {
        if (m.width() != width_ || m.height() != height_)
            throw DimensionMismatch("mask " + std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                                    " does not match set " + std::to_string(width_) + "x" + std::to_string(height_));
        masks_.push_back(std::move(m));
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int pixels() const { return width_ * height_; }
    std::size_t size() const { return masks_.size(); }
    bool empty() const { return masks_.empty(); }
    const InstanceMask& operator[](std::size_t k) const { return masks_[k]; }
    const std::vector<InstanceMask>& masks() const { return masks_; }
    auto begin() const { return masks_.begin(); }
    auto end() const { return masks_.end(); }

    bool operator==(const MaskSet&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<InstanceMask> masks_;
};

class AttentionMask {
public:
    AttentionMask() = default;
    AttentionMask(int rows, int cols, bool value = false)
        : rows_(rows), cols_(cols), bits_(static_cast<std::size_t>(rows) * cols, value ? 1 : 0) {}

    static AttentionMask ones(int rows, int cols) { return AttentionMask(rows, cols, true); }
    static AttentionMask identity(int n) {
        AttentionMask m(n, n);
        for (int i = 0; i < n; ++i) m.set(i, i, true);
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool operator()(int i, int j) const { return bits_[static_cast<std::size_t>(i) * cols_ + j] != 0; }
    void set(int i, int j, bool v) { bits_[static_cast<std::size_t>(i) * cols_ + j] = v ? 1 : 0; }
    const std::uint8_t* row(int i) const { return bits_.data() + static_cast<std::size_t>(i) * cols_; }
    const std::vector<std::uint8_t>& bits() const { return bits_; }

    AttentionMask transposed() const {
        AttentionMask t(cols_, rows_);
        for (int i = 0; i < rows_; ++i)
            for (int j = 0; j < cols_; ++j) t.set(j, i, (*this)(i, j));
        return t;
    }

    bool operator==(const AttentionMask&) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

struct MaskPolicy {
    // What an uncovered (background) query pixel may attend to.
    enum class Background { self_only, background_region, all_ones };
    // Which containing masks define a covered query's region.
    enum class Overlap { union_all, first_match };

    Background background = Background::background_region;
    Overlap overlap = Overlap::union_all;

    bool operator==(const MaskPolicy&) const = default;
};

// Nearest-neighbour resampling at pixel centres: source coordinate
// floor((x + 0.5) * src / dst).
inline MaskSet resize_mask_set(const MaskSet& m, int height, int width) {
    if (height < 1 || width < 1) throw InvalidArgument("resize_mask_set: target dimensions must be >= 1");
    MaskSet out(width, height);
    if (m.empty()) return out;
    const int sw = m.width(), sh = m.height();
    std::vector<int> xs(width), ys(height);
    for (int x = 0; x < width; ++x) xs[x] = std::min(sw - 1, static_cast<int>(((x + 0.5) * sw) / width));
    for (int y = 0; y < height; ++y) ys[y] = std::min(sh - 1, static_cast<int>(((y + 0.5) * sh) / height));
    for (const auto& mk : m) {
        InstanceMask r(width, height);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) r.set(x, y, mk.at(xs[x], ys[y]));
        out.push_back(std::move(r));
    }
    return out;
}

inline InstanceMask resize_mask(const InstanceMask& m, int height, int width) {
    MaskSet s(m.width(), m.height());
    s.push_back(m);
    return resize_mask_set(s, height, width)[0];
}

// m_g = NOT(OR_k m_k); all-ones for an empty set.
inline InstanceMask background_mask(const MaskSet& m) {
    InstanceMask g = InstanceMask::filled(m.width(), m.height(), true);
    for (const auto& mk : m)
        for (int i = 0; i < mk.size(); ++i)
            if (mk[i]) g.set(i, false);
    return g;
}

namespace detail {

inline void check_feature_resolution(const MaskSet& m, int height, int width) {
    if (m.height() != height || m.width() != width)
        throw DimensionMismatch("mask set is " + std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                                ", expected " + std::to_string(width) + "x" + std::to_string(height));
}

// For each pixel, the list of instances that contain it.
inline std::vector<std::vector<int>> memberships(const MaskSet& m) {
    std::vector<std::vector<int>> out(m.pixels());
    for (std::size_t k = 0; k < m.size(); ++k)
        for (int i = 0; i < m.pixels(); ++i)
            if (m[k][i]) out[i].push_back(static_cast<int>(k));
    return out;
}

} // namespace detail

// Pixel-level cross-attention mask: query i may read key j iff j lies in
// the region of i (union of the masks containing i, or the first one under
// first_match). Uncovered queries follow policy.background.
inline AttentionMask build_pixel_attention_mask(const MaskSet& m, int height, int width, MaskPolicy policy = {}) {
    detail::check_feature_resolution(m, height, width);
    const int l = height * width;
    AttentionMask out(l, l);
    const auto member = detail::memberships(m);
    const InstanceMask bg = background_mask(m);
    for (int i = 0; i < l; ++i) {
        if (member[i].empty()) {
            switch (policy.background) {
            case MaskPolicy::Background::self_only:
                out.set(i, i, true);
                break;
            case MaskPolicy::Background::background_region:
                for (int j = 0; j < l; ++j)
                    if (bg[j]) out.set(i, j, true);
                break;
            case MaskPolicy::Background::all_ones:
                for (int j = 0; j < l; ++j) out.set(i, j, true);
                break;
            }
            continue;
        }
        if (policy.overlap == MaskPolicy::Overlap::first_match) {
            const auto& mk = m[member[i].front()];
            for (int j = 0; j < l; ++j)
                if (mk[j]) out.set(i, j, true);
        } else {
            for (int k : member[i]) {
                const auto& mk = m[k];
                for (int j = 0; j < l; ++j)
                    if (mk[j]) out.set(i, j, true);
            }
        }
    }
    return out;
}

// Latent-latent self-attention mask: (i,j) allowed iff some instance
// contains both. Uncovered pixels are related by policy.background in a way
// that keeps the matrix symmetric.
inline AttentionMask build_self_mask(const MaskSet& m, int height, int width, MaskPolicy policy = {}) {
    detail::check_feature_resolution(m, height, width);
    const int l = height * width;
    AttentionMask out(l, l);
    const auto member = detail::memberships(m);
    auto shares_instance = [&](int i, int j) {
        const auto& a = member[i];
        const auto& b = member[j];
        if (a.empty() || b.empty()) return false;
        if (policy.overlap == MaskPolicy::Overlap::first_match) return a.front() == b.front();
        for (int k : a)
            if (std::find(b.begin(), b.end(), k) != b.end()) return true;
        return false;
    };
    for (int i = 0; i < l; ++i)
        for (int j = i; j < l; ++j) {
            bool allowed = shares_instance(i, j);
            if (!allowed) {
                const bool ui = member[i].empty(), uj = member[j].empty();
                switch (policy.background) {
                case MaskPolicy::Background::self_only:
                    allowed = ui && uj && i == j;
                    break;
                case MaskPolicy::Background::background_region:
                    allowed = ui && uj;
                    break;
                case MaskPolicy::Background::all_ones:
                    allowed = ui || uj;
                    break;
                }
            }
            out.set(i, j, allowed);
            out.set(j, i, allowed);
        }
    return out;
}

// Latent-to-instance mask (l_x x n): pixel i may read instance token j iff
// m_j contains i.
inline AttentionMask build_latent_instance_mask(const MaskSet& m, int height, int width) {
    detail::check_feature_resolution(m, height, width);
    const int l = height * width;
    const int n = static_cast<int>(m.size());
    AttentionMask out(l, n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < l; ++i)
            if (m[j][i]) out.set(i, j, true);
    return out;
}

// [[self, cross], [crossᵀ, I_n]]
inline AttentionMask assemble_self_map_mask(const AttentionMask& self_mask, const AttentionMask& cross_mask, int n) {
    const int l = self_mask.rows();
    if (self_mask.cols() != l) throw DimensionMismatch("self mask must be square");
    if (cross_mask.rows() != l || cross_mask.cols() != n)
        throw DimensionMismatch("cross mask must be " + std::to_string(l) + "x" + std::to_string(n));
    AttentionMask out(l + n, l + n);
    for (int i = 0; i < l; ++i) {
        for (int j = 0; j < l; ++j) out.set(i, j, self_mask(i, j));
        for (int j = 0; j < n; ++j) {
            out.set(i, l + j, cross_mask(i, j));
            out.set(l + j, i, cross_mask(i, j));
        }
    }
    for (int j = 0; j < n; ++j) out.set(l + j, l + j, true);
    return out;
}

// Makes a mask set disjoint by giving each pixel to the lowest-index
// instance that covers it.
inline MaskSet first_match_disjoint(const MaskSet& m) {
    MaskSet out(m.width(), m.height());
    InstanceMask taken(m.width(), m.height());
    for (const auto& mk : m) {
        InstanceMask r(m.width(), m.height());
        for (int i = 0; i < mk.size(); ++i)
            if (mk[i] && !taken[i]) {
                r.set(i, true);
                taken.set(i, true);
            }
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------- RLE

// Row-major uncompressed RLE, zero-run first.
inline std::vector<int> rle_encode(const InstanceMask& m) {
    std::vector<int> runs;
    std::uint8_t current = 0;
    int count = 0;
    for (auto b : m.bits()) {
        if (b != current) {
            runs.push_back(count);
            current = b;
            count = 0;
        }
        ++count;
    }
    runs.push_back(count);
    return runs;
}

inline InstanceMask rle_decode(const std::vector<int>& runs, int height, int width) {
    if (height < 0 || width < 0) throw CorruptMask("negative mask dimensions");
    long long total = 0;
    for (int r : runs) {
        if (r < 0) throw CorruptMask("negative run length");
        total += r;
    }
    if (total != static_cast<long long>(height) * width)
        throw CorruptMask("run lengths sum to " + std::to_string(total) + ", expected " +
                          std::to_string(static_cast<long long>(height) * width));
    std::vector<std::uint8_t> bits;
    bits.reserve(total);
    std::uint8_t v = 0;
    for (int r : runs) {
        bits.insert(bits.end(), r, v);
        v ^= 1;
    }
    return InstanceMask(width, height, std::move(bits));
}

} // namespace mtcolor
