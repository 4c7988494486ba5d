#pragma once

// Instance text normalization and the pluggable text-encoder slot.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mtcolor/error.hpp"
#include "mtcolor/lexicon.hpp"

namespace mtcolor {

inline constexpr int kDefaultMaxTokens = 16;

struct InstanceText {
    std::string raw;
    std::vector<std::string> tokens;

    // Lowercases ASCII letters, splits on whitespace, strips ASCII
    // punctuation and keeps at most max_tokens non-empty tokens. Non-ASCII
    // bytes pass through unchanged.
    static InstanceText make(std::string raw, int max_tokens = kDefaultMaxTokens) {
        InstanceText t;
        t.raw = std::move(raw);
        std::string cur;
        auto flush = [&] {
            if (!cur.empty() && static_cast<int>(t.tokens.size()) < max_tokens) t.tokens.push_back(cur);
            cur.clear();
        };
        for (unsigned char ch : t.raw) {
            if (ch < 0x80 && std::isspace(ch)) {
                flush();
            } else if (ch < 0x80 && std::ispunct(ch)) {
                continue;
            } else {
                cur.push_back(ch < 0x80 ? static_cast<char>(std::tolower(ch)) : static_cast<char>(ch));
            }
        }
        flush();
        return t;
    }

    bool empty() const { return tokens.empty(); }

    std::string normalized() const {
        std::string s;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) s += ' ';
            s += tokens[i];
        }
        return s;
    }
};

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0) {
    std::uint64_t h = 1469598103934665603ull ^ (seed * 0x9E3779B97F4A7C15ull);
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string text_hash(const InstanceText& t) { return hex64(fnv1a64(t.normalized())); }

// A text encoder maps a normalized text to a fixed-length feature vector.
// Trainable encoders produce sparse features that are multiplied by a
// learned table [feature_dim x dim]; non-trainable encoders return the
// embedding directly (feature_dim == dim). Empty text maps to all zeros.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual std::string name() const = 0;
    virtual int dim() const = 0;
    virtual int feature_dim() const = 0;
    virtual bool trainable() const = 0;
    virtual std::vector<double> features(const InstanceText& text) const = 0;
};

// Bag of words over the color/shape vocabulary plus seeded hash buckets for
// every other token.
class ToyTextEncoder final : public TextEncoder {
public:
    static constexpr int kBuckets = 64;
    static constexpr int kDim = 64;
    static constexpr std::uint64_t kHashSeed = 0x6d74636f6c6f72ull;

    ToyTextEncoder() : vocab_(toy_vocabulary()) {
        for (std::size_t i = 0; i < vocab_.size(); ++i) lookup_[vocab_[i]] = static_cast<int>(i);
    }

    std::string name() const override { return "toy"; }
    int dim() const override { return kDim; }
    int feature_dim() const override { return static_cast<int>(vocab_.size()) + kBuckets; }
    bool trainable() const override { return true; }

    int vocab_index(const std::string& token) const {
        auto it = lookup_.find(token);
        return it == lookup_.end() ? -1 : it->second;
    }

    int feature_index(const std::string& token) const {
        int v = vocab_index(token);
        if (v >= 0) return v;
        return static_cast<int>(vocab_.size()) + static_cast<int>(fnv1a64(token, kHashSeed) % kBuckets);
    }

    std::vector<double> features(const InstanceText& text) const override {
        std::vector<double> f(feature_dim(), 0.0);
        for (const auto& tok : text.tokens) f[feature_index(tok)] += 1.0;
        return f;
    }

    const std::vector<std::string>& vocabulary() const { return vocab_; }

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> lookup_;
};

// Precomputed embeddings from a sidecar JSON file:
//   {"dim": D, "embeddings": {"<text hash>": [D floats], ...}}
// The hash is text_hash() of the normalized text.
class ExternalTextEncoder final : public TextEncoder {
public:
    ExternalTextEncoder(int dim, std::unordered_map<std::string, std::vector<double>> table)
        : dim_(dim), table_(std::move(table)) {
        for (const auto& [k, v] : table_)
            if (static_cast<int>(v.size()) != dim_) throw InvalidArgument("embedding for " + k + " has wrong length");
    }

    static ExternalTextEncoder load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw InvalidArgument("cannot open embedding sidecar '" + path + "'");
        nlohmann::json j;
        try {
            in >> j;
        } catch (const std::exception& e) {
            throw InvalidArgument("embedding sidecar '" + path + "' is not valid JSON: " + e.what());
        }
        std::unordered_map<std::string, std::vector<double>> table;
        for (auto& [k, v] : j.at("embeddings").items()) table[k] = v.get<std::vector<double>>();
        return ExternalTextEncoder(j.at("dim").get<int>(), std::move(table));
    }

    std::string name() const override { return "external"; }
    int dim() const override { return dim_; }
    int feature_dim() const override { return dim_; }
    bool trainable() const override { return false; }

    std::vector<double> features(const InstanceText& text) const override {
        if (text.empty()) return std::vector<double>(dim_, 0.0);
        auto it = table_.find(text_hash(text));
        if (it == table_.end()) throw InvalidInput("no precomputed embedding for text '" + text.raw + "'");
        return it->second;
    }

private:
    int dim_;
    std::unordered_map<std::string, std::vector<double>> table_;
};

inline std::shared_ptr<const TextEncoder> make_text_encoder(const std::string& name, const std::string& sidecar = {}) {
    if (name == "toy") return std::make_shared<ToyTextEncoder>();
    if (name == "external") return std::make_shared<ExternalTextEncoder>(ExternalTextEncoder::load(sidecar));
    throw InvalidArgument("unknown text encoder '" + name + "'");
}

} // namespace mtcolor
