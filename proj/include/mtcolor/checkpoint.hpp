#pragma once

// Versioned binary checkpoint:
//   "MTCK" u32 version | u32 n, n bytes JSON meta (config echo)
//   u32 count | per parameter: u16 name length, name, u8 group, u8 rank,
//   i32 dims[rank], f32 data
//   u8 has_optimizer | u64 step, per parameter f32 m, f32 v
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtcolor/params.hpp"
#include "mtcolor/text_encoder.hpp"

namespace mtcolor {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 2;

struct OptimizerState {
    std::uint64_t step = 0;
    std::vector<std::vector<float>> m, v; // parallel to the parameter list
    std::vector<std::vector<float>> ema;  // weight average; empty when disabled
};

struct Checkpoint {
    nlohmann::json meta;
    ParamStore<float> params;
    std::optional<OptimizerState> optimizer;
};

namespace detail {

template <typename V>
void put(std::string& out, V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out.append(buf, sizeof(V));
}

class Reader {
public:
    explicit Reader(const std::string& data) : d_(data) {}
    template <typename V>
    V get() {
        need(sizeof(V));
        V v;
        std::memcpy(&v, d_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = d_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void floats(float* dst, std::size_t n) {
        need(n * sizeof(float));
        std::memcpy(dst, d_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
    }
    bool done() const { return pos_ == d_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > d_.size()) throw CheckpointError("checkpoint is truncated");
    }
    const std::string& d_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
    std::string out(kCheckpointMagic, 4);
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    const std::string meta = c.meta.dump();
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.params.size()));
    for (const auto& p : c.params.all()) {
        detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
        out += p.name;
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p.group));
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p.shape.size()));
        for (int d : p.shape) detail::put<std::int32_t>(out, d);
        out.append(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(float));
    }
    detail::put<std::uint8_t>(out, c.optimizer ? 1 : 0);
    if (c.optimizer) {
        const auto& o = *c.optimizer;
        if (o.m.size() != c.params.size() || o.v.size() != c.params.size())
            throw CheckpointError("optimizer state does not match the parameter list");
        detail::put<std::uint64_t>(out, o.step);
        for (std::size_t i = 0; i < c.params.size(); ++i) {
            if (o.m[i].size() != c.params[i].value.size() || o.v[i].size() != c.params[i].value.size())
                throw CheckpointError("optimizer moment size mismatch for " + c.params[i].name);
            out.append(reinterpret_cast<const char*>(o.m[i].data()), o.m[i].size() * sizeof(float));
            out.append(reinterpret_cast<const char*>(o.v[i].data()), o.v[i].size() * sizeof(float));
        }
        detail::put<std::uint8_t>(out, o.ema.empty() ? 0 : 1);
        if (!o.ema.empty()) {
            if (o.ema.size() != c.params.size()) throw CheckpointError("weight average does not match the parameter list");
            for (std::size_t i = 0; i < c.params.size(); ++i) {
                if (o.ema[i].size() != c.params[i].value.size())
                    throw CheckpointError("weight average size mismatch for " + c.params[i].name);
                out.append(reinterpret_cast<const char*>(o.ema[i].data()), o.ema[i].size() * sizeof(float));
            }
        }
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& data) {
    detail::Reader r(data);
    if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    const auto meta_len = r.get<std::uint32_t>();
    try {
        c.meta = nlohmann::json::parse(r.bytes(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.get<std::uint16_t>());
        const auto group = r.get<std::uint8_t>();
        if (group > 2) throw CheckpointError("parameter '" + name + "' has unknown group");
        const auto rank = r.get<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) {
            d = r.get<std::int32_t>();
            if (d < 0) throw CheckpointError("parameter '" + name + "' has a negative dimension");
        }
        std::vector<float> v(shape_numel(shape));
        r.floats(v.data(), v.size());
        c.params.add(name, static_cast<ParamGroup>(group), shape, std::move(v));
    }
    if (r.get<std::uint8_t>()) {
        OptimizerState o;
        o.step = r.get<std::uint64_t>();
        for (const auto& p : c.params.all()) {
            o.m.emplace_back(p.value.size());
            o.v.emplace_back(p.value.size());
            r.floats(o.m.back().data(), p.value.size());
            r.floats(o.v.back().data(), p.value.size());
        }
        if (r.get<std::uint8_t>())
            for (const auto& p : c.params.all()) {
                o.ema.emplace_back(p.value.size());
                r.floats(o.ema.back().data(), p.value.size());
            }
        c.optimizer = std::move(o);
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
    return c;
}

// Write to a temporary sibling, then rename over the target.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, target);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::string data;
    try {
        data = read_file(path);
    } catch (const InvalidArgument&) {
        throw CheckpointError("checkpoint '" + path + "' not found or unreadable");
    }
    return deserialize_checkpoint(data);
}

inline std::string checkpoint_hash(const std::string& bytes) { return hex64(fnv1a64(bytes)); }

} // namespace mtcolor
