#pragma once

// Versioned binary checkpoints: magic, version, config hash, step count, the
// canonical config text, then named parameter blobs with optimizer moments.
// Self-describing: a checkpoint alone is enough to rebuild the model.

#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>

#include "tsplat/config.hpp"
#include "tsplat/image.hpp"
#include "tsplat/optim.hpp"

namespace tsplat {

struct Checkpoint {
    RunConfig config;
    std::uint64_t step = 0;
    ParamStore params;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'T', 'S', 'P', 'L', 'A', 'T', 'C', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

inline void put_u64(std::string& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

inline void put_tensor(std::string& out, const Tensor& t) {
    out.push_back(static_cast<char>(t.ndim()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
}

struct Reader {
    const std::string& bytes;
    std::size_t at = 0;

    void need(std::size_t n) const {
        if (at + n > bytes.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + at, 4);
        at += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v;
        std::memcpy(&v, bytes.data() + at, 8);
        at += 8;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes.substr(at, n);
        at += n;
        return s;
    }
    Tensor tensor() {
        need(1);
        const std::size_t ndim = static_cast<unsigned char>(bytes[at++]);
        Shape shape(ndim);
        for (std::size_t i = 0; i < ndim; ++i) shape[i] = u64();
        Tensor t(shape);
        const std::size_t n = t.numel() * sizeof(double);
        need(n);
        std::memcpy(t.data(), bytes.data() + at, n);
        at += n;
        return t;
    }
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
    std::string out(detail::kCheckpointMagic, 8);
    detail::put_u32(out, detail::kCheckpointVersion);
    detail::put_u64(out, config_hash(ckpt.config));
    detail::put_u64(out, ckpt.step);
    const std::string config_text = serialize_config(ckpt.config);
    detail::put_u32(out, static_cast<std::uint32_t>(config_text.size()));
    out += config_text;
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.params.entries().size()));
    for (const auto& [name, entry] : ckpt.params.entries()) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_tensor(out, entry.value);
        detail::put_tensor(out, entry.moment1);
        detail::put_tensor(out, entry.moment2);
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    detail::Reader r{bytes};
    if (r.str(8) != std::string(detail::kCheckpointMagic, 8))
        throw std::runtime_error("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != detail::kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t stored_hash = r.u64();
    Checkpoint ckpt;
    ckpt.step = r.u64();
    const std::uint32_t config_len = r.u32();
    ckpt.config = parse_config(r.str(config_len));
    if (config_hash(ckpt.config) != stored_hash)
        throw std::runtime_error("checkpoint: config hash mismatch");
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        Tensor value = r.tensor();
        Tensor m1 = r.tensor();
        Tensor m2 = r.tensor();
        ckpt.params.create(name, std::move(value));
        ckpt.params.entry(name).moment1 = std::move(m1);
        ckpt.params.entry(name).moment2 = std::move(m2);
    }
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    atomic_write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(read_file(path));
}

}  // namespace tsplat
