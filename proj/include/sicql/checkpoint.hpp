// Versioned binary checkpoints: a manifest of named tensors (name, shape,
// offset) followed by one flat little-endian float64 payload, plus free-form
// string metadata for scalars like step counters and quality-gate results.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sicql/tensor.hpp"

namespace sicql {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'S', 'I', 'C', 'Q', 'L', 'C', 'K', '\n'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline bool host_is_little_endian() {
    const uint32_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("truncated checkpoint file");
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const uint32_t len = read_pod<uint32_t>(is);
    if (len > (1u << 20)) throw CheckpointError("corrupt checkpoint string length");
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw CheckpointError("truncated checkpoint file");
    return s;
}

}  // namespace detail

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> meta;

    const Tensor& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CheckpointError("checkpoint missing tensor: " + name);
        return it->second;
    }
    std::string meta_or(const std::string& key, const std::string& fallback) const {
        auto it = meta.find(key);
        return it == meta.end() ? fallback : it->second;
    }
};

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                            const std::map<std::string, std::string>& meta) {
    if (!detail::host_is_little_endian()) {
        throw CheckpointError("checkpoint format requires a little-endian host");
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot open for write: " + tmp);
        os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
        detail::write_pod<uint32_t>(os, detail::kCheckpointVersion);
        detail::write_pod<uint32_t>(os, 0);  // reserved

        detail::write_pod<uint64_t>(os, tensors.size());
        uint64_t offset = 0;
        for (const auto& [name, t] : tensors) {
            detail::write_string(os, name);
            detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t->ndim()));
            for (int64_t d : t->shape()) detail::write_pod<int64_t>(os, d);
            detail::write_pod<uint64_t>(os, offset);
            offset += static_cast<uint64_t>(t->numel());
        }

        detail::write_pod<uint64_t>(os, meta.size());
        for (const auto& [k, v] : meta) {
            detail::write_string(os, k);
            detail::write_string(os, v);
        }

        detail::write_pod<uint64_t>(os, offset);
        for (const auto& [name, t] : tensors) {
            (void)name;
            os.write(reinterpret_cast<const char*>(t->data()),
                     static_cast<std::streamsize>(sizeof(double) * t->numel()));
        }
        if (!os) throw CheckpointError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
        throw CheckpointError("not a checkpoint file: " + path);
    }
    const uint32_t version = detail::read_pod<uint32_t>(is);
    if (version != detail::kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    detail::read_pod<uint32_t>(is);  // reserved

    struct Rec {
        std::string name;
        std::vector<int64_t> shape;
        uint64_t offset;
    };
    std::vector<Rec> recs;
    const uint64_t n_tensors = detail::read_pod<uint64_t>(is);
    for (uint64_t i = 0; i < n_tensors; ++i) {
        Rec r;
        r.name = detail::read_string(is);
        const uint32_t ndim = detail::read_pod<uint32_t>(is);
        if (ndim > 8) throw CheckpointError("corrupt tensor rank");
        for (uint32_t d = 0; d < ndim; ++d) r.shape.push_back(detail::read_pod<int64_t>(is));
        r.offset = detail::read_pod<uint64_t>(is);
        recs.push_back(std::move(r));
    }

    Checkpoint ck;
    const uint64_t n_meta = detail::read_pod<uint64_t>(is);
    for (uint64_t i = 0; i < n_meta; ++i) {
        std::string k = detail::read_string(is);
        std::string v = detail::read_string(is);
        ck.meta.emplace(std::move(k), std::move(v));
    }

    const uint64_t payload = detail::read_pod<uint64_t>(is);
    std::vector<double> buf(payload);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(sizeof(double) * payload));
    if (!is) throw CheckpointError("truncated checkpoint payload");

    for (const Rec& r : recs) {
        const int64_t numel = Tensor::checked_numel(r.shape);
        if (r.offset + static_cast<uint64_t>(numel) > payload) {
            throw CheckpointError("tensor extends past payload: " + r.name);
        }
        Tensor t(r.shape, std::vector<double>(buf.begin() + static_cast<int64_t>(r.offset),
                                              buf.begin() + static_cast<int64_t>(r.offset) + numel));
        ck.tensors.emplace(r.name, std::move(t));
    }
    return ck;
}

}  // namespace sicql
