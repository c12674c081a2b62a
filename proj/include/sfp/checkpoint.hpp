#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfp/autograd.hpp"

namespace sfp {

// CRC-64 (ECMA-182 polynomial, reflected, init/xorout ~0).
inline std::uint64_t crc64(const void* data, std::size_t n, std::uint64_t crc = 0) {
    static const std::array<std::uint64_t, 256> table = [] {
        std::array<std::uint64_t, 256> t{};
        for (std::uint64_t i = 0; i < 256; ++i) {
            std::uint64_t c = i;
            for (int k = 0; k < 8; ++k)
                c = (c & 1) ? (c >> 1) ^ 0xC96C5795D7870F42ULL : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc = ~crc;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

namespace detail {

template <class T>
constexpr std::uint8_t dtype_tag() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

inline void append(std::vector<std::uint8_t>& buf, const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
}

struct Reader {
    const std::uint8_t* p;
    const std::uint8_t* end;
    void read(void* out, std::size_t n, const char* what) {
        if (static_cast<std::size_t>(end - p) < n)
            throw std::runtime_error(std::string("checkpoint truncated: ") + what);
        std::memcpy(out, p, n);
        p += n;
    }
    std::size_t remaining() const { return static_cast<std::size_t>(end - p); }
};

template <class T>
inline void append_tensor(std::vector<std::uint8_t>& buf, const std::string& name,
                          const Matrix<T>& m, const std::vector<std::uint64_t>& shape) {
    const std::uint32_t name_len = static_cast<std::uint32_t>(name.size());
    append(buf, &name_len, 4);
    append(buf, name.data(), name.size());
    const std::uint8_t tag = dtype_tag<T>();
    append(buf, &tag, 1);
    const std::uint32_t rank = static_cast<std::uint32_t>(shape.size());
    append(buf, &rank, 4);
    for (std::uint64_t d : shape) append(buf, &d, 8);
    append(buf, m.data.data(), m.data.size() * sizeof(T));
}

}  // namespace detail

// Checkpoint container: magic "SFPK", u32 version, u64 config length +
// config text, then a tensor table (u32 name length, name bytes, u8 dtype
// tag, u32 rank, dims as u64, row-major little-endian payload) repeated to
// the end, followed by a u64 CRC of all prior bytes. Parameter values,
// optimizer moments and the step counter all round-trip.
template <class T>
inline void save_checkpoint(const ParamStore<T>& store, const std::string& config_text,
                            const std::string& path) {
    std::vector<std::uint8_t> buf;
    detail::append(buf, "SFPK", 4);
    const std::uint32_t version = 1;
    detail::append(buf, &version, 4);
    const std::uint64_t cfg_len = config_text.size();
    detail::append(buf, &cfg_len, 8);
    detail::append(buf, config_text.data(), config_text.size());

    Matrix<T> step_mat(1, 1, static_cast<T>(0));
    step_mat(0, 0) = static_cast<T>(store.step());
    detail::append_tensor(buf, "__optimizer.step", step_mat, {1, 1});
    for (const auto& [name, e] : store.entries()) {
        detail::append_tensor(buf, name, e.value, e.shape);
        detail::append_tensor(buf, name + "#m1", e.moment1,
                              {e.moment1.rows, e.moment1.cols});
        detail::append_tensor(buf, name + "#m2", e.moment2,
                              {e.moment2.rows, e.moment2.cols});
    }

    const std::uint64_t crc = crc64(buf.data(), buf.size());
    detail::append(buf, &crc, 8);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

// Loads into an existing store whose parameter enumeration must match the
// file's tensor names exactly. Returns the embedded config text.
template <class T>
inline std::string load_checkpoint(ParamStore<T>& store, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < 24) throw std::runtime_error("load_checkpoint: file too small");

    std::uint64_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + buf.size() - 8, 8);
    if (crc64(buf.data(), buf.size() - 8) != stored_crc)
        throw std::runtime_error("load_checkpoint: CRC mismatch");

    detail::Reader r{buf.data(), buf.data() + buf.size() - 8};
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, "SFPK", 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic");
    std::uint32_t version;
    r.read(&version, 4, "version");
    if (version != 1) throw std::runtime_error("load_checkpoint: unsupported version");
    std::uint64_t cfg_len;
    r.read(&cfg_len, 8, "config length");
    std::string config_text(cfg_len, '\0');
    r.read(config_text.data(), cfg_len, "config text");

    std::size_t loaded = 0;
    while (r.remaining() > 0) {
        std::uint32_t name_len;
        r.read(&name_len, 4, "tensor name length");
        std::string name(name_len, '\0');
        r.read(name.data(), name_len, "tensor name");
        std::uint8_t tag;
        r.read(&tag, 1, "dtype tag");
        if (tag != detail::dtype_tag<T>())
            throw std::runtime_error("load_checkpoint: dtype mismatch for " + name);
        std::uint32_t rank;
        r.read(&rank, 4, "rank");
        std::uint64_t count = 1;
        std::vector<std::uint64_t> dims(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            r.read(&dims[d], 8, "dims");
            count *= dims[d];
        }
        std::vector<T> payload(count);
        r.read(payload.data(), count * sizeof(T), "payload");

        if (name == "__optimizer.step") {
            store.set_step(static_cast<std::uint64_t>(payload[0]));
            continue;
        }
        const bool m1 = name.ends_with("#m1");
        const bool m2 = name.ends_with("#m2");
        const std::string base = (m1 || m2) ? name.substr(0, name.size() - 3) : name;
        if (!store.contains(base))
            throw std::runtime_error("load_checkpoint: unexpected tensor " + name);
        auto& e = store.at(base);
        Matrix<T>& dst = m1 ? e.moment1 : (m2 ? e.moment2 : e.value);
        if (dst.size() != count)
            throw std::runtime_error("load_checkpoint: size mismatch for " + name);
        std::copy(payload.begin(), payload.end(), dst.data.begin());
        if (!m1 && !m2) ++loaded;
    }
    if (loaded != store.entries().size())
        throw std::runtime_error("load_checkpoint: missing tensors");
    return config_text;
}

}  // namespace sfp
