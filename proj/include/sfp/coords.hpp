#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "sfp/matrix.hpp"

namespace sfp {

// One occupied voxel site. Row identity inside a SparseTensor is defined by
// the (batch, z, y, x) lexicographic sort of these.
struct VoxelCoord {
    std::int32_t x = 0;
    std::int32_t y = 0;
    std::int32_t z = 0;
    std::uint32_t batch = 0;

    friend bool operator==(const VoxelCoord&, const VoxelCoord&) = default;
};

inline bool coord_less(const VoxelCoord& a, const VoxelCoord& b) {
    return std::tie(a.batch, a.z, a.y, a.x) < std::tie(b.batch, b.z, b.y, b.x);
}

inline std::uint64_t mix64(std::uint64_t h) {
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    h *= 0xc4ceb9fe1a85ec53ULL;
    h ^= h >> 33;
    return h;
}

inline std::uint64_t coord_hash(const VoxelCoord& c) {
    std::uint64_t h = mix64((std::uint64_t(c.batch) << 32) ^ std::uint32_t(c.z));
    h = mix64(h ^ ((std::uint64_t(std::uint32_t(c.y)) << 32) | std::uint32_t(c.x)));
    return h;
}

// Open-addressing coord -> row map with exact key comparison. Rulebook
// construction probes this k^3 times per site, so lookups stay allocation-free.
class CoordMap {
  public:
    explicit CoordMap(std::size_t expected = 0) {
        std::size_t cap = 16;
        while (cap < expected * 2) cap <<= 1;
        slots_.assign(cap, Slot{});
    }

    void insert(const VoxelCoord& c, std::int32_t row) {
        if ((filled_ + 1) * 2 > slots_.size()) grow();
        insert_nogrow(c, row);
    }

    // Returns -1 when the coordinate is unoccupied.
    std::int32_t find(const VoxelCoord& c) const {
        std::size_t mask = slots_.size() - 1;
        std::size_t i = coord_hash(c) & mask;
        while (true) {
            const Slot& s = slots_[i];
            if (s.row < 0) return -1;
            if (s.key == c) return s.row;
            i = (i + 1) & mask;
        }
    }

  private:
    struct Slot {
        VoxelCoord key;
        std::int32_t row = -1;
    };
    std::vector<Slot> slots_;
    std::size_t filled_ = 0;

    void insert_nogrow(const VoxelCoord& c, std::int32_t row) {
        std::size_t mask = slots_.size() - 1;
        std::size_t i = coord_hash(c) & mask;
        while (slots_[i].row >= 0) {
            if (slots_[i].key == c) {
                slots_[i].row = row;
                return;
            }
            i = (i + 1) & mask;
        }
        slots_[i] = Slot{c, row};
        ++filled_;
    }

    void grow() {
        std::vector<Slot> old = std::move(slots_);
        slots_.assign(old.size() * 2, Slot{});
        filled_ = 0;
        for (const Slot& s : old)
            if (s.row >= 0) insert_nogrow(s.key, s.row);
    }
};

inline CoordMap build_coord_map(const std::vector<VoxelCoord>& coords) {
    CoordMap map(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i)
        map.insert(coords[i], static_cast<std::int32_t>(i));
    return map;
}

// Sorted, deduplicated voxel sites with one feature row per site.
template <class T>
struct SparseTensor {
    std::vector<VoxelCoord> coords;
    Matrix<T> features;
    std::int32_t stride = 1;

    std::size_t size() const { return coords.size(); }
    std::size_t channels() const { return features.cols; }
};

inline void check_sorted_unique(const std::vector<VoxelCoord>& coords) {
    for (std::size_t i = 1; i < coords.size(); ++i) {
        if (!coord_less(coords[i - 1], coords[i]))
            throw std::invalid_argument("voxel coordinates must be sorted and unique");
    }
}

}  // namespace sfp
