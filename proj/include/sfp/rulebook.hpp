#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sfp/coords.hpp"
#include "sfp/threads.hpp"

namespace sfp {

// Execution plan of one sparse convolution: per kernel offset, the
// (input_row, output_row) pairs it contributes. Offsets are enumerated in
// (dz, dy, dx) lexicographic order; checkpoint weight layout relies on this.
struct Rulebook {
    std::int32_t kernel_size = 0;
    std::int32_t stride = 1;
    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> pairs;
    std::vector<VoxelCoord> out_coords;

    std::size_t offset_count() const { return pairs.size(); }
    std::size_t pair_count() const {
        std::size_t n = 0;
        for (const auto& p : pairs) n += p.size();
        return n;
    }
};

// Submanifold: output sites == input sites; a pair exists at offset d iff
// coordinate (site + d) is occupied. Input coordinate = output coordinate + d.
inline Rulebook build_rulebook_submanifold(const std::vector<VoxelCoord>& coords,
                                           std::int32_t kernel_size) {
    if (kernel_size <= 0 || kernel_size % 2 == 0)
        throw std::invalid_argument("submanifold rulebook requires an odd kernel size");
    const std::int32_t r = kernel_size / 2;
    const std::size_t k3 =
        static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;

    Rulebook rb;
    rb.kernel_size = kernel_size;
    rb.stride = 1;
    rb.out_coords = coords;
    rb.pairs.resize(k3);

    const CoordMap map = build_coord_map(coords);
    const std::int64_t n = static_cast<std::int64_t>(coords.size());

    parallel_for(k3, [&](std::size_t oi) {
        const std::int32_t dz = static_cast<std::int32_t>(oi / (kernel_size * kernel_size)) - r;
        const std::int32_t dy = static_cast<std::int32_t>((oi / kernel_size) % kernel_size) - r;
        const std::int32_t dx = static_cast<std::int32_t>(oi % kernel_size) - r;
        auto& list = rb.pairs[oi];
        if (dx == 0 && dy == 0 && dz == 0) {
            list.reserve(coords.size());
            for (std::int32_t j = 0; j < n; ++j) list.emplace_back(j, j);
            return;
        }
        for (std::int32_t j = 0; j < n; ++j) {
            VoxelCoord probe = coords[j];
            probe.x += dx;
            probe.y += dy;
            probe.z += dz;
            const std::int32_t i = map.find(probe);
            if (i >= 0) list.emplace_back(i, j);
        }
    });
    return rb;
}

// Strided downsampling plan: output coords are the unique floor divisions of
// the input coords by s; every input voxel pairs with its parent at the
// offset (coord - s * parent) in [0, s)^3.
inline Rulebook build_rulebook_strided(const std::vector<VoxelCoord>& coords, std::int32_t s) {
    if (s <= 1) throw std::invalid_argument("strided rulebook requires stride >= 2");

    auto floor_div = [](std::int32_t v, std::int32_t d) {
        return v >= 0 ? v / d : -((-v + d - 1) / d);
    };

    Rulebook rb;
    rb.kernel_size = s;
    rb.stride = s;
    rb.out_coords.reserve(coords.size());
    for (const VoxelCoord& c : coords)
        rb.out_coords.push_back({floor_div(c.x, s), floor_div(c.y, s), floor_div(c.z, s), c.batch});
    std::sort(rb.out_coords.begin(), rb.out_coords.end(), coord_less);
    rb.out_coords.erase(std::unique(rb.out_coords.begin(), rb.out_coords.end()),
                        rb.out_coords.end());

    const CoordMap out_map = build_coord_map(rb.out_coords);
    rb.pairs.resize(static_cast<std::size_t>(s) * s * s);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const VoxelCoord& c = coords[i];
        const VoxelCoord parent{floor_div(c.x, s), floor_div(c.y, s), floor_div(c.z, s), c.batch};
        const std::int32_t j = out_map.find(parent);
        const std::int32_t dx = c.x - parent.x * s;
        const std::int32_t dy = c.y - parent.y * s;
        const std::int32_t dz = c.z - parent.z * s;
        rb.pairs[(static_cast<std::size_t>(dz) * s + dy) * s + dx]
            .emplace_back(static_cast<std::int32_t>(i), j);
    }
    return rb;
}

enum class RulebookMode { kSubmanifold, kStrided };

inline Rulebook build_rulebook(const std::vector<VoxelCoord>& coords, std::int32_t kernel_size,
                               RulebookMode mode, std::int32_t stride = 2) {
    return mode == RulebookMode::kSubmanifold ? build_rulebook_submanifold(coords, kernel_size)
                                              : build_rulebook_strided(coords, stride);
}

template <class T>
inline Rulebook build_rulebook(const SparseTensor<T>& tensor, std::int32_t kernel_size,
                               RulebookMode mode, std::int32_t stride = 2) {
    return build_rulebook(tensor.coords, kernel_size, mode, stride);
}

template <class T>
inline Rulebook build_rulebook_submanifold(const SparseTensor<T>& tensor, std::int32_t kernel_size) {
    return build_rulebook_submanifold(tensor.coords, kernel_size);
}

template <class T>
inline Rulebook build_rulebook_strided(const SparseTensor<T>& tensor, std::int32_t s) {
    return build_rulebook_strided(tensor.coords, s);
}

}  // namespace sfp
