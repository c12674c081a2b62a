#pragma once

#include <stdexcept>
#include <vector>

#include "sfp/coords.hpp"

namespace sfp {

// Dense 3D convolution over a materialized grid, evaluated only at occupied
// sites. Deliberately rulebook-free: the grid is scattered, convolved with
// plain nested loops, and read back, so it cross-checks the gather-scatter
// path. Desk-scale only (grid volume is allocated densely).
template <class T>
inline Matrix<T> dense_submconv_reference(const std::vector<VoxelCoord>& coords,
                                          const Matrix<T>& features, const Matrix<T>& weights,
                                          const Matrix<T>* bias, int kernel_size) {
    const std::size_t cin = features.cols;
    const std::size_t k3 = static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
    if (weights.rows != k3 * cin) throw std::invalid_argument("reference: weight shape mismatch");
    const std::size_t cout = weights.cols;
    const int r = kernel_size / 2;

    std::int32_t lo[3] = {INT32_MAX, INT32_MAX, INT32_MAX};
    std::int32_t hi[3] = {INT32_MIN, INT32_MIN, INT32_MIN};
    std::uint32_t max_batch = 0;
    for (const VoxelCoord& c : coords) {
        lo[0] = std::min(lo[0], c.x); hi[0] = std::max(hi[0], c.x);
        lo[1] = std::min(lo[1], c.y); hi[1] = std::max(hi[1], c.y);
        lo[2] = std::min(lo[2], c.z); hi[2] = std::max(hi[2], c.z);
        max_batch = std::max(max_batch, c.batch);
    }
    const std::size_t nx = hi[0] - lo[0] + 1, ny = hi[1] - lo[1] + 1, nz = hi[2] - lo[2] + 1;
    const std::size_t nb = max_batch + 1;
    const std::size_t cells = nb * nx * ny * nz;
    auto cell = [&](std::uint32_t b, std::int32_t x, std::int32_t y, std::int32_t z) {
        return ((static_cast<std::size_t>(b) * nz + (z - lo[2])) * ny + (y - lo[1])) * nx +
               (x - lo[0]);
    };

    std::vector<T> grid(cells * cin, T(0));
    std::vector<char> occupied(cells, 0);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const VoxelCoord& c = coords[i];
        const std::size_t idx = cell(c.batch, c.x, c.y, c.z);
        occupied[idx] = 1;
        for (std::size_t j = 0; j < cin; ++j) grid[idx * cin + j] = features(i, j);
    }

    Matrix<T> out(coords.size(), cout);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const VoxelCoord& c = coords[i];
        if (bias)
            for (std::size_t co = 0; co < cout; ++co) out(i, co) = (*bias)(0, co);
        for (int dz = -r; dz <= r; ++dz)
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    const std::int32_t px = c.x + dx, py = c.y + dy, pz = c.z + dz;
                    if (px < lo[0] || px > hi[0] || py < lo[1] || py > hi[1] || pz < lo[2] ||
                        pz > hi[2])
                        continue;
                    const std::size_t idx = cell(c.batch, px, py, pz);
                    if (!occupied[idx]) continue;
                    const std::size_t oi =
                        (static_cast<std::size_t>(dz + r) * kernel_size + (dy + r)) * kernel_size +
                        (dx + r);
                    const T* w = weights.row(oi * cin);
                    const T* in = grid.data() + idx * cin;
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t co = 0; co < cout; ++co)
                            out(i, co) += in[ci] * w[ci * cout + co];
                }
    }
    return out;
}

}  // namespace sfp
