#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "sfp/coords.hpp"

namespace sfp {

// (x, y, z, intensity) in sensor frame.
using RawPoint = std::array<double, 4>;

// Surjection from input points onto voxel rows, kept so per-voxel
// predictions can be pushed back to points.
struct VoxelMap {
    std::vector<std::int32_t> point_to_voxel;
    std::vector<std::int32_t> voxel_point_count;
};

// 4 input channels per voxel: mean offset from the voxel center (normalized
// to [-0.5, 0.5] per axis) and mean intensity. Accumulation order is fixed by
// sorting points inside each voxel, so the result is exact under any input
// permutation.
template <class T>
inline std::pair<SparseTensor<T>, VoxelMap> voxelize(const std::vector<RawPoint>& points,
                                                     double voxel_size, std::uint32_t batch = 0) {
    if (points.empty()) throw std::invalid_argument("voxelize: empty point set");
    if (!(voxel_size > 0)) throw std::invalid_argument("voxelize: voxel_size must be positive");

    const std::size_t n = points.size();
    std::vector<VoxelCoord> pt_coord(n);
    for (std::size_t p = 0; p < n; ++p) {
        for (int a = 0; a < 4; ++a)
            if (!std::isfinite(points[p][a]))
                throw std::invalid_argument("voxelize: non-finite point component");
        VoxelCoord c;
        c.batch = batch;
        const double fx = std::floor(points[p][0] / voxel_size);
        const double fy = std::floor(points[p][1] / voxel_size);
        const double fz = std::floor(points[p][2] / voxel_size);
        constexpr double kMax = 2147483647.0;
        if (std::abs(fx) > kMax || std::abs(fy) > kMax || std::abs(fz) > kMax)
            throw std::range_error("voxelize: voxel coordinate outside 32-bit range");
        c.x = static_cast<std::int32_t>(fx);
        c.y = static_cast<std::int32_t>(fy);
        c.z = static_cast<std::int32_t>(fz);
        pt_coord[p] = c;
    }

    std::vector<VoxelCoord> uniq = pt_coord;
    std::sort(uniq.begin(), uniq.end(), coord_less);
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    CoordMap map = build_coord_map(uniq);

    VoxelMap vm;
    vm.point_to_voxel.resize(n);
    vm.voxel_point_count.assign(uniq.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
        const std::int32_t row = map.find(pt_coord[p]);
        vm.point_to_voxel[p] = row;
        ++vm.voxel_point_count[row];
    }

    // Canonical per-voxel accumulation order: by point value, not input order.
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (vm.point_to_voxel[a] != vm.point_to_voxel[b])
            return vm.point_to_voxel[a] < vm.point_to_voxel[b];
        return points[a] < points[b];
    });

    SparseTensor<T> out;
    out.coords = std::move(uniq);
    out.stride = 1;
    out.features = Matrix<T>(out.coords.size(), 4);
    Matrix<double> acc(out.coords.size(), 4);
    for (std::uint32_t p : order) {
        const std::int32_t row = vm.point_to_voxel[p];
        const VoxelCoord& c = out.coords[row];
        acc(row, 0) += points[p][0] / voxel_size - (c.x + 0.5);
        acc(row, 1) += points[p][1] / voxel_size - (c.y + 0.5);
        acc(row, 2) += points[p][2] / voxel_size - (c.z + 0.5);
        acc(row, 3) += points[p][3];
    }
    for (std::size_t r = 0; r < out.coords.size(); ++r) {
        const double inv = 1.0 / vm.voxel_point_count[r];
        for (int a = 0; a < 4; ++a) out.features(r, a) = static_cast<T>(acc(r, a) * inv);
    }
    return {std::move(out), std::move(vm)};
}

// Merge per-scan tensors (already voxelized with distinct batch ids) into one
// block-diagonal batch. Returns row offsets of each input inside the result.
template <class T>
inline std::pair<SparseTensor<T>, std::vector<std::size_t>> batch_concat(
    const std::vector<SparseTensor<T>>& scans) {
    if (scans.empty()) throw std::invalid_argument("batch_concat: empty batch");
    std::size_t total = 0;
    const std::size_t c = scans[0].channels();
    for (const auto& s : scans) total += s.size();
    SparseTensor<T> out;
    out.coords.reserve(total);
    out.features = Matrix<T>(total, c);
    out.stride = scans[0].stride;
    std::vector<std::size_t> offsets;
    std::size_t row = 0;
    for (const auto& s : scans) {
        offsets.push_back(row);
        for (std::size_t i = 0; i < s.size(); ++i, ++row) {
            out.coords.push_back(s.coords[i]);
            std::copy(s.features.row(i), s.features.row(i) + c, out.features.row(row));
        }
    }
    check_sorted_unique(out.coords);
    return {std::move(out), std::move(offsets)};
}

// point p receives the feature row of its voxel.
template <class T>
inline Matrix<T> devoxelize(const SparseTensor<T>& tensor, const VoxelMap& map) {
    if (map.point_to_voxel.empty() && tensor.size() > 0)
        throw std::invalid_argument("devoxelize: empty map for non-empty tensor");
    Matrix<T> out(map.point_to_voxel.size(), tensor.channels());
    for (std::size_t p = 0; p < map.point_to_voxel.size(); ++p) {
        const std::int32_t row = map.point_to_voxel[p];
        if (row < 0 || static_cast<std::size_t>(row) >= tensor.size())
            throw std::invalid_argument("devoxelize: map row out of bounds");
        std::copy(tensor.features.row(row), tensor.features.row(row) + tensor.channels(),
                  out.row(p));
    }
    return out;
}

}  // namespace sfp
