#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "sfp/rulebook.hpp"
#include "sfp/voxelize.hpp"

using namespace sfp;

namespace {

std::vector<VoxelCoord> random_coords(std::mt19937_64& rng, int extent, double density) {
    std::bernoulli_distribution occ(density);
    std::vector<VoxelCoord> coords;
    for (int z = 0; z < extent; ++z)
        for (int y = 0; y < extent; ++y)
            for (int x = 0; x < extent; ++x)
                if (occ(rng)) coords.push_back({x, y, z, 0});
    if (coords.empty()) coords.push_back({0, 0, 0, 0});
    return coords;
}

}  // namespace

TEST_CASE("voxelize single point lands in voxel (0,0,0)") {
    auto [t, m] = voxelize<double>({{0.04, 0.04, 0.04, 1.0}}, 0.05);
    REQUIRE(t.size() == 1);
    CHECK(t.coords[0] == VoxelCoord{0, 0, 0, 0});
    CHECK(t.features(0, 3) == doctest::Approx(1.0));
    CHECK(m.point_to_voxel == std::vector<std::int32_t>{0});
    CHECK(m.voxel_point_count == std::vector<std::int32_t>{1});
}

TEST_CASE("voxelize splits points across the 0.05 boundary") {
    auto [t, m] = voxelize<double>({{0.04, 0.01, 0.01, 1.0}, {0.06, 0.01, 0.01, 0.5}}, 0.05);
    REQUIRE(t.size() == 2);
    CHECK(t.coords[0] == VoxelCoord{0, 0, 0, 0});
    CHECK(t.coords[1] == VoxelCoord{1, 0, 0, 0});
    CHECK(m.point_to_voxel == std::vector<std::int32_t>{0, 1});
}

TEST_CASE("voxelize averages intensity inside one voxel") {
    auto [t, m] = voxelize<double>({{0.01, 0.01, 0.01, 0.2}, {0.02, 0.02, 0.02, 0.8}}, 0.05);
    REQUIRE(t.size() == 1);
    CHECK(t.features(0, 3) == doctest::Approx(0.5));
}

TEST_CASE("voxelize offsets are relative to the voxel center in [-0.5, 0.5]") {
    // point exactly at a voxel center gives zero offsets
    auto [t, m] = voxelize<double>({{0.075, 0.075, 0.075, 0.3}}, 0.05);
    REQUIRE(t.size() == 1);
    CHECK(t.coords[0] == VoxelCoord{1, 1, 1, 0});
    for (int a = 0; a < 3; ++a) CHECK(t.features(0, a) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("voxelize rejects bad input") {
    CHECK_THROWS_AS(voxelize<double>({}, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(voxelize<double>({{0, 0, 0, 1}}, 0.0), std::invalid_argument);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(voxelize<double>({{nan, 0, 0, 1}}, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(voxelize<double>({{1e18, 0, 0, 1}}, 0.05), std::range_error);
}

TEST_CASE("voxelize is exactly invariant under input permutation") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> uni(-2.0, 2.0);
    std::vector<RawPoint> pts;
    for (int i = 0; i < 500; ++i) pts.push_back({uni(rng), uni(rng), uni(rng), uni(rng)});
    auto [a, am] = voxelize<double>(pts, 0.25);

    std::vector<RawPoint> shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto [b, bm] = voxelize<double>(shuffled, 0.25);

    CHECK(a.coords == b.coords);
    CHECK(a.features == b.features);  // bit-exact, not approximate
    CHECK(am.voxel_point_count == bm.voxel_point_count);
}

TEST_CASE("devoxelize broadcasts a voxel row to its points") {
    SparseTensor<double> t;
    t.coords = {{0, 0, 0, 0}};
    t.features = Matrix<double>(1, 1);
    t.features(0, 0) = 2.0;
    VoxelMap m;
    m.point_to_voxel = {0, 0, 0};
    m.voxel_point_count = {3};
    const Matrix<double> out = devoxelize(t, m);
    REQUIRE(out.rows == 3);
    for (int p = 0; p < 3; ++p) CHECK(out(p, 0) == 2.0);
}

TEST_CASE("devoxelize identity map keeps features") {
    auto [t, m] = voxelize<double>({{0.01, 0.01, 0.01, 0.7}, {0.06, 0.01, 0.01, 0.1}}, 0.05);
    const Matrix<double> out = devoxelize(t, m);
    CHECK(out == t.features);
}

TEST_CASE("devoxelize rejects an inconsistent map") {
    SparseTensor<double> t;
    t.coords = {{0, 0, 0, 0}};
    t.features = Matrix<double>(1, 1);
    VoxelMap empty;
    CHECK_THROWS_AS(devoxelize(t, empty), std::invalid_argument);
    VoxelMap bad;
    bad.point_to_voxel = {5};
    CHECK_THROWS_AS(devoxelize(t, bad), std::invalid_argument);
}

TEST_CASE("submanifold rulebook for two adjacent voxels has 4 pairs") {
    const std::vector<VoxelCoord> coords = {{0, 0, 0, 0}, {1, 0, 0, 0}};
    const Rulebook rb = build_rulebook_submanifold(coords, 3);
    CHECK(rb.pair_count() == 4);
    CHECK(rb.out_coords == coords);
    // center offset index for k=3 is 13
    CHECK(rb.pairs[13].size() == 2);
    // offset (+1,0,0): dz=0,dy=0,dx=+1 -> index 14; (-1,0,0) -> 12
    REQUIRE(rb.pairs[14].size() == 1);
    REQUIRE(rb.pairs[12].size() == 1);
    CHECK(rb.pairs[14][0] == std::pair<std::int32_t, std::int32_t>{1, 0});
    CHECK(rb.pairs[12][0] == std::pair<std::int32_t, std::int32_t>{0, 1});
}

TEST_CASE("single voxel k=5 rulebook has exactly the center pair") {
    const Rulebook rb = build_rulebook_submanifold({{2, 3, 4, 0}}, 5);
    CHECK(rb.offset_count() == 125);
    CHECK(rb.pair_count() == 1);
    CHECK(rb.pairs[62].size() == 1);  // center of 5^3
}

TEST_CASE("even kernel sizes are rejected in submanifold mode") {
    CHECK_THROWS_AS(build_rulebook_submanifold({{0, 0, 0, 0}}, 2), std::invalid_argument);
    CHECK_THROWS_AS(build_rulebook_submanifold({{0, 0, 0, 0}}, 0), std::invalid_argument);
}

TEST_CASE("strided(2) rulebook merges a 2x2x2 block into one parent") {
    const std::vector<VoxelCoord> coords = {{0, 0, 0, 0}, {1, 1, 1, 0}};
    const Rulebook rb = build_rulebook_strided(coords, 2);
    REQUIRE(rb.out_coords.size() == 1);
    CHECK(rb.out_coords[0] == VoxelCoord{0, 0, 0, 0});
    CHECK(rb.pair_count() == 2);
}

TEST_CASE("strided rulebook uses floor division for negatives") {
    const Rulebook rb = build_rulebook_strided({{-1, -1, -1, 0}}, 2);
    REQUIRE(rb.out_coords.size() == 1);
    CHECK(rb.out_coords[0] == VoxelCoord{-1, -1, -1, 0});
}

TEST_CASE("downsampling twice equals floor division by 4") {
    std::mt19937_64 rng(7);
    const auto coords = random_coords(rng, 9, 0.4);
    const Rulebook a = build_rulebook_strided(coords, 2);
    const Rulebook b = build_rulebook_strided(a.out_coords, 2);
    auto fd = [](std::int32_t v) { return v >= 0 ? v / 4 : -((-v + 3) / 4); };
    std::vector<VoxelCoord> expect;
    for (const VoxelCoord& c : coords) expect.push_back({fd(c.x), fd(c.y), fd(c.z), c.batch});
    std::sort(expect.begin(), expect.end(), coord_less);
    expect.erase(std::unique(expect.begin(), expect.end()), expect.end());
    CHECK(b.out_coords == expect);
}

TEST_CASE("submanifold closure: out_coords equal input coords") {
    std::mt19937_64 rng(11);
    for (int k : {3, 5, 7}) {
        const auto coords = random_coords(rng, 6, 0.5);
        const Rulebook rb = build_rulebook_submanifold(coords, k);
        CHECK(rb.out_coords == coords);
    }
}

TEST_CASE("pair symmetry: (i->j) at offset d iff (j->i) at -d") {
    std::mt19937_64 rng(13);
    const auto coords = random_coords(rng, 6, 0.5);
    const int k = 3;
    const Rulebook rb = build_rulebook_submanifold(coords, k);
    const std::size_t k3 = rb.offset_count();
    for (std::size_t d = 0; d < k3; ++d) {
        const std::size_t opp = k3 - 1 - d;  // (dz,dy,dx) -> (-dz,-dy,-dx)
        auto mirrored = rb.pairs[opp];
        for (auto& pr : mirrored) std::swap(pr.first, pr.second);
        std::sort(mirrored.begin(), mirrored.end());
        auto fwd = rb.pairs[d];
        std::sort(fwd.begin(), fwd.end());
        CHECK(fwd == mirrored);
    }
}

TEST_CASE("rulebook construction is deterministic across repeats") {
    std::mt19937_64 rng(17);
    const auto coords = random_coords(rng, 7, 0.45);
    const Rulebook a = build_rulebook_submanifold(coords, 5);
    const Rulebook b = build_rulebook_submanifold(coords, 5);
    CHECK(a.pairs == b.pairs);
    const Rulebook sa = build_rulebook_strided(coords, 2);
    const Rulebook sb = build_rulebook_strided(coords, 2);
    CHECK(sa.pairs == sb.pairs);
    CHECK(sa.out_coords == sb.out_coords);
}

TEST_CASE("batch_concat stacks per-scan tensors block-diagonally") {
    auto [a, am] = voxelize<double>({{0.01, 0.01, 0.01, 0.9}}, 0.05, 0);
    auto [b, bm] = voxelize<double>({{0.01, 0.01, 0.01, 0.4}, {0.06, 0.01, 0.01, 0.2}}, 0.05, 1);
    auto [cat, offsets] = batch_concat<double>({a, b});
    CHECK(cat.size() == 3);
    CHECK(offsets == std::vector<std::size_t>{0, 1});
    CHECK(cat.coords[0].batch == 0);
    CHECK(cat.coords[1].batch == 1);
    CHECK(cat.features(0, 3) == a.features(0, 3));
    CHECK(cat.features(1, 3) == b.features(0, 3));
}
