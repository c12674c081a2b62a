#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "sfp/voxelize.hpp"

namespace sfp {

// ---------------------------------------------------------------------------
// Scan records

constexpr std::int32_t kIgnoreLabel = 255;

struct ScanRecord {
    std::vector<RawPoint> points;           // x, y, z [m], intensity [0,1]
    std::vector<std::int32_t> labels;       // class ids, kIgnoreLabel allowed
    std::string pattern_tag;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Scene primitives and sensor patterns

struct Primitive {
    enum class Kind { kGroundPlane, kBox, kPole, kWall };
    Kind kind = Kind::kGroundPlane;
    std::int32_t class_id = 0;
    double height = 0.0;                          // ground plane z
    std::array<double, 3> bmin{}, bmax{};         // box / wall extents
    std::array<double, 2> center{};               // pole axis (x, y)
    double radius = 0.1, zmin = 0.0, zmax = 3.0;  // pole
};

struct SpinningPattern {
    int rings = 32;
    int azimuth_steps = 1024;
    double elev_min = -25.0 * M_PI / 180.0;
    double elev_max = 15.0 * M_PI / 180.0;
};

struct SolidStatePattern {
    double h_fov = 70.0 * M_PI / 180.0;
    double v_fov = 25.0 * M_PI / 180.0;
    int raster_w = 128;
    int raster_h = 64;
};

// Rosette built from two incommensurate angular frequencies; successive seeds
// shift the phase so consecutive frames cover different directions.
struct HybridSolidPattern {
    int petals = 7;
    int samples = 8192;
    double elev_min = -20.0 * M_PI / 180.0;
    double elev_max = 40.0 * M_PI / 180.0;
};

using SensorPattern = std::variant<SpinningPattern, SolidStatePattern, HybridSolidPattern>;

struct SceneSpec {
    std::vector<Primitive> primitives;
    SensorPattern pattern = SpinningPattern{};
    double max_range = 60.0;
    double noise_sigma = 0.01;
    std::array<double, 3> origin{0.0, 0.0, 1.2};
};

namespace detail {

inline std::vector<std::array<double, 3>> pattern_directions(const SensorPattern& pattern,
                                                             std::uint64_t seed) {
    std::vector<std::array<double, 3>> dirs;
    if (const auto* sp = std::get_if<SpinningPattern>(&pattern)) {
        dirs.reserve(static_cast<std::size_t>(sp->rings) * sp->azimuth_steps);
        for (int r = 0; r < sp->rings; ++r) {
            const double e = sp->rings == 1
                                 ? sp->elev_min
                                 : sp->elev_min + (sp->elev_max - sp->elev_min) * r / (sp->rings - 1);
            for (int a = 0; a < sp->azimuth_steps; ++a) {
                const double az = 2.0 * M_PI * a / sp->azimuth_steps;
                dirs.push_back({std::cos(e) * std::cos(az), std::cos(e) * std::sin(az), std::sin(e)});
            }
        }
    } else if (const auto* ss = std::get_if<SolidStatePattern>(&pattern)) {
        dirs.reserve(static_cast<std::size_t>(ss->raster_w) * ss->raster_h);
        for (int v = 0; v < ss->raster_h; ++v) {
            const double e = ss->raster_h == 1 ? 0.0 : -ss->v_fov / 2 + ss->v_fov * v / (ss->raster_h - 1);
            for (int h = 0; h < ss->raster_w; ++h) {
                const double az =
                    ss->raster_w == 1 ? 0.0 : -ss->h_fov / 2 + ss->h_fov * h / (ss->raster_w - 1);
                dirs.push_back({std::cos(e) * std::cos(az), std::cos(e) * std::sin(az), std::sin(e)});
            }
        }
    } else {
        const auto& hs = std::get<HybridSolidPattern>(pattern);
        std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 1);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        const double phase_az = uni(rng);
        const double phase_el = uni(rng);
        const double golden = 0.6180339887498949;
        dirs.reserve(hs.samples);
        for (int t = 0; t < hs.samples; ++t) {
            const double az = 2.0 * M_PI * std::fmod(t * golden + phase_az, 1.0);
            const double u =
                0.5 + 0.5 * std::sin(2.0 * M_PI * (t * hs.petals * M_SQRT2 / hs.samples + phase_el));
            const double e = hs.elev_min + (hs.elev_max - hs.elev_min) * u;
            dirs.push_back({std::cos(e) * std::cos(az), std::cos(e) * std::sin(az), std::sin(e)});
        }
    }
    return dirs;
}

inline bool ray_box(const std::array<double, 3>& o, const std::array<double, 3>& d,
                    const std::array<double, 3>& bmin, const std::array<double, 3>& bmax,
                    double& t_hit) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (std::abs(d[a]) < 1e-12) {
            if (o[a] < bmin[a] || o[a] > bmax[a]) return false;
            continue;
        }
        double ta = (bmin[a] - o[a]) / d[a];
        double tb = (bmax[a] - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    if (t0 <= 1e-9) return false;
    t_hit = t0;
    return true;
}

inline bool ray_primitive(const Primitive& p, const std::array<double, 3>& o,
                          const std::array<double, 3>& d, double& t_hit) {
    switch (p.kind) {
        case Primitive::Kind::kGroundPlane: {
            if (std::abs(d[2]) < 1e-12) return false;
            const double t = (p.height - o[2]) / d[2];
            if (t <= 1e-9) return false;
            t_hit = t;
            return true;
        }
        case Primitive::Kind::kBox:
        case Primitive::Kind::kWall:
            return ray_box(o, d, p.bmin, p.bmax, t_hit);
        case Primitive::Kind::kPole: {
            const double ox = o[0] - p.center[0], oy = o[1] - p.center[1];
            const double a = d[0] * d[0] + d[1] * d[1];
            if (a < 1e-12) return false;
            const double b = 2.0 * (ox * d[0] + oy * d[1]);
            const double c = ox * ox + oy * oy - p.radius * p.radius;
            const double disc = b * b - 4 * a * c;
            if (disc < 0) return false;
            const double sq = std::sqrt(disc);
            for (double t : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
                if (t <= 1e-9) continue;
                const double z = o[2] + t * d[2];
                if (z >= p.zmin && z <= p.zmax) {
                    t_hit = t;
                    return true;
                }
            }
            return false;
        }
    }
    return false;
}

}  // namespace detail

// Distance from a point to the surface/volume of a primitive; used by the
// label-consistency oracle.
inline double distance_to_primitive(const Primitive& p, const std::array<double, 3>& q) {
    switch (p.kind) {
        case Primitive::Kind::kGroundPlane:
            return std::abs(q[2] - p.height);
        case Primitive::Kind::kBox:
        case Primitive::Kind::kWall: {
            double d2 = 0;
            for (int a = 0; a < 3; ++a) {
                const double d = std::max({p.bmin[a] - q[a], 0.0, q[a] - p.bmax[a]});
                d2 += d * d;
            }
            return std::sqrt(d2);
        }
        case Primitive::Kind::kPole: {
            const double r = std::hypot(q[0] - p.center[0], q[1] - p.center[1]);
            const double dr = std::abs(r - p.radius);
            const double dz = std::max({p.zmin - q[2], 0.0, q[2] - p.zmax});
            return std::hypot(dr, dz);
        }
    }
    return std::numeric_limits<double>::infinity();
}

// Ray-casts the sensor pattern against the scene. First hit wins; per-point
// label is the hit primitive's class; Gaussian range noise is added along the
// ray. Intensity is a class-dependent constant plus noise.
inline ScanRecord generate_scan(const SceneSpec& spec, std::uint64_t seed) {
    if (spec.primitives.empty()) throw std::invalid_argument("generate_scan: no primitives");
    if (!(spec.max_range > 0)) throw std::invalid_argument("generate_scan: max_range must be positive");

    const auto dirs = detail::pattern_directions(spec.pattern, seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    std::normal_distribution<double> inoise(0.0, 0.02);

    ScanRecord scan;
    scan.seed = seed;
    scan.pattern_tag = std::holds_alternative<SpinningPattern>(spec.pattern)      ? "spinning"
                       : std::holds_alternative<SolidStatePattern>(spec.pattern) ? "solid_state"
                                                                                 : "hybrid_solid";
    for (const auto& d : dirs) {
        double best_t = std::numeric_limits<double>::infinity();
        const Primitive* best = nullptr;
        for (const Primitive& p : spec.primitives) {
            double t;
            if (detail::ray_primitive(p, spec.origin, d, t) && t < best_t) {
                best_t = t;
                best = &p;
            }
        }
        // draw the noise pair even on a miss so the stream stays aligned
        const double rn = noise(rng);
        const double in = inoise(rng);
        if (best == nullptr || best_t > spec.max_range) continue;
        const double t = best_t + rn;
        const double base = 0.2 + 0.15 * (best->class_id % 5);
        scan.points.push_back({spec.origin[0] + t * d[0], spec.origin[1] + t * d[1],
                               spec.origin[2] + t * d[2], std::clamp(base + in, 0.0, 1.0)});
        scan.labels.push_back(best->class_id);
    }
    if (scan.points.empty()) throw std::runtime_error("generate_scan: no primitive hit by any ray");
    return scan;
}

enum class PatternKind { kSpinning, kSolidState, kHybridSolid };

// 5-class synthetic scene: ground (0), wall (1), pole (2), box (3), and a
// thin fence-like plane (4). variant_seed jitters poses between scenes.
inline SceneSpec make_scene(PatternKind kind, std::uint64_t variant_seed,
                            int hybrid_samples = 8192) {
    std::mt19937_64 rng(variant_seed ^ 0xabcdef1234567890ULL);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);

    SceneSpec spec;
    spec.primitives.push_back({Primitive::Kind::kGroundPlane, 0, 0.0});

    Primitive wall;
    wall.kind = Primitive::Kind::kWall;
    wall.class_id = 1;
    const double wx = 8.0 + 2.0 * uni(rng);
    wall.bmin = {wx, -10.0, 0.0};
    wall.bmax = {wx + 0.3, 10.0, 3.5};
    spec.primitives.push_back(wall);

    Primitive pole;
    pole.kind = Primitive::Kind::kPole;
    pole.class_id = 2;
    pole.center = {3.0 + uni(rng), 2.0 + 1.5 * uni(rng)};
    pole.radius = 0.15;
    pole.zmin = 0.0;
    pole.zmax = 4.0;
    spec.primitives.push_back(pole);

    Primitive box;
    box.kind = Primitive::Kind::kBox;
    box.class_id = 3;
    const double bx = 4.0 + 1.5 * uni(rng), by = -3.0 + 1.5 * uni(rng);
    box.bmin = {bx, by, 0.0};
    box.bmax = {bx + 1.5, by + 1.2, 1.4};
    spec.primitives.push_back(box);

    Primitive fence;
    fence.kind = Primitive::Kind::kWall;
    fence.class_id = 4;
    const double fy = 5.0 + uni(rng);
    fence.bmin = {-6.0, fy, 0.0};
    fence.bmax = {6.0, fy + 0.1, 1.6};
    spec.primitives.push_back(fence);

    switch (kind) {
        case PatternKind::kSpinning:
            spec.pattern = SpinningPattern{32, 512};
            break;
        case PatternKind::kSolidState:
            spec.pattern = SolidStatePattern{};
            break;
        case PatternKind::kHybridSolid: {
            HybridSolidPattern hs;
            hs.samples = hybrid_samples;
            spec.pattern = hs;
            break;
        }
    }
    spec.max_range = 40.0;
    return spec;
}

// ---------------------------------------------------------------------------
// Scan file IO
//
// Point file: magic "SFPC", u32 version=1, u64 count, count * 4 float32
// (x, y, z, intensity), little-endian. Label file: magic "SFPL", u32
// version=1, u64 count, count * u32 (low 16 bits class, 0xFFFF = ignore).

namespace detail {

inline void write_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::ifstream& f, void* p, std::size_t n, const char* what) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(f.gcount()) != n)
        throw std::runtime_error(std::string("scan file truncated: ") + what);
}

}  // namespace detail

inline void save_scan(const ScanRecord& scan, const std::string& points_path,
                      const std::string& labels_path) {
    if (scan.points.empty()) throw std::invalid_argument("save_scan: empty scan");
    if (scan.labels.size() != scan.points.size())
        throw std::invalid_argument("save_scan: label/point count mismatch");
    {
        std::ofstream f(points_path, std::ios::binary);
        if (!f) throw std::runtime_error("save_scan: cannot open " + points_path);
        detail::write_bytes(f, "SFPC", 4);
        const std::uint32_t version = 1;
        detail::write_bytes(f, &version, 4);
        const std::uint64_t count = scan.points.size();
        detail::write_bytes(f, &count, 8);
        for (const RawPoint& p : scan.points) {
            const float v[4] = {static_cast<float>(p[0]), static_cast<float>(p[1]),
                                static_cast<float>(p[2]), static_cast<float>(p[3])};
            detail::write_bytes(f, v, 16);
        }
    }
    {
        std::ofstream f(labels_path, std::ios::binary);
        if (!f) throw std::runtime_error("save_scan: cannot open " + labels_path);
        detail::write_bytes(f, "SFPL", 4);
        const std::uint32_t version = 1;
        detail::write_bytes(f, &version, 4);
        const std::uint64_t count = scan.labels.size();
        detail::write_bytes(f, &count, 8);
        for (std::int32_t l : scan.labels) {
            const std::uint32_t v = l == kIgnoreLabel ? 0xFFFFu : (static_cast<std::uint32_t>(l) & 0xFFFFu);
            detail::write_bytes(f, &v, 4);
        }
    }
}

inline ScanRecord load_scan(const std::string& points_path, const std::string& labels_path) {
    ScanRecord scan;
    {
        std::ifstream f(points_path, std::ios::binary);
        if (!f) throw std::runtime_error("load_scan: cannot open " + points_path);
        char magic[4];
        detail::read_bytes(f, magic, 4, "point magic");
        if (std::memcmp(magic, "SFPC", 4) != 0)
            throw std::runtime_error("load_scan: bad point file magic");
        std::uint32_t version;
        detail::read_bytes(f, &version, 4, "point version");
        if (version != 1) throw std::runtime_error("load_scan: unsupported point file version");
        std::uint64_t count;
        detail::read_bytes(f, &count, 8, "point count");
        if (count == 0) throw std::runtime_error("load_scan: empty point file");
        scan.points.resize(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            float v[4];
            detail::read_bytes(f, v, 16, "point payload");
            scan.points[i] = {v[0], v[1], v[2], v[3]};
        }
    }
    {
        std::ifstream f(labels_path, std::ios::binary);
        if (!f) throw std::runtime_error("load_scan: cannot open " + labels_path);
        char magic[4];
        detail::read_bytes(f, magic, 4, "label magic");
        if (std::memcmp(magic, "SFPL", 4) != 0)
            throw std::runtime_error("load_scan: bad label file magic");
        std::uint32_t version;
        detail::read_bytes(f, &version, 4, "label version");
        if (version != 1) throw std::runtime_error("load_scan: unsupported label file version");
        std::uint64_t count;
        detail::read_bytes(f, &count, 8, "label count");
        if (count != scan.points.size())
            throw std::runtime_error("load_scan: label count does not match point count");
        scan.labels.resize(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            std::uint32_t v;
            detail::read_bytes(f, &v, 4, "label payload");
            const std::uint32_t cls = v & 0xFFFFu;
            scan.labels[i] = cls == 0xFFFFu ? kIgnoreLabel : static_cast<std::int32_t>(cls);
        }
    }
    return scan;
}

// ---------------------------------------------------------------------------
// Segmentation metrics

struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::uint64_t> counts;  // rows = ground truth

    explicit ConfusionMatrix(std::size_t k = 0) : num_classes(k), counts(k * k, 0) {}

    std::uint64_t& at(std::size_t truth, std::size_t pred) {
        return counts[truth * num_classes + pred];
    }
    std::uint64_t at(std::size_t truth, std::size_t pred) const {
        return counts[truth * num_classes + pred];
    }

    void accumulate(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth) {
        if (pred.size() != truth.size())
            throw std::invalid_argument("accumulate: size mismatch");
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (truth[i] == kIgnoreLabel) continue;
            if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= num_classes ||
                pred[i] < 0 || static_cast<std::size_t>(pred[i]) >= num_classes)
                throw std::invalid_argument("accumulate: label out of range");
            ++at(truth[i], pred[i]);
        }
    }

    void merge(const ConfusionMatrix& o) {
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    }
};

struct IouResult {
    std::vector<double> per_class;  // NaN for classes absent from pred and truth
    double mean = 0.0;
};

// IoU_k = TP / (TP + FP + FN); classes with empty union are excluded from the mean.
inline IouResult iou(const ConfusionMatrix& cm) {
    IouResult r;
    r.per_class.assign(cm.num_classes, std::numeric_limits<double>::quiet_NaN());
    double sum = 0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < cm.num_classes; ++k) {
        const std::uint64_t tp = cm.at(k, k);
        std::uint64_t fp = 0, fn = 0;
        for (std::size_t j = 0; j < cm.num_classes; ++j) {
            if (j == k) continue;
            fn += cm.at(k, j);
            fp += cm.at(j, k);
        }
        if (tp + fp + fn == 0) continue;
        r.per_class[k] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        sum += r.per_class[k];
        ++present;
    }
    r.mean = present ? sum / static_cast<double>(present) : 0.0;
    return r;
}

}  // namespace sfp
