#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <random>

#include "sfp/checkpoint.hpp"
#include "sfp/config.hpp"
#include "sfp/gradcheck.hpp"
#include "sfp/network.hpp"

using namespace sfp;

namespace {

NetworkConfig tiny_config() {
    NetworkConfig cfg;
    cfg.voxel_size = 0.25;
    cfg.stage_channels = {8, 16, 16};
    cfg.blocks_per_stage = 1;
    cfg.sfp_blocks_per_stage = 1;
    cfg.num_classes = 5;
    cfg.sfpm_stages = default_sfpm_stages(cfg.num_down());
    return cfg;
}

// Points snapped to a dyadic 1/32 m lattice: shifts by multiples of the
// (power-of-two) voxel size are then exact in floating point, so translation
// tests can demand bit equality.
ScanRecord snapped_scan(std::uint64_t seed, std::size_t n_points = 300) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> cell(-160, 160);
    std::uniform_real_distribution<double> inten(0.0, 1.0);
    std::uniform_int_distribution<int> lab(0, 4);
    ScanRecord scan;
    scan.seed = seed;
    scan.pattern_tag = "synthetic";
    for (std::size_t i = 0; i < n_points; ++i) {
        scan.points.push_back({cell(rng) / 32.0, cell(rng) / 32.0, cell(rng) / 32.0, inten(rng)});
        scan.labels.push_back(lab(rng));
    }
    return scan;
}

ScanRecord shifted(const ScanRecord& scan, double dx, double dy, double dz) {
    ScanRecord out = scan;
    for (RawPoint& p : out.points) {
        p[0] += dx;
        p[1] += dy;
        p[2] += dz;
    }
    return out;
}

std::string temp_path(const char* name) {
    return std::string("/tmp/") + name + "." + std::to_string(::getpid());
}

}  // namespace

TEST_CASE("network build is deterministic") {
    const NetworkConfig cfg = tiny_config();
    Network<float> a(cfg, 42), b(cfg, 42);
    CHECK(a.params().parameter_count() == b.params().parameter_count());
    CHECK(a.params().parameter_count() > 0);
    auto it = b.params().entries().begin();
    for (const auto& [name, e] : a.params().entries()) {
        CHECK(name == it->first);
        CHECK(e.value == it->second.value);
        ++it;
    }
    Network<float> c(cfg, 43);
    CHECK(c.params().parameter_count() == a.params().parameter_count());
}

TEST_CASE("config validation rejects bad stage specs") {
    NetworkConfig cfg = tiny_config();
    cfg.stage_channels = {8};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.sfpm_stages = {"down9"};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.num_classes = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("all four ablation topologies build and run one train step") {
    const ScanRecord scan = snapped_scan(1);
    // basic blocks only; L=2 with pooling; L=3 with pooling; L=3 without pooling
    struct Row {
        std::set<std::string> stages;
        int levels;
        bool pool;
    };
    const NetworkConfig base = tiny_config();
    const std::vector<Row> rows = {
        {{}, 3, true},
        {default_sfpm_stages(base.num_down()), 2, true},
        {default_sfpm_stages(base.num_down()), 3, true},
        {default_sfpm_stages(base.num_down()), 3, false},
    };
    for (const Row& row : rows) {
        NetworkConfig cfg = base;
        cfg.sfpm_stages = row.stages;
        cfg.focal_levels = row.levels;
        cfg.use_global_pool = row.pool;
        Network<float> net(cfg, 7);
        const float loss = net.train_step({scan}, 1e-3, 0.01);
        CHECK(std::isfinite(loss));
        CHECK(loss > 0.0f);
    }
}

TEST_CASE("basic-only ablation has no modulator parameters") {
    NetworkConfig cfg = tiny_config();
    cfg.sfpm_stages.clear();
    Network<float> net(cfg, 1);
    for (const auto& [name, e] : net.params().entries())
        CHECK(name.find("sfpm") == std::string::npos);
}

TEST_CASE("forward output is points x classes") {
    Network<float> net(tiny_config(), 3);
    const ScanRecord scan = snapped_scan(2, 257);
    const Matrix<float> logits = net.forward(scan);
    CHECK(logits.rows == scan.points.size());
    CHECK(logits.cols == 5);
}

TEST_CASE("two identical scans in one batch get identical per-point logits") {
    Network<float> net(tiny_config(), 5);
    const ScanRecord scan = snapped_scan(3, 200);
    const auto batch = net.prepare({scan, scan});
    ForwardPass<float> pass;
    net.build_graph(pass, batch);
    const Matrix<float>& logits = pass.tape.value(pass.point_logits);
    REQUIRE(logits.rows == 2 * scan.points.size());
    for (std::size_t p = 0; p < scan.points.size(); ++p)
        for (std::size_t j = 0; j < logits.cols; ++j)
            CHECK(logits(p, j) == logits(scan.points.size() + p, j));
}

TEST_CASE("logits are bit-identical under stride-aligned translation") {
    // the stride-2 downsamples quantize coords, so the whole network is
    // invariant to shifts by multiples of the total stride (4 voxels here)
    Network<float> net(tiny_config(), 11);
    for (std::uint64_t s = 0; s < 5; ++s) {
        const ScanRecord scan = snapped_scan(100 + s, 250);
        const Matrix<float> a = net.forward(scan);
        const Matrix<float> b = net.forward(shifted(scan, 8 * 0.25, 4 * 0.25, -12 * 0.25));
        CHECK(a == b);
    }
}

TEST_CASE("ten-step loss trace is bit-identical across reruns") {
    const ScanRecord scan = snapped_scan(4, 200);
    auto trace = [&] {
        Network<float> net(tiny_config(), 9);
        std::vector<float> losses;
        for (int t = 0; t < 10; ++t) losses.push_back(net.train_step({scan}, 1e-3, 0.01));
        return losses;
    };
    CHECK(trace() == trace());
}

TEST_CASE("two steps on a fixed tiny batch: loss non-increasing in >= 95 of 100 seeds") {
    const ScanRecord scan = snapped_scan(5, 150);
    int ok = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        Network<float> net(tiny_config(), seed);
        const float l0 = net.train_step({scan}, 8e-4, 0.0);
        const float l1 = net.train_step({scan}, 8e-4, 0.0);
        if (l1 <= l0) ++ok;
    }
    CHECK(ok >= 95);
}

TEST_CASE("predict_labels argmax and tie rules") {
    Matrix<float> logits(3, 2);
    logits(0, 0) = 0.1f;
    logits(0, 1) = 0.9f;
    logits(1, 0) = 0.5f;
    logits(1, 1) = 0.5f;
    logits(2, 0) = -1.0f;
    logits(2, 1) = -2.0f;
    CHECK(predict_labels(logits) == std::vector<std::int32_t>{1, 0, 0});
    // shift invariance per row
    for (std::size_t j = 0; j < 2; ++j) logits(0, j) += 100.0f;
    CHECK(predict_labels(logits)[0] == 1);
}

TEST_CASE("checkpoint roundtrip restores bit-identical forward and state") {
    const std::string path = temp_path("ckpt_roundtrip");
    const ScanRecord scan = snapped_scan(6, 200);
    RunConfig rc;
    const NetworkConfig cfg = tiny_config();

    Network<float> net(cfg, 21);
    net.train_step({scan}, 1e-3, 0.01);
    net.train_step({scan}, 1e-3, 0.01);
    const Matrix<float> before = net.forward(scan);
    save_checkpoint(net.params(), rc.serialize(), path);

    Network<float> restored(cfg, 999);  // different init, fully overwritten by load
    const std::string cfg_text = load_checkpoint(restored.params(), path);
    CHECK(cfg_text == rc.serialize());
    CHECK(restored.params().step() == 2);
    CHECK(restored.forward(scan) == before);

    auto& a = net.params().entries();
    auto it = restored.params().entries().begin();
    for (const auto& [name, e] : a) {
        CHECK(e.value == it->second.value);
        CHECK(e.moment1 == it->second.moment1);
        CHECK(e.moment2 == it->second.moment2);
        ++it;
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint files are bit-identical across reruns") {
    const std::string p1 = temp_path("ckpt_a"), p2 = temp_path("ckpt_b");
    const ScanRecord scan = snapped_scan(7, 150);
    RunConfig rc;
    for (const std::string& p : {p1, p2}) {
        Network<float> net(tiny_config(), 33);
        net.train_step({scan}, 1e-3, 0.01);
        save_checkpoint(net.params(), rc.serialize(), p);
    }
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("whole-network gradient check on a 30-voxel scene") {
    NetworkConfig cfg = tiny_config();
    cfg.stage_channels = {4, 6, 6};
    cfg.sfpm_stages = default_sfpm_stages(cfg.num_down());
    Network<double> net(cfg, 55);

    // about 30 occupied voxels
    std::mt19937_64 rng(8);
    ScanRecord scan;
    std::uniform_int_distribution<int> cell(-8, 8);
    std::uniform_real_distribution<double> inten(0.0, 1.0);
    while (true) {
        scan.points.clear();
        scan.labels.clear();
        for (int i = 0; i < 40; ++i) {
            scan.points.push_back({cell(rng) / 8.0, cell(rng) / 8.0, cell(rng) / 8.0, inten(rng)});
            scan.labels.push_back(static_cast<std::int32_t>(rng() % 5));
        }
        const auto [t, m] = voxelize<double>(scan.points, cfg.voxel_size);
        if (t.size() >= 28 && t.size() <= 34) break;
    }

    auto eval = [&](const std::string& pname, const Matrix<double>& t) {
        net.params().at(pname).value = t;
        const double loss = net.loss_and_grads({scan});
        net.params().zero_grads();
        return loss;
    };
    for (const std::string pname :
         {"stem.w", "down0.sfp0.sfpm.level1.w", "down0.sfp0.sfpm.gate.w", "down0.ds.w",
          "central.sfp0.sfpm.mixer.w", "up0.mix.w", "up0.fuse.w", "head.w"}) {
        const Matrix<double> theta = net.params().at(pname).value;
        auto loss = [&](const Matrix<double>& t) { return eval(pname, t); };
        auto grad = [&](const Matrix<double>& t) {
            net.params().at(pname).value = t;
            net.params().zero_grads();
            net.loss_and_grads({scan});
            return net.params().at(pname).grad;
        };
        std::mt19937_64 pick_rng(pname.size());
        const FdReport r = finite_diff_check(loss, grad, theta, 1e-5, 10, pick_rng);
        INFO("parameter " << pname);
        CHECK(r.max_rel_err < 1e-3);
        net.params().at(pname).value = theta;
        net.params().zero_grads();
    }
}

TEST_CASE("loss on near-perfect logits vanishes") {
    Tape<double> tape;
    Matrix<double> z(4, 3, 0.0);
    const std::vector<std::int32_t> labels = {0, 1, 2, 1};
    for (std::size_t i = 0; i < 4; ++i) z(i, labels[i]) = 80.0;
    const int loss = op_focal_loss(tape, tape.leaf(z), labels, 2.0);
    CHECK(std::abs(tape.value(loss)(0, 0)) < 1e-9);
}

TEST_CASE("empty batches and scans are rejected") {
    Network<float> net(tiny_config(), 1);
    CHECK_THROWS_AS(net.prepare({}), std::invalid_argument);
    ScanRecord empty;
    CHECK_THROWS_AS(net.prepare({empty}), std::invalid_argument);
    ScanRecord unlabeled = snapped_scan(9, 50);
    unlabeled.labels.clear();
    CHECK_THROWS_AS(net.loss_and_grads({unlabeled}), std::invalid_argument);
}
