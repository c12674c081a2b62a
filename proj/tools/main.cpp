// sfpnet command line: train/eval/gradcheck/oracle/gen-data/export-kernels/bench.
// Reports are JSON lines, one object per step or check, written to stdout or --report.

#include <chrono>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "sfp/checkpoint.hpp"
#include "sfp/config.hpp"
#include "sfp/export.hpp"
#include "sfp/gradcheck.hpp"
#include "sfp/network.hpp"
#include "sfp/reference.hpp"

using nlohmann::json;
using namespace sfp;

namespace {

struct Reporter {
    std::ofstream file;
    std::string config_hash;

    void open(const std::string& path) {
        if (path.empty()) return;
        file.open(path);
        if (!file) throw std::runtime_error("cannot open report file: " + path);
    }

    void line(const std::string& cmd, const json& step_or_case, const json& metrics) {
        const json obj = {{"cmd", cmd},
                          {"step_or_case", step_or_case},
                          {"metrics", metrics},
                          {"config_hash", config_hash}};
        (file.is_open() ? static_cast<std::ostream&>(file) : std::cout) << obj.dump() << "\n";
    }
};

std::string hash_of(const RunConfig& cfg) {
    const std::string text = cfg.serialize();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(crc64(text.data(), text.size())));
    return buf;
}

std::vector<ScanRecord> make_scans(const RunConfig& cfg, std::size_t count,
                                   std::uint64_t seed_base) {
    std::vector<ScanRecord> scans;
    const int rays = static_cast<int>(cfg.integer("data.rays"));
    for (std::size_t i = 0; i < count; ++i) {
        SceneSpec spec = make_scene(cfg.pattern_kind(), seed_base + i, rays);
        spec.noise_sigma = cfg.real("data.noise_sigma");
        scans.push_back(generate_scan(spec, seed_base + i));
    }
    return scans;
}

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

Matrix<double> randn(std::size_t r, std::size_t c, std::mt19937_64& rng, double std_dev = 1.0) {
    std::normal_distribution<double> dist(0.0, std_dev);
    Matrix<double> m(r, c);
    for (double& v : m.data) v = dist(rng);
    return m;
}

json iou_metrics(const ConfusionMatrix& cm) {
    const IouResult r = iou(cm);
    json per_class = json::array();
    for (double v : r.per_class) per_class.push_back(std::isnan(v) ? json() : json(v));
    return {{"iou_per_class", per_class}, {"miou", r.mean}};
}

template <class T>
ConfusionMatrix evaluate(Network<T>& net, const std::vector<ScanRecord>& scans,
                         std::size_t num_classes) {
    ConfusionMatrix cm(num_classes);
    for (const ScanRecord& scan : scans)
        cm.accumulate(predict_labels(net.forward(scan)), scan.labels);
    return cm;
}

template <class T>
int run_train(const RunConfig& cfg, Reporter& report) {
    const NetworkConfig nc = cfg.network_config();
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.integer("seed"));
    Network<T> net(nc, seed);

    const auto train_scans = make_scans(cfg, cfg.integer("data.train_scans"), seed * 1000 + 1);
    const auto val_scans = make_scans(cfg, cfg.integer("data.val_scans"), seed * 1000 + 500001);

    const std::uint64_t steps = cfg.integer("train.steps");
    const std::size_t batch_size = cfg.integer("train.batch_size");
    const double lr0 = cfg.real("train.lr");
    const double wd = cfg.real("train.weight_decay");
    const double power = cfg.real("train.poly_power");
    const std::uint64_t eval_every = cfg.integer("train.eval_every");

    std::mt19937_64 shuffle_rng(seed ^ 0x5eedULL);
    for (std::uint64_t t = 0; t < steps; ++t) {
        std::vector<ScanRecord> batch;
        for (std::size_t b = 0; b < batch_size; ++b)
            batch.push_back(train_scans[shuffle_rng() % train_scans.size()]);
        const double lr = poly_lr(lr0, t, steps, power);
        const T loss = net.train_step(batch, lr, wd, cfg.real("train.beta1"),
                                      cfg.real("train.beta2"));
        json metrics = {{"loss", static_cast<double>(loss)}, {"lr", lr}};
        if (eval_every > 0 && ((t + 1) % eval_every == 0 || t + 1 == steps)) {
            metrics.update(iou_metrics(evaluate(net, val_scans, nc.num_classes)));
            report.line("train", t, metrics);
        } else if (t % 10 == 0) {
            report.line("train", t, metrics);
        }
    }
    const std::string out = cfg.str("out_dir") + "/model.sfpk";
    save_checkpoint(net.params(), cfg.serialize(), out);
    report.line("train", "checkpoint", {{"path", out}});
    return 0;
}

template <class T>
int run_eval(const RunConfig& cfg, const std::string& checkpoint, Reporter& report) {
    const NetworkConfig nc = cfg.network_config();
    Network<T> net(nc, static_cast<std::uint64_t>(cfg.integer("seed")));
    if (!checkpoint.empty()) load_checkpoint(net.params(), checkpoint);
    const auto val_scans = make_scans(cfg, cfg.integer("data.val_scans"),
                                      static_cast<std::uint64_t>(cfg.integer("seed")) * 1000 + 500001);
    report.line("eval", 0, iou_metrics(evaluate(net, val_scans, nc.num_classes)));
    return 0;
}

int run_gradcheck(std::uint64_t seed, Reporter& report) {
    std::mt19937_64 rng(seed);
    const auto coords = random_coords(rng, 4, 0.5);
    const std::size_t n = coords.size();
    const Rulebook rb = build_rulebook_submanifold(coords, 3);
    const Rulebook rbs = build_rulebook_strided(coords, 2);
    std::vector<std::int32_t> labels(n);
    for (auto& l : labels) l = static_cast<std::int32_t>(rng() % 3);

    const Matrix<double> other = randn(n, 3, rng);
    const Matrix<double> convw = randn(27 * 3, 3, rng, 0.3);
    const Matrix<double> linw = randn(3, 3, rng, 0.5);
    const Matrix<double> bias3 = randn(1, 3, rng);
    const Matrix<double> gain3 = randn(1, 3, rng);
    const Matrix<double> shift3 = randn(1, 3, rng);
    const Matrix<double> dsw = randn(8 * 3, 3, rng, 0.3);
    const Matrix<double> coarse = randn(rbs.out_coords.size(), 3, rng);
    std::vector<std::int32_t> gather(5);
    for (auto& g : gather) g = static_cast<std::int32_t>(rng() % n);

    using GraphFn = std::function<int(Tape<double>&, int)>;
    auto sq = [](Tape<double>& t, int x) { return op_sum(t, op_mul(t, x, x)); };
    struct Case {
        const char* name;
        GraphFn graph;
        Matrix<double> theta;
    };
    std::vector<Case> cases;
    cases.push_back({"add", [&](Tape<double>& t, int s) { return sq(t, op_add(t, s, t.leaf(other))); },
                     randn(n, 3, rng)});
    cases.push_back({"mul", [&](Tape<double>& t, int s) { return op_sum(t, op_mul(t, s, t.leaf(other))); },
                     randn(n, 3, rng)});
    cases.push_back({"linear", [&](Tape<double>& t, int s) {
                         return sq(t, op_linear(t, s, t.leaf(linw), t.leaf(bias3)));
                     }, randn(n, 3, rng)});
    cases.push_back({"gelu", [&](Tape<double>& t, int s) { return sq(t, op_gelu(t, s)); },
                     randn(n, 3, rng)});
    cases.push_back({"layer_norm", [&](Tape<double>& t, int s) {
                         return sq(t, op_layer_norm(t, s, t.leaf(gain3), t.leaf(shift3)));
                     }, randn(n, 3, rng)});
    cases.push_back({"row_scale", [&](Tape<double>& t, int s) {
                         return sq(t, op_row_scale(t, t.leaf(other), s, 1));
                     }, randn(n, 2, rng)});
    cases.push_back({"concat_cols", [&](Tape<double>& t, int s) {
                         return sq(t, op_concat_cols(t, s, t.leaf(other)));
                     }, randn(n, 2, rng)});
    cases.push_back({"gather_rows", [&](Tape<double>& t, int s) {
                         return sq(t, op_gather_rows(t, s, gather));
                     }, randn(n, 3, rng)});
    cases.push_back({"global_avg_pool", [&](Tape<double>& t, int s) {
                         return sq(t, op_global_avg_pool(t, s, coords));
                     }, randn(n, 3, rng)});
    cases.push_back({"submconv_x", [&](Tape<double>& t, int s) {
                         return sq(t, op_submconv(t, s, t.leaf(convw), t.leaf(bias3), &rb));
                     }, randn(n, 3, rng)});
    cases.push_back({"submconv_w", [&](Tape<double>& t, int s) {
                         return sq(t, op_submconv(t, t.leaf(other), s, -1, &rb));
                     }, convw});
    cases.push_back({"strided_downsample", [&](Tape<double>& t, int s) {
                         return sq(t, op_strided_downsample(t, s, t.leaf(dsw), t.leaf(bias3), &rbs));
                     }, randn(n, 3, rng)});
    cases.push_back({"upsample_inverse", [&](Tape<double>& t, int s) {
                         return sq(t, op_upsample_inverse(t, t.leaf(coarse), s, &rbs, n));
                     }, linw});
    cases.push_back({"focal_loss", [&](Tape<double>& t, int s) {
                         return op_focal_loss(t, s, labels, 2.0);
                     }, randn(n, 3, rng)});

    bool ok = true;
    for (auto& c : cases) {
        auto loss = [&](const Matrix<double>& t) {
            Tape<double> tape;
            const int s = tape.leaf(t);
            return tape.value(c.graph(tape, s))(0, 0);
        };
        auto grad = [&](const Matrix<double>& t) {
            Tape<double> tape;
            const int s = tape.leaf(t);
            tape.backward(c.graph(tape, s));
            return tape.grad(s);
        };
        const FdReport r = finite_diff_check(loss, grad, c.theta, 1e-5, 16, rng);
        const bool pass = r.max_rel_err < 1e-4;
        ok = ok && pass;
        report.line("gradcheck", c.name,
                    {{"max_rel_err", r.max_rel_err}, {"samples", r.samples}, {"pass", pass}});
    }
    return ok ? 0 : 1;
}

int run_oracle(int cases, Reporter& report) {
    std::mt19937_64 rng(20240915);
    std::uniform_int_distribution<int> extent_d(2, 6), chan_d(1, 8), kern_d(0, 1);
    double max_diff = 0.0;
    for (int i = 0; i < cases; ++i) {
        const int extent = extent_d(rng);
        const int k = kern_d(rng) ? 5 : 3;
        const int cin = chan_d(rng), cout = chan_d(rng);
        const auto coords = random_coords(rng, extent, 0.5);
        const Matrix<double> x = randn(coords.size(), cin, rng);
        const Matrix<double> w = randn(static_cast<std::size_t>(k) * k * k * cin, cout, rng);
        const Matrix<double> b = randn(1, cout, rng);
        const Rulebook rb = build_rulebook_submanifold(coords, k);
        Tape<double> tape;
        const int y = op_submconv(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b), &rb);
        const Matrix<double> ref = dense_submconv_reference(coords, x, w, &b, k);
        double diff = 0.0;
        for (std::size_t j = 0; j < ref.size(); ++j)
            diff = std::max(diff, std::abs(tape.value(y).data[j] - ref.data[j]));
        max_diff = std::max(max_diff, diff);
    }
    const bool pass = max_diff < 1e-10;
    report.line("oracle", cases, {{"max_abs_diff", max_diff}, {"pass", pass}});
    return pass ? 0 : 1;
}

int run_gen_data(const RunConfig& cfg, const std::string& out_dir, Reporter& report) {
    const std::size_t count = cfg.integer("data.train_scans");
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.integer("seed"));
    const auto scans = make_scans(cfg, count, seed * 1000 + 1);
    for (std::size_t i = 0; i < scans.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scan_%04zu", i);
        save_scan(scans[i], out_dir + "/" + name + ".sfpc", out_dir + "/" + name + ".sfpl");
        report.line("gen-data", i,
                    {{"points", scans[i].points.size()}, {"pattern", scans[i].pattern_tag}});
    }
    return 0;
}

template <class T>
int run_export(const RunConfig& cfg, const std::string& checkpoint, const std::string& out,
               Reporter& report) {
    Network<T> net(cfg.network_config(), static_cast<std::uint64_t>(cfg.integer("seed")));
    if (!checkpoint.empty()) load_checkpoint(net.params(), checkpoint);
    const json kernels = export_level_kernels(net);
    if (out.empty()) {
        std::cout << kernels.dump(2) << "\n";
    } else {
        std::ofstream f(out);
        if (!f) throw std::runtime_error("cannot open output file: " + out);
        f << kernels.dump(2) << "\n";
    }
    report.line("export-kernels", 0, {{"entries", kernels.size()}});
    return 0;
}

int run_bench(const RunConfig& cfg, Reporter& report) {
    for (int scale : {2048, 8192, 32768}) {
        SceneSpec spec = make_scene(cfg.pattern_kind(), 1, scale);
        const ScanRecord scan = generate_scan(spec, 1);
        const double vs = cfg.real("network.voxel_size");

        auto t0 = std::chrono::steady_clock::now();
        auto [tensor, map] = voxelize<float>(scan.points, vs);
        auto t1 = std::chrono::steady_clock::now();
        const Rulebook rb = build_rulebook_submanifold(tensor.coords, 3);
        auto t2 = std::chrono::steady_clock::now();

        const std::size_t c = 32;
        std::mt19937_64 rng(1);
        Matrix<float> x(tensor.size(), c);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (float& v : x.data) v = static_cast<float>(dist(rng));
        Matrix<float> w(27 * c, c);
        for (float& v : w.data) v = static_cast<float>(dist(rng) * 0.05);
        Tape<float> tape;
        const int xs = tape.leaf(x);
        const int ws = tape.leaf(w);
        auto t3 = std::chrono::steady_clock::now();
        op_submconv(tape, xs, ws, -1, &rb);
        auto t4 = std::chrono::steady_clock::now();

        ModulatorConfig mc;
        mc.channels = c;
        RulebookSet rbs;
        add_rulebooks(rbs, tensor.coords, modulator_kernel_sizes(mc));
        ParamStore<float> store;
        add_modulator_params(store, "m.", mc, rng);
        auto t5 = std::chrono::steady_clock::now();
        sfpm_forward(tape, store, "m.", mc, xs, tensor.coords, rbs);
        auto t6 = std::chrono::steady_clock::now();

        auto rate = [&](auto a, auto b) {
            const double secs = std::chrono::duration<double>(b - a).count();
            return secs > 0 ? static_cast<double>(tensor.size()) / secs : 0.0;
        };
        report.line("bench", scale,
                    {{"voxels", tensor.size()},
                     {"voxelize_vps", static_cast<double>(scan.points.size()) /
                                          std::chrono::duration<double>(t1 - t0).count()},
                     {"rulebook_vps", rate(t1, t2)},
                     {"submconv_vps", rate(t3, t4)},
                     {"sfpm_vps", rate(t5, t6)}});
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse focal point network toolkit"};
    app.require_subcommand(1);

    std::string config_path, report_path, checkpoint_path, out_path;
    std::vector<std::string> overrides;
    std::uint64_t gradcheck_seed = 1;
    int oracle_cases = 200;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (key=value lines)");
        sub->add_option("--set", overrides, "config override key=value")->take_all();
        sub->add_option("--report", report_path, "write JSON-lines report here instead of stdout");
    };

    CLI::App* train = app.add_subcommand("train", "train on synthetic scans");
    add_common(train);
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint to load");
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    add_common(gradcheck);
    gradcheck->add_option("--seed", gradcheck_seed, "random seed");
    CLI::App* oracle = app.add_subcommand("oracle", "sparse vs dense convolution cross-check");
    add_common(oracle);
    oracle->add_option("--cases", oracle_cases, "number of random instances");
    CLI::App* gen = app.add_subcommand("gen-data", "write synthetic scans to disk");
    add_common(gen);
    gen->add_option("--out", out_path, "output directory")->required();
    CLI::App* exp = app.add_subcommand("export-kernels", "dump channel-averaged level kernels");
    add_common(exp);
    exp->add_option("--checkpoint", checkpoint_path, "checkpoint to load");
    exp->add_option("--out", out_path, "output JSON path (default stdout)");
    CLI::App* bench = app.add_subcommand("bench", "throughput at three scales");
    add_common(bench);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    try {
        const RunConfig cfg = parse_config(config_path, overrides);
        Reporter report;
        report.config_hash = hash_of(cfg);
        report.open(report_path);
        const bool f64 = cfg.str("precision") == "f64";
        if (!f64 && cfg.str("precision") != "f32")
            throw std::invalid_argument("config key precision: expected f32 or f64");

        if (train->parsed()) return f64 ? run_train<double>(cfg, report) : run_train<float>(cfg, report);
        if (eval_cmd->parsed())
            return f64 ? run_eval<double>(cfg, checkpoint_path, report)
                       : run_eval<float>(cfg, checkpoint_path, report);
        if (gradcheck->parsed()) return run_gradcheck(gradcheck_seed, report);
        if (oracle->parsed()) return run_oracle(oracle_cases, report);
        if (gen->parsed()) return run_gen_data(cfg, out_path, report);
        if (exp->parsed())
            return f64 ? run_export<double>(cfg, checkpoint_path, out_path, report)
                       : run_export<float>(cfg, checkpoint_path, out_path, report);
        if (bench->parsed()) return run_bench(cfg, report);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
