#pragma once

#include <deque>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "sfp/data.hpp"
#include "sfp/sfpm.hpp"

namespace sfp {

inline std::set<std::string> default_sfpm_stages(std::size_t num_down) {
    std::set<std::string> s;
    for (std::size_t i = 0; i < num_down; ++i) s.insert("down" + std::to_string(i));
    s.insert("central");
    return s;
}

// U-Net over sparse voxels: N down stages, one central stage, N up stages
// with skip connections, and a linear projection head. SFPM blocks sit in
// the configured down/central stages; decoders use basic blocks only.
struct NetworkConfig {
    double voxel_size = 0.1;
    std::vector<std::size_t> stage_channels = {32, 64, 128, 256, 256};  // downs + central
    int blocks_per_stage = 2;
    int sfp_blocks_per_stage = 1;
    std::size_t num_classes = 5;
    int focal_levels = 3;
    int base_kernel = 3;
    bool use_global_pool = true;
    std::set<std::string> sfpm_stages = default_sfpm_stages(4);
    double focal_gamma = 2.0;

    std::size_t num_down() const { return stage_channels.size() - 1; }

    ModulatorConfig modulator_for(std::size_t channels) const {
        ModulatorConfig m;
        m.channels = channels;
        m.focal_levels = focal_levels;
        m.base_kernel = base_kernel;
        m.use_global_pool = use_global_pool;
        return m;
    }

    bool stage_has_sfpm(const std::string& stage) const { return sfpm_stages.count(stage) != 0; }

    void validate() const {
        if (stage_channels.size() < 2)
            throw std::invalid_argument("NetworkConfig: need at least one down stage + central");
        if (blocks_per_stage < 1 || sfp_blocks_per_stage < 0 || num_classes < 2)
            throw std::invalid_argument("NetworkConfig: invalid stage spec");
        for (const std::string& s : sfpm_stages) {
            bool ok = s == "central";
            for (std::size_t i = 0; i < num_down(); ++i)
                ok = ok || s == ("down" + std::to_string(i));
            if (!ok) throw std::invalid_argument("NetworkConfig: unknown sfpm stage " + s);
        }
        modulator_for(stage_channels[0]).validate();
    }
};

// Geometry + rulebooks of one resolution level; owned by the forward pass so
// the tape's backward closures stay valid.
struct StageGeo {
    std::vector<VoxelCoord> coords;
    RulebookSet rbs;
    Rulebook downsample;  // unused at the central level
};

template <class T>
struct PreparedBatch {
    SparseTensor<T> tensor;                 // batched 4-channel input
    std::vector<std::int32_t> point_rows;   // global voxel row per point
    std::vector<std::size_t> point_offsets; // per-scan start into point_rows
    std::vector<std::int32_t> labels;       // concatenated, empty if unlabeled
};

// One network forward; keeps the tape plus all geometry alive for backward.
template <class T>
struct ForwardPass {
    Tape<T> tape;
    std::deque<StageGeo> stages;  // index s = resolution level s (0 = full res)
    int voxel_logits = -1;
    int point_logits = -1;
};

template <class T>
class Network {
  public:
    Network(NetworkConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
        cfg_.validate();
        build_params(seed);
    }

    const NetworkConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    PreparedBatch<T> prepare(const std::vector<ScanRecord>& scans) const {
        if (scans.empty()) throw std::invalid_argument("prepare: empty batch");
        std::vector<SparseTensor<T>> tensors;
        std::vector<VoxelMap> maps;
        for (std::size_t s = 0; s < scans.size(); ++s) {
            if (scans[s].points.empty()) throw std::invalid_argument("prepare: empty scan");
            auto [t, m] = voxelize<T>(scans[s].points, cfg_.voxel_size,
                                      static_cast<std::uint32_t>(s));
            tensors.push_back(std::move(t));
            maps.push_back(std::move(m));
        }
        auto [batched, row_offsets] = batch_concat(tensors);
        PreparedBatch<T> pb;
        pb.tensor = std::move(batched);
        for (std::size_t s = 0; s < scans.size(); ++s) {
            pb.point_offsets.push_back(pb.point_rows.size());
            for (std::int32_t r : maps[s].point_to_voxel)
                pb.point_rows.push_back(r + static_cast<std::int32_t>(row_offsets[s]));
            if (!scans[s].labels.empty())
                pb.labels.insert(pb.labels.end(), scans[s].labels.begin(), scans[s].labels.end());
        }
        pb.point_offsets.push_back(pb.point_rows.size());
        return pb;
    }

    // Records the whole voxel pipeline on pass.tape and gathers to points.
    void build_graph(ForwardPass<T>& pass, const PreparedBatch<T>& batch) {
        const std::size_t nd = cfg_.num_down();
        Tape<T>& tape = pass.tape;

        // geometry for every resolution level
        std::vector<VoxelCoord> coords = batch.tensor.coords;
        for (std::size_t s = 0; s <= nd; ++s) {
            StageGeo geo;
            geo.coords = coords;
            std::vector<int> kernels = {3};
            const std::string name = s == nd ? "central" : "down" + std::to_string(s);
            if (cfg_.stage_has_sfpm(name) && cfg_.sfp_blocks_per_stage > 0) {
                const auto ks = modulator_kernel_sizes(cfg_.modulator_for(cfg_.stage_channels[s]));
                kernels.insert(kernels.end(), ks.begin(), ks.end());
            }
            add_rulebooks(geo.rbs, geo.coords, kernels);
            if (s < nd) {
                geo.downsample = build_rulebook_strided(geo.coords, 2);
                coords = geo.downsample.out_coords;
            }
            pass.stages.push_back(std::move(geo));
        }

        int x = tape.leaf(batch.tensor.features);
        x = op_linear(tape, x, store_.use(tape, "stem.w"), store_.use(tape, "stem.b"));

        std::vector<int> skips(nd, -1);
        for (std::size_t s = 0; s < nd; ++s) {
            const std::string stage = "down" + std::to_string(s);
            x = run_stage_blocks(tape, x, stage, s, pass, /*with_sfpm=*/true);
            skips[s] = x;
            x = op_strided_downsample(tape, x,
                                      store_.use(tape, stage + ".ds.w"),
                                      store_.use(tape, stage + ".ds.b"),
                                      &pass.stages[s].downsample);
        }

        x = run_stage_blocks(tape, x, "central", nd, pass, /*with_sfpm=*/true);

        for (std::size_t s = nd; s-- > 0;) {
            const std::string stage = "up" + std::to_string(s);
            x = op_upsample_inverse(tape, x, store_.use(tape, stage + ".mix.w"),
                                    &pass.stages[s].downsample, pass.stages[s].coords.size());
            const int fused = op_concat_cols(tape, x, skips[s]);
            x = op_linear(tape, fused, store_.use(tape, stage + ".fuse.w"),
                          store_.use(tape, stage + ".fuse.b"));
            x = run_stage_blocks(tape, x, stage, s, pass, /*with_sfpm=*/false);
        }

        pass.voxel_logits =
            op_linear(tape, x, store_.use(tape, "head.w"), store_.use(tape, "head.b"));
        pass.point_logits = op_gather_rows(tape, pass.voxel_logits, batch.point_rows);
    }

    // Per-point logits for a single scan (no gradient bookkeeping kept).
    Matrix<T> forward(const ScanRecord& scan) {
        const PreparedBatch<T> batch = prepare({scan});
        ForwardPass<T> pass;
        build_graph(pass, batch);
        return pass.tape.value(pass.point_logits);
    }

    // Focal loss over the batch; populates store gradients, no update.
    T loss_and_grads(const std::vector<ScanRecord>& batch_scans) {
        const PreparedBatch<T> batch = prepare(batch_scans);
        if (batch.labels.size() != batch.point_rows.size())
            throw std::invalid_argument("loss_and_grads: batch has missing labels");
        ForwardPass<T> pass;
        build_graph(pass, batch);
        const int loss = op_focal_loss(pass.tape, pass.point_logits, batch.labels,
                                       cfg_.focal_gamma, nullptr,
                                       static_cast<std::int32_t>(kIgnoreLabel));
        const T value = pass.tape.value(loss)(0, 0);
        pass.tape.backward(loss);
        store_.collect_grads(pass.tape);
        return value;
    }

    // One optimizer step; returns the loss before the update.
    T train_step(const std::vector<ScanRecord>& batch_scans, double lr, double weight_decay,
                 double beta1 = 0.9, double beta2 = 0.999) {
        const T loss = loss_and_grads(batch_scans);
        if (std::isnan(static_cast<double>(loss)))
            throw std::runtime_error("train_step: NaN loss");
        store_.adamw_step(lr, weight_decay, beta1, beta2);
        return loss;
    }

  private:
    NetworkConfig cfg_;
    ParamStore<T> store_;

    void add_basic_block_params(const std::string& prefix, std::size_t c, std::mt19937_64& rng) {
        add_layer_norm_param(store_, prefix + ".ln", c);
        add_conv_param(store_, prefix + ".conv", 3, c, c, rng);
    }

    // basic SSCN residual block: x + SubMconv3(GeLU(LN(x)))
    int basic_block_forward(Tape<T>& tape, int x, const std::string& prefix,
                            const Rulebook* rb3) {
        int h = op_layer_norm(tape, x, store_.use(tape, prefix + ".ln.g"),
                              store_.use(tape, prefix + ".ln.b"));
        h = op_gelu(tape, h);
        h = op_submconv(tape, h, store_.use(tape, prefix + ".conv.w"),
                        store_.use(tape, prefix + ".conv.b"), rb3);
        return op_add(tape, x, h);
    }

    int run_stage_blocks(Tape<T>& tape, int x, const std::string& stage, std::size_t level,
                         ForwardPass<T>& pass, bool with_sfpm) {
        const StageGeo& geo = pass.stages[level];
        const Rulebook* rb3 = geo.rbs.get(3);
        for (int b = 0; b < cfg_.blocks_per_stage; ++b)
            x = basic_block_forward(tape, x, stage + ".block" + std::to_string(b), rb3);
        if (with_sfpm && cfg_.stage_has_sfpm(stage)) {
            const ModulatorConfig mod = cfg_.modulator_for(cfg_.stage_channels[level]);
            for (int b = 0; b < cfg_.sfp_blocks_per_stage; ++b)
                x = sfp_block_forward(tape, store_, stage + ".sfp" + std::to_string(b) + ".", mod,
                                      x, geo.coords, geo.rbs);
        }
        return x;
    }

    void build_params(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const auto& ch = cfg_.stage_channels;
        const std::size_t nd = cfg_.num_down();

        add_linear_param(store_, "stem", 4, ch[0], rng);
        for (std::size_t s = 0; s < nd; ++s) {
            const std::string stage = "down" + std::to_string(s);
            for (int b = 0; b < cfg_.blocks_per_stage; ++b)
                add_basic_block_params(stage + ".block" + std::to_string(b), ch[s], rng);
            if (cfg_.stage_has_sfpm(stage))
                for (int b = 0; b < cfg_.sfp_blocks_per_stage; ++b)
                    add_sfp_block_params(store_, stage + ".sfp" + std::to_string(b) + ".",
                                         cfg_.modulator_for(ch[s]), rng);
            add_conv_param(store_, stage + ".ds", 2, ch[s], ch[s + 1], rng);
        }
        for (int b = 0; b < cfg_.blocks_per_stage; ++b)
            add_basic_block_params("central.block" + std::to_string(b), ch[nd], rng);
        if (cfg_.stage_has_sfpm("central"))
            for (int b = 0; b < cfg_.sfp_blocks_per_stage; ++b)
                add_sfp_block_params(store_, "central.sfp" + std::to_string(b) + ".",
                                     cfg_.modulator_for(ch[nd]), rng);
        for (std::size_t s = nd; s-- > 0;) {
            const std::string stage = "up" + std::to_string(s);
            store_.add(stage + ".mix.w",
                       init_uniform_fan_in<T>(ch[s + 1], ch[s], ch[s + 1], rng));
            add_linear_param(store_, stage + ".fuse", 2 * ch[s], ch[s], rng);
            for (int b = 0; b < cfg_.blocks_per_stage; ++b)
                add_basic_block_params(stage + ".block" + std::to_string(b), ch[s], rng);
        }
        add_linear_param(store_, "head", ch[0], cfg_.num_classes, rng);
    }
};

// Row-wise argmax; ties break toward the lowest class index.
template <class T>
inline std::vector<std::int32_t> predict_labels(const Matrix<T>& logits) {
    std::vector<std::int32_t> out(logits.rows);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols; ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        out[i] = static_cast<std::int32_t>(best);
    }
    return out;
}

}  // namespace sfp
