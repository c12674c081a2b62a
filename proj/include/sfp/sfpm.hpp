#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "sfp/ops.hpp"

namespace sfp {

// Configuration of one sparse focal point modulation instance.
struct ModulatorConfig {
    std::size_t channels = 32;
    int focal_levels = 3;      // L >= 1
    int base_kernel = 3;       // k^1, odd >= 3; k^l = k^{l-1} + 2
    bool use_global_pool = true;

    void validate() const {
        if (focal_levels < 1) throw std::invalid_argument("ModulatorConfig: focal_levels >= 1");
        if (base_kernel < 3 || base_kernel % 2 == 0)
            throw std::invalid_argument("ModulatorConfig: base_kernel must be odd >= 3");
    }

    // 1-based level index
    int kernel_size(int level) const { return base_kernel + 2 * (level - 1); }

    // RF^l = 1 + sum_{i=1..l} (k^i - 1). The growth-rule sum is read with a
    // per-level index; see receptive_field_last_term for the alternate
    // constant-k^l reading (not used by the contexts themselves).
    int receptive_field(int level) const {
        int rf = 1;
        for (int i = 1; i <= level; ++i) rf += kernel_size(i) - 1;
        return rf;
    }
    int receptive_field_last_term(int level) const { return 1 + level * (kernel_size(level) - 1); }

    std::size_t gate_width() const {
        return static_cast<std::size_t>(focal_levels) + (use_global_pool ? 1 : 0);
    }
    std::size_t level_count() const { return gate_width(); }
};

// Submanifold rulebooks for one coordinate set, keyed by kernel size. Stored
// in a map so addresses stay stable for the lifetime of a forward pass.
struct RulebookSet {
    std::map<int, Rulebook> by_kernel;

    const Rulebook* get(int kernel_size) const {
        auto it = by_kernel.find(kernel_size);
        if (it == by_kernel.end())
            throw std::invalid_argument("RulebookSet: missing rulebook for kernel size " +
                                        std::to_string(kernel_size));
        return &it->second;
    }
};

inline void add_rulebooks(RulebookSet& set, const std::vector<VoxelCoord>& coords,
                          const std::vector<int>& kernel_sizes) {
    for (int k : kernel_sizes)
        if (!set.by_kernel.count(k)) set.by_kernel.emplace(k, build_rulebook_submanifold(coords, k));
}

// ---------------------------------------------------------------------------
// Parameter initialization helpers

template <class T>
inline Matrix<T> init_uniform_fan_in(std::size_t rows, std::size_t cols, std::size_t fan_in,
                                     std::mt19937_64& rng) {
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<T> m(rows, cols);
    for (T& v : m.data) v = static_cast<T>(dist(rng));
    return m;
}

template <class T>
inline Matrix<T> init_normal(std::size_t rows, std::size_t cols, double std_dev,
                             std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std_dev);
    Matrix<T> m(rows, cols);
    for (T& v : m.data) v = static_cast<T>(dist(rng));
    return m;
}

// Conv weight table: (k^3 * C_in) x C_out, offset slices in (dz,dy,dx) order.
template <class T>
inline void add_conv_param(ParamStore<T>& store, const std::string& name, int kernel_size,
                           std::size_t cin, std::size_t cout, std::mt19937_64& rng,
                           bool bias = true) {
    const std::size_t k3 = static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
    store.add(name + ".w", init_uniform_fan_in<T>(k3 * cin, cout, k3 * cin, rng),
              {k3, cin, cout});
    if (bias) store.add(name + ".b", Matrix<T>(1, cout, T(0)));
}

template <class T>
inline void add_linear_param(ParamStore<T>& store, const std::string& name, std::size_t cin,
                             std::size_t cout, std::mt19937_64& rng, bool bias = true,
                             double std_dev = 0.02) {
    store.add(name + ".w", init_normal<T>(cin, cout, std_dev, rng));
    if (bias) store.add(name + ".b", Matrix<T>(1, cout, T(0)));
}

template <class T>
inline void add_layer_norm_param(ParamStore<T>& store, const std::string& name, std::size_t c) {
    store.add(name + ".g", Matrix<T>(1, c, T(1)));
    store.add(name + ".b", Matrix<T>(1, c, T(0)));
}

// All learnable tensors of one SFPM instance. No parameter is conditioned on
// coordinates; everything is shaped by (C, L) alone.
template <class T>
inline void add_modulator_params(ParamStore<T>& store, const std::string& prefix,
                                 const ModulatorConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const std::size_t c = cfg.channels;
    add_linear_param(store, prefix + "stem", c, c, rng);
    for (int l = 1; l <= cfg.focal_levels; ++l) {
        const std::string lvl = prefix + "level" + std::to_string(l);
        add_conv_param(store, lvl, cfg.kernel_size(l), c, c, rng);
        add_layer_norm_param(store, lvl + ".ln", c);
    }
    add_linear_param(store, prefix + "gate", c, cfg.gate_width(), rng);
    add_linear_param(store, prefix + "query", c, c, rng);
    add_linear_param(store, prefix + "mixer", c, c, rng);  // h: 1x1x1 cross-channel mix
}

// ---------------------------------------------------------------------------
// Forward graph builders

// S^0 = stem(x); S^l = LN(GeLU(SubMconv^l(S^{l-1}))) for l = 1..L;
// optionally S^{L+1} = per-batch average of S^L broadcast back per voxel.
// Returns the slots of S^1..S^{L(+1)}.
template <class T>
inline std::vector<int> extract_contexts(Tape<T>& tape, ParamStore<T>& store,
                                         const std::string& prefix, const ModulatorConfig& cfg,
                                         int x, const std::vector<VoxelCoord>& coords,
                                         const RulebookSet& rbs) {
    int s = op_linear(tape, x, store.use(tape, prefix + "stem.w"),
                      store.use(tape, prefix + "stem.b"));
    std::vector<int> levels;
    for (int l = 1; l <= cfg.focal_levels; ++l) {
        const std::string lvl = prefix + "level" + std::to_string(l);
        const Rulebook* rb = rbs.get(cfg.kernel_size(l));
        s = op_submconv(tape, s, store.use(tape, lvl + ".w"), store.use(tape, lvl + ".b"), rb);
        s = op_gelu(tape, s);
        s = op_layer_norm(tape, s, store.use(tape, lvl + ".ln.g"),
                          store.use(tape, lvl + ".ln.b"));
        levels.push_back(s);
    }
    if (cfg.use_global_pool) levels.push_back(op_global_avg_pool(tape, s, coords));
    return levels;
}

// S_out = sum_l G^l (.) S^l with raw (un-normalized) linear gates;
// F_out = mixer(S_out).
template <class T>
inline int gated_aggregate(Tape<T>& tape, ParamStore<T>& store, const std::string& prefix,
                           const ModulatorConfig& cfg, int x, const std::vector<int>& levels) {
    if (levels.size() != cfg.level_count())
        throw std::invalid_argument("gated_aggregate: level count does not match gate width");
    const int gates = op_linear(tape, x, store.use(tape, prefix + "gate.w"),
                                store.use(tape, prefix + "gate.b"));
    int acc = -1;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const int scaled = op_row_scale(tape, levels[l], gates, l);
        acc = acc < 0 ? scaled : op_add(tape, acc, scaled);
    }
    return op_linear(tape, acc, store.use(tape, prefix + "mixer.w"),
                     store.use(tape, prefix + "mixer.b"));
}

// y_i = q(x_i) (.) h(sum_l g_i^l s_i^l); coords unchanged.
template <class T>
inline int sfpm_forward(Tape<T>& tape, ParamStore<T>& store, const std::string& prefix,
                        const ModulatorConfig& cfg, int x, const std::vector<VoxelCoord>& coords,
                        const RulebookSet& rbs) {
    if (tape.value(x).cols != cfg.channels)
        throw std::invalid_argument("sfpm_forward: channel mismatch");
    const auto levels = extract_contexts(tape, store, prefix, cfg, x, coords, rbs);
    const int modulator = gated_aggregate(tape, store, prefix, cfg, x, levels);
    const int query = op_linear(tape, x, store.use(tape, prefix + "query.w"),
                                store.use(tape, prefix + "query.b"));
    return op_mul(tape, query, modulator);
}

// Sparse focal point block: pre-norm residual SFPM followed by a pre-norm
// residual MLP (C -> 4C -> C with GeLU).
template <class T>
inline void add_sfp_block_params(ParamStore<T>& store, const std::string& prefix,
                                 const ModulatorConfig& cfg, std::mt19937_64& rng) {
    add_layer_norm_param(store, prefix + "ln1", cfg.channels);
    add_modulator_params(store, prefix + "sfpm.", cfg, rng);
    add_layer_norm_param(store, prefix + "ln2", cfg.channels);
    add_linear_param(store, prefix + "mlp.fc1", cfg.channels, 4 * cfg.channels, rng);
    add_linear_param(store, prefix + "mlp.fc2", 4 * cfg.channels, cfg.channels, rng);
}

template <class T>
inline int sfp_block_forward(Tape<T>& tape, ParamStore<T>& store, const std::string& prefix,
                             const ModulatorConfig& cfg, int x,
                             const std::vector<VoxelCoord>& coords, const RulebookSet& rbs) {
    int h = op_layer_norm(tape, x, store.use(tape, prefix + "ln1.g"),
                          store.use(tape, prefix + "ln1.b"));
    h = sfpm_forward(tape, store, prefix + "sfpm.", cfg, h, coords, rbs);
    const int x1 = op_add(tape, x, h);
    int m = op_layer_norm(tape, x1, store.use(tape, prefix + "ln2.g"),
                          store.use(tape, prefix + "ln2.b"));
    m = op_linear(tape, m, store.use(tape, prefix + "mlp.fc1.w"),
                  store.use(tape, prefix + "mlp.fc1.b"));
    m = op_gelu(tape, m);
    m = op_linear(tape, m, store.use(tape, prefix + "mlp.fc2.w"),
                  store.use(tape, prefix + "mlp.fc2.b"));
    return op_add(tape, x1, m);
}

inline std::vector<int> modulator_kernel_sizes(const ModulatorConfig& cfg) {
    std::vector<int> ks;
    for (int l = 1; l <= cfg.focal_levels; ++l) ks.push_back(cfg.kernel_size(l));
    return ks;
}

}  // namespace sfp
