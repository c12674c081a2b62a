#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfp/network.hpp"

namespace sfp {

// Flat key=value run configuration with '#' comments. Every tunable has a
// default; unknown keys are rejected so typos cannot pass silently. The
// resolved text is embedded verbatim in checkpoints and reports.
class RunConfig {
  public:
    RunConfig() : values_(defaults()) {}

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"seed", "1"},
            {"precision", "f32"},
            {"out_dir", "."},
            {"data.pattern", "hybrid_solid"},
            {"data.train_scans", "64"},
            {"data.val_scans", "16"},
            {"data.rays", "8192"},
            {"data.noise_sigma", "0.01"},
            {"network.voxel_size", "0.1"},
            {"network.stage_channels", "32,64,128,256,256"},
            {"network.blocks_per_stage", "2"},
            {"network.sfp_blocks_per_stage", "1"},
            {"network.num_classes", "5"},
            {"network.sfpm_stages", "all"},
            {"sfpm.focal_levels", "3"},
            {"sfpm.base_kernel", "3"},
            {"sfpm.use_global_pool", "true"},
            {"train.lr", "0.0008"},
            {"train.weight_decay", "0.01"},
            {"train.beta1", "0.9"},
            {"train.beta2", "0.999"},
            {"train.steps", "2000"},
            {"train.batch_size", "8"},
            {"train.focal_gamma", "2"},
            {"train.poly_power", "0.9"},
            {"train.eval_every", "50"},
        };
        return d;
    }

    void set(const std::string& key, const std::string& value) {
        if (!defaults().count(key)) throw std::invalid_argument("unknown config key: " + key);
        values_[key] = value;
    }

    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open config file: " + path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": expected key=value");
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    void apply_overrides(const std::vector<std::string>& overrides) {
        for (const std::string& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("override must be key=value: " + kv);
            set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
        }
    }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw std::out_of_range("unknown config key: " + key);
        return it->second;
    }

    double real(const std::string& key) const {
        std::size_t pos = 0;
        const std::string& v = str(key);
        const double r = std::stod(v, &pos);
        if (pos != v.size())
            throw std::invalid_argument("config key " + key + ": not a number: " + v);
        return r;
    }

    std::int64_t integer(const std::string& key) const {
        std::size_t pos = 0;
        const std::string& v = str(key);
        const std::int64_t r = std::stoll(v, &pos);
        if (pos != v.size())
            throw std::invalid_argument("config key " + key + ": not an integer: " + v);
        return r;
    }

    bool boolean(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument("config key " + key + ": not a boolean: " + v);
    }

    std::vector<std::string> list(const std::string& key) const {
        std::vector<std::string> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    // Sorted key=value dump; stable and fit for hashing / embedding.
    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

    NetworkConfig network_config() const {
        NetworkConfig nc;
        nc.voxel_size = real("network.voxel_size");
        nc.stage_channels.clear();
        for (const std::string& c : list("network.stage_channels"))
            nc.stage_channels.push_back(static_cast<std::size_t>(std::stoll(c)));
        nc.blocks_per_stage = static_cast<int>(integer("network.blocks_per_stage"));
        nc.sfp_blocks_per_stage = static_cast<int>(integer("network.sfp_blocks_per_stage"));
        nc.num_classes = static_cast<std::size_t>(integer("network.num_classes"));
        nc.focal_levels = static_cast<int>(integer("sfpm.focal_levels"));
        nc.base_kernel = static_cast<int>(integer("sfpm.base_kernel"));
        nc.use_global_pool = boolean("sfpm.use_global_pool");
        nc.focal_gamma = real("train.focal_gamma");
        const std::string stages = str("network.sfpm_stages");
        if (stages == "all") {
            nc.sfpm_stages = default_sfpm_stages(nc.num_down());
        } else if (stages == "none") {
            nc.sfpm_stages.clear();
        } else {
            nc.sfpm_stages.clear();
            for (const std::string& s : list("network.sfpm_stages")) nc.sfpm_stages.insert(s);
        }
        nc.validate();
        return nc;
    }

    PatternKind pattern_kind() const {
        const std::string& p = str("data.pattern");
        if (p == "spinning") return PatternKind::kSpinning;
        if (p == "solid_state") return PatternKind::kSolidState;
        if (p == "hybrid_solid") return PatternKind::kHybridSolid;
        throw std::invalid_argument("config key data.pattern: unknown pattern " + p);
    }

  private:
    std::map<std::string, std::string> values_;

    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }
};

inline RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!path.empty()) cfg.load_file(path);
    cfg.apply_overrides(overrides);
    return cfg;
}

}  // namespace sfp
