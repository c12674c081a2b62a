#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "sfp/network.hpp"

namespace sfp {

// Channel-averaged focal-level kernels as k^3 grids in (dz,dy,dx) order, one
// JSON entry per (stage, sfp block, level). Feed to any plotting tool.
template <class T>
inline nlohmann::json export_level_kernels(const Network<T>& net) {
    nlohmann::json out = nlohmann::json::array();
    const NetworkConfig& cfg = net.config();
    std::vector<std::string> stages;
    for (std::size_t s = 0; s < cfg.num_down(); ++s) stages.push_back("down" + std::to_string(s));
    stages.push_back("central");

    for (std::size_t si = 0; si < stages.size(); ++si) {
        if (!cfg.stage_has_sfpm(stages[si])) continue;
        const std::size_t channels = cfg.stage_channels[si];
        const ModulatorConfig mod = cfg.modulator_for(channels);
        for (int b = 0; b < cfg.sfp_blocks_per_stage; ++b) {
            for (int l = 1; l <= mod.focal_levels; ++l) {
                const std::string name = stages[si] + ".sfp" + std::to_string(b) + ".sfpm.level" +
                                         std::to_string(l) + ".w";
                const auto& e = net.params().at(name);
                const int k = mod.kernel_size(l);
                const std::size_t k3 = static_cast<std::size_t>(k) * k * k;
                std::vector<double> grid(k3, 0.0);
                for (std::size_t o = 0; o < k3; ++o) {
                    double sum = 0;
                    for (std::size_t ci = 0; ci < channels; ++ci)
                        for (std::size_t co = 0; co < channels; ++co)
                            sum += static_cast<double>(e.value(o * channels + ci, co));
                    grid[o] = sum / static_cast<double>(channels * channels);
                }
                out.push_back({{"stage", stages[si]},
                               {"block", b},
                               {"level", l},
                               {"kernel_size", k},
                               {"grid", grid}});
            }
        }
    }
    return out;
}

}  // namespace sfp
