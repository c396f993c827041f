#pragma once

#include <string>
#include <string_view>

#include "r2mf/network.hpp"
#include "r2mf/trainer.hpp"

namespace r2mf {

/// Everything a training run needs, as one flat `key=value` file.
struct RunConfig {
    ModelConfig model = ModelConfig::desk();
    TrainConfig train;
    std::string data;
    std::string out = "runs";
    std::string run_name;  // empty: timestamped directory

    /// Throws std::invalid_argument for an unknown key or malformed value.
    void set(std::string_view key, std::string_view value);
    void validate() const;
    std::string to_text() const;
    static RunConfig from_text(std::string_view text);
};

}  // namespace r2mf
