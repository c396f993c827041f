#include "r2mf/run_config.hpp"

#include <stdexcept>

#include "r2mf/text.hpp"

namespace r2mf {

void RunConfig::set(std::string_view key, std::string_view value) {
    if (key == "data") data = text::trim(value);
    else if (key == "out") out = text::trim(value);
    else if (key == "run_name") run_name = text::trim(value);
    else if (!model.set(key, value) && !train.set(key, value))
        throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
}

std::string RunConfig::to_text() const {
    return "# model\n" + model.to_text() + "# training\n" + train.to_text() + "# paths\ndata=" + data + "\nout=" + out +
           "\nrun_name=" + run_name + "\n";
}

RunConfig RunConfig::from_text(std::string_view src) {
    RunConfig cfg;
    for (const auto& [k, v] : text::parse_key_values(src)) cfg.set(k, v);
    cfg.validate();
    return cfg;
}

}  // namespace r2mf
