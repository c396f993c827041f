#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "r2mf/network.hpp"
#include "r2mf/trainer.hpp"

namespace r2mf {

/// Raised for any unreadable, corrupt or inconsistent checkpoint.
class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    bool trainable = true;
    Dims dims;
    std::vector<float> values;
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
    ModelConfig config;
    std::vector<NamedTensor> tensors;  // parameter-set order
    std::optional<AdamState<float>> adam;
    std::vector<EpochRecord> history;

    static Checkpoint capture(const Model<float>& model, const AdamState<float>* adam = nullptr,
                              std::vector<EpochRecord> history = {});
    /// Builds a model from the embedded config and loads every tensor.
    Model<float> restore() const;
};

/// Layout (little-endian): "R2MF", u32 version, config text, tensor table
/// (name, kind, 4 dims, f32 values), optional Adam moments, history rows,
/// and a CRC-32 of everything before it.
std::string encode_checkpoint(const Checkpoint& ckpt);
/// Validates magic, version, CRC and every tensor against the embedded config.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace r2mf
