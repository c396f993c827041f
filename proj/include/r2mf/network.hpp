#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "r2mf/blocks.hpp"

namespace r2mf {

struct ModelConfig {
    std::size_t levels = 4;
    std::vector<std::size_t> channels{8, 16, 32, 64};
    /// Recurrent steps of the R2-Jump block at each level, finest level first.
    std::vector<std::size_t> steps{4, 3, 2, 1};
    std::size_t input_size = 64;
    bool use_r2jump = true;
    bool use_inception = true;
    bool use_mcskip = true;
    bool use_scse = true;
    double dropout_rate = 0.2;
    /// Applies bottleneck dropout after SCSE-Lite instead of before it.
    bool dropout_after_scse = false;
    std::uint64_t seed = 42;

    static ModelConfig desk();
    static ModelConfig paper();

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;

    /// Sets one field from its text form. Returns false for an unknown key and
    /// throws std::invalid_argument for a malformed value.
    bool set(std::string_view key, std::string_view value);
    /// One `key=value` line per field.
    std::string to_text() const;
    static ModelConfig from_text(std::string_view text);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ForwardContext {
    Mode mode = Mode::eval;
    /// Dropout stream; required in train mode when the dropout rate is non-zero.
    std::mt19937_64* rng = nullptr;
};

template <typename T>
struct CoarseOutput {
    Var<T> prob;
    /// Decoder maps D1..DL (index 0 is full resolution).
    std::vector<Var<T>> decoder_feats;
};

template <typename T>
struct CascadeOutput {
    Var<T> coarse;
    Var<T> fine;
};

/// Coarse and fine U-shaped subnetworks joined by MC-Skip.
template <typename T>
class Model {
   public:
    explicit Model(ModelConfig cfg);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    const ModelConfig& config() const noexcept { return cfg_; }
    ParameterSet<T>& params() noexcept { return params_; }
    const ParameterSet<T>& params() const noexcept { return params_; }
    std::size_t count_parameters() const { return params_.parameter_count(); }

    CoarseOutput<T> coarse_forward(Tape<T>& tape, const Var<T>& image, const ForwardContext& ctx) const;

    /// G_i = sum over k = i..min(i+2, L) of psi_{k,i}(upsample_{2^(k-i)}(D_k)); `level` is 1-based.
    Var<T> mc_skip_aggregate(Tape<T>& tape, const std::vector<Var<T>>& decoder_feats, std::size_t level) const;

    Var<T> fine_forward(Tape<T>& tape, const Var<T>& image, const Var<T>& coarse_prob,
                        const std::vector<Var<T>>& decoder_feats, const ForwardContext& ctx) const;

    CascadeOutput<T> cascade_forward(Tape<T>& tape, const Var<T>& image, const ForwardContext& ctx) const;

    /// R2-Jump blocks of one subnetwork (empty when R2-Jump is disabled).
    const std::vector<R2Jump<T>>& jumps(bool fine) const { return fine ? fine_.jumps : coarse_.jumps; }

   private:
    struct Psi {
        std::size_t from = 0;  // 1-based decoder level k
        Var<T> weight, bias;
    };
    struct Subnet {
        std::vector<FeatureBlock<T>> encoder;
        std::vector<R2Jump<T>> jumps;
        std::vector<Var<T>> up_weight, up_bias;  // index k-1 maps level k+1 to level k
        std::vector<FeatureBlock<T>> decoder;
        Var<T> head_weight, head_bias;
        std::vector<SCSELite<T>> attention;  // bottleneck SCSE-Lite, fine subnet only
    };

    Subnet build_subnet(Initializer<T>& init, const std::string& prefix, std::size_t in_channels, bool fine);
    Var<T> bottleneck(Tape<T>& tape, const Subnet& net, const Var<T>& deepest, const ForwardContext& ctx) const;
    std::vector<Var<T>> decode(Tape<T>& tape, const Subnet& net, const std::vector<Var<T>>& enc,
                               const Var<T>& bottom, Mode mode) const;
    Var<T> head(Tape<T>& tape, const Subnet& net, const Var<T>& d1) const;
    void check_image(const Var<T>& image) const;

    ModelConfig cfg_;
    ParameterSet<T> params_;
    Subnet coarse_, fine_;
    std::vector<std::vector<Psi>> psi_;  // psi_[i-1] lists the terms feeding fine level i
};

/// Fusion used at a 1-based decoder level: concatenation in the coarser half of
/// the pyramid, addition in the finer half.
FuseMode fuse_mode_for_level(std::size_t level, std::size_t levels);

}  // namespace r2mf
