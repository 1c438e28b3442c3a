#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prefixprop/attention.hpp"
#include "prefixprop/autodiff.hpp"
#include "prefixprop/rng.hpp"
#include "prefixprop/tensor.hpp"

namespace prefixprop {

enum class TuningMode { fine_tuning, prefix_tuning, prefix_propagation, propagation_kernel };

std::string_view to_string(TuningMode mode);
// Throws ConfigError for an unknown name.
TuningMode parse_tuning_mode(std::string_view name);
bool is_prefix_mode(TuningMode mode) noexcept;
bool uses_propagation(TuningMode mode) noexcept;

// Reserved token ids shared by the generators and the text loader.
inline constexpr int kClsToken = 0;
inline constexpr int kPadToken = 1;
inline constexpr int kUnkToken = 2;
inline constexpr int kFirstWordToken = 3;

struct ModelConfig {
    AttentionConfig attention;
    std::size_t n_layers = 2;
    std::size_t d_ff = 128;
    std::size_t vocab_size = 1000;
    std::size_t max_len = 512;
    std::size_t n_classes = 2;
    double ln_eps = 1e-5;
    // Scale of the stand-in pretrained query/key projections.
    double qk_init_std = 0.25;
    double position_init_std = 0.1;
    double prefix_init_std = 0.02;
    // Kernel-decomposed mode only; nullopt selects the exact lambda split.
    std::optional<double> alpha;
    bool train_head = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

struct ForwardOptions {
    bool train = false;
    double dropout = 0.0;
    // Required when train && dropout > 0.
    Rng* rng = nullptr;
};

struct NamedCount {
    std::string name;
    std::size_t count = 0;
};

struct ParameterPartition {
    std::vector<NamedCount> trainable;
    std::vector<NamedCount> frozen;
    std::size_t trainable_count = 0;
    std::size_t frozen_count = 0;
    std::size_t total_count = 0;
    std::size_t prefix_count = 0;
    double trainable_fraction = 0.0;
};

/// Transformer encoder classifier with a frozen backbone in prefix modes.
///
/// Layers are post-norm: h = LN(x + Drop(Attn(x))), out = LN(h + Drop(FFN(h))).
/// Token 0 of every input must be [CLS]; its embedding is a separate
/// parameter so it can stay trainable while the embedding table is frozen.
class EncoderModel {
public:
    // Backbone weights come from backbone_seed; prefixes and the head from prefix_seed.
    static EncoderModel create(const ModelConfig& cfg, TuningMode mode, std::uint64_t backbone_seed,
                               std::uint64_t prefix_seed);
    // New model whose embeddings, [CLS] and layers are copied from `source`;
    // prefixes and head are fresh from prefix_seed. Throws ConfigError when the
    // backbone dimensions of cfg and source differ.
    static EncoderModel with_backbone(const EncoderModel& source, const ModelConfig& cfg, TuningMode mode,
                                      std::uint64_t prefix_seed);

    EncoderModel(const EncoderModel&) = delete;
    EncoderModel& operator=(const EncoderModel&) = delete;
    EncoderModel(EncoderModel&&) = default;
    EncoderModel& operator=(EncoderModel&&) = default;

    /// Differentiable logits [1 x n_classes] for one sequence.
    Var forward(Tape& tape, std::span<const int> tokens, const ForwardOptions& options = {});
    // Evaluation-mode logits [n_classes]; does not touch gradients.
    Tensor logits(std::span<const int> tokens) const;

    // Row of the final hidden state read by the head: j in propagation modes, 0 otherwise.
    std::size_t readout_position() const noexcept;

    const ModelConfig& config() const noexcept { return cfg_; }
    TuningMode mode() const noexcept { return mode_; }
    std::uint64_t backbone_seed() const noexcept { return backbone_seed_; }
    std::uint64_t prefix_seed() const noexcept { return prefix_seed_; }
    const std::optional<PrefixBank>& bank() const noexcept { return bank_; }

    // Stable order: embeddings, layers, cls, prefixes, head.
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::vector<Parameter*> trainable_parameters();
    Parameter* find(std::string_view name);

    ParameterPartition partition() const;
    void zero_grad();

private:
    EncoderModel() = default;
    friend EncoderModel load_checkpoint(const std::filesystem::path& path);

    // Layer mask and its readout row for one sequence length.
    struct Masks {
        AttentionMask layer;
        AttentionMask readout;
    };
    struct MaskCache {
        std::mutex mutex;
        std::map<std::size_t, Masks> by_length;
    };

    void apply_trainable_flags();
    void check_tokens(std::span<const int> tokens) const;
    AttentionMask mask_for(std::size_t seq_len) const;
    Masks masks_for(std::size_t seq_len) const;

    ModelConfig cfg_;
    TuningMode mode_ = TuningMode::fine_tuning;
    std::uint64_t backbone_seed_ = 0;
    std::uint64_t prefix_seed_ = 0;

    Parameter token_embedding_;
    Parameter position_embedding_;
    Parameter embed_ln_gamma_;
    Parameter embed_ln_beta_;
    Parameter cls_embedding_;
    std::vector<LayerWeights> layers_;
    std::optional<PrefixBank> bank_;
    Parameter head_weight_;
    Parameter head_bias_;
    std::unique_ptr<MaskCache> mask_cache_ = std::make_unique<MaskCache>();
};

ParameterPartition partition_parameters(const EncoderModel& model);

/// One forward/backward over `batch`; true iff every frozen parameter's
/// gradient is exactly zero and some prefix gradient is nonzero. Throws
/// ConfigError in fine_tuning mode. Leaves the model's gradients populated.
bool freeze_check(EncoderModel& model, std::span<const std::vector<int>> batch, std::span<const int> labels);

/// Checkpoint container: 8-byte magic "PPCKPT01", little-endian u64 header
/// length, a JSON header (config, mode, seeds, tensor table with byte
/// offsets), then raw little-endian IEEE-754 doubles.
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_checkpoint(const std::filesystem::path& path);

}  // namespace prefixprop
