#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "attnbench/attention.hpp"
#include "attnbench/data.hpp"
#include "attnbench/errors.hpp"
#include "attnbench/nn.hpp"

namespace attnbench {

enum class Family { LstmPlain, GruBahdanau, ConvS2S, Transformer };
enum class Scale { Paper, Desk };

inline constexpr std::array<Family, 4> kAllFamilies = {Family::LstmPlain, Family::GruBahdanau, Family::ConvS2S,
                                                       Family::Transformer};

std::string family_name(Family family);
Family parse_family(const std::string& name);
std::string scale_name(Scale scale);
Scale parse_scale(const std::string& name);

/// A sequence exceeds a model's fixed positional range.
class SequenceLengthError : public DimensionError {
  public:
    using DimensionError::DimensionError;
};

struct ModelConfig {
    Family family = Family::Transformer;
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 0;
    std::size_t hidden_dim = 0;
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;       // transformer
    std::size_t ffn_dim = 0;       // transformer
    std::size_t kernel_size = 3;   // conv
    std::size_t max_positions = 0; // conv
    double dropout_p = 0.0;
    std::size_t max_decode_len = 0;

    static ModelConfig preset(Family family, Scale scale, std::size_t vocab_size);
    /// Throws ConfigError on inconsistent dimensions.
    void validate() const;

    /// Flat key/value form used by checkpoints and run snapshots.
    std::map<std::string, std::string> to_fields() const;
    static ModelConfig from_fields(const std::map<std::string, std::string>& fields);
    bool operator==(const ModelConfig&) const = default;
};

/// Intermediate attention quantities captured during a forward pass, used to
/// cross-check model internals against explicit recomputation.
struct AttentionTrace {
    struct Step {
        Tensor query;        // recurrent: decoder state s_{t-1} [B x H]
        Tensor hidden;       // conv: decoder layer output h [B x T x H]
        Tensor target_embed; // conv: g [B x T x E]
        Tensor summary;      // conv: d [B x T x E]
        Tensor weights;
        Tensor context;
    };
    Tensor encoder_states; // recurrent: annotations; conv: z
    Tensor source_embed;   // conv: e
    std::vector<Step> steps;
};

struct ForwardPass {
    bool training = false;
    Rng* rng = nullptr;
    AttentionTrace* trace = nullptr;
};

/// Common interface of the four encoder-decoder families. Batch-first layout;
/// forward passes never modify parameters.
class Seq2SeqModel {
  public:
    struct Encoding {
        virtual ~Encoding() = default;
    };

    virtual ~Seq2SeqModel() = default;

    const ModelConfig& config() const { return config_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.scalar_count(); }

    /// Logits [B x T x V] predicting target position t from target positions < t.
    Tensor forward_teacher_forced(const TokenBatch& source, const TokenBatch& target) const;
    /// Training-mode variant: dropout masks are drawn from `dropout_rng`.
    Tensor forward_teacher_forced(const TokenBatch& source, const TokenBatch& target, Rng& dropout_rng) const;
    /// Lower-level entry taking the decoder input (SOS-shifted target) directly.
    Tensor forward(const TokenBatch& source, const TokenBatch& decoder_input, ForwardPass& pass) const;

    /// Argmax decoding (over every id except PAD and SOS) from SOS for at most
    /// max_len steps. Rows end with EOS;
    /// a row that never produced EOS holds max_len tokens and then EOS.
    TokenBatch greedy_decode(const TokenBatch& source, std::size_t max_len) const;

    virtual std::unique_ptr<Encoding> encode(const TokenBatch& source, ForwardPass& pass) const = 0;
    virtual Tensor decode(const Encoding& encoding, const TokenBatch& decoder_input, ForwardPass& pass) const = 0;

    /// Position vectors added to token embeddings, [n_positions x width].
    /// Recurrent families have none and throw ConfigError.
    virtual Tensor positional_representation(std::size_t n_positions) const;

  protected:
    explicit Seq2SeqModel(ModelConfig config) : config_(std::move(config)) {}
    Tensor maybe_dropout(const Tensor& x, ForwardPass& pass) const;
    Tensor embed(const Tensor& table, const TokenBatch& tokens) const;

    ModelConfig config_;
    ParameterStore params_;
};

std::unique_ptr<Seq2SeqModel> build_model(const ModelConfig& config, Rng& rng);

/// Encoder output of the recurrent families.
struct RecurrentEncoding : Seq2SeqModel::Encoding {
    Tensor states; // [B x T x d]: hidden states (lstm) or bidirectional annotations (gru)
    std::vector<std::size_t> lengths;
    Tensor initial_state;  // gru: decoder s_0
    Tensor projected_keys; // gru: encoder half of the additive scorer
};

/// Fixed sinusoidal position encoding: even columns sin(pos / 10000^(i/d)),
/// odd columns the matching cos.
Tensor sinusoidal_encoding(std::size_t n_positions, std::size_t dim);

/// One convolutional layer: kernel-wide 1-D convolution to 2C channels.
struct ConvLayer {
    Linear conv; // [kernel*C x 2C]
    std::size_t kernel = 3;

    static ConvLayer create(ParameterStore& store, const std::string& name, std::size_t channels,
                            std::size_t kernel, Rng& rng);
};

/// Convolution then GLU, [B x T x C] -> [B x T x C]. Non-causal layers pad
/// symmetrically; causal layers pad kernel-1 steps on the left only.
Tensor conv_glu(const Tensor& x, const ConvLayer& layer, bool causal);

/// conv_glu plus the residual input.
Tensor conv_block(const Tensor& x, const ConvLayer& layer, bool causal);

} // namespace attnbench
