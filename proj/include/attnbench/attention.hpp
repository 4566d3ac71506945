#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "attnbench/nn.hpp"
#include "attnbench/tensor.hpp"

// Attention as soft selection: context = values weighted by softmax(scores),
// with the scoring functions of the recurrent, convolutional and transformer
// encoder-decoders. Every function accepts unbatched operands and, where
// noted, leading batch dimensions.
namespace attnbench {

struct AttentionResult {
    Tensor context;
    Tensor weights;
};

/// Additive mask with entries in {0, -inf}; every row keeps at least one 0.
class Mask {
  public:
    explicit Mask(Tensor additive);
    const Tensor& additive() const { return additive_; }
    /// Same entries under a different (broadcast-compatible) shape.
    Mask reshaped(Shape shape) const;

  private:
    Tensor additive_;
};

/// [n x n] mask with entry (i, j) = 0 for j <= i and -inf otherwise.
Mask causal_mask(std::size_t n);

/// [B x 1 x max_len] key mask hiding positions at or beyond each row's length.
Mask padding_mask(std::span<const std::size_t> lengths, std::size_t max_len);

/// weights = softmax(scores); context = sum_i weights_i * values_i.
/// Unbatched: values [n x d], scores [n] -> context [d].
/// Batched: values [..., n, d], scores [..., q, n] -> context [..., q, d].
AttentionResult attend(const Tensor& values, const Tensor& scores);

/// All weight on the final element: context is hidden_states[T-1] exactly.
AttentionResult last_element_attention(const Tensor& hidden_states);

/// Batched form over padded states [B x T x d]; row b selects step lengths[b]-1.
AttentionResult last_element_attention(const Tensor& hidden_states, std::span<const std::size_t> lengths);

/// Learned score f(s, h) = v . tanh(W [s ; h] + b) over a decoder state s and
/// one encoder annotation h.
struct AdditiveScorer {
    Linear hidden; // [(d_dec + d_enc) x d_attn]
    Tensor out;    // [d_attn x 1]
    std::size_t decoder_dim = 0;
    std::size_t encoder_dim = 0;

    static AdditiveScorer create(ParameterStore& store, const std::string& name, std::size_t decoder_dim,
                                 std::size_t encoder_dim, std::size_t attention_dim, Rng& rng);
};

/// Scores every encoder state against the decoder state by concatenation.
/// decoder_state [d_dec], encoder_states [T x d_enc] -> [T];
/// decoder_state [B x d_dec], encoder_states [B x T x d_enc] -> [B x T].
Tensor additive_score(const Tensor& decoder_state, const Tensor& encoder_states, const AdditiveScorer& scorer);

/// The encoder half of the concatenated product, W_h h + b, which does not
/// change across decoder steps. Result: [..., T, d_attn].
Tensor project_keys(const Tensor& encoder_states, const AdditiveScorer& scorer);

/// Same value as additive_score, with the encoder half precomputed.
Tensor additive_score_projected(const Tensor& decoder_state, const Tensor& projected_keys,
                                const AdditiveScorer& scorer);

/// softmax(Q K^T / sqrt(d_k) + mask) V over Q [..., n, d_k], K [..., m, d_k], V [..., m, d_v].
AttentionResult scaled_dot_product(const Tensor& query, const Tensor& key, const Tensor& value,
                                   const Mask* mask = nullptr);

struct Projections {
    Tensor query;
    Tensor key;
    Tensor value;
};

/// Q = X_q W_Q, K = X_kv W_K, V = X_kv W_V. Self-attention is X_q == X_kv.
Projections qkv_project(const Tensor& x_query, const Tensor& x_key_value, const Tensor& w_query,
                        const Tensor& w_key, const Tensor& w_value);

/// Projection weights for all heads; head h owns columns [h*d_h, (h+1)*d_h).
struct MultiHeadParams {
    Tensor query_weight; // [D x D]
    Tensor key_weight;   // [D x D]
    Tensor value_weight; // [D x D]
    Linear output;       // [D x D] + bias

    static MultiHeadParams create(ParameterStore& store, const std::string& name, std::size_t model_dim, Rng& rng);
};

/// Per-head scaled dot-product attention, heads concatenated then projected by W_O.
/// x_query [n x D] or [B x n x D]; masks broadcast against [B x heads x n x m]
/// (a [B x 1 x m] padding mask is expanded over heads).
Tensor multi_head(const Tensor& x_query, const Tensor& x_key_value, std::size_t n_heads,
                  const MultiHeadParams& params, const Mask* mask = nullptr);

/// Convolutional encoder-decoder attention: weights over encoder positions from
/// dot products d_i . z_j, context c_i = sum_j w_ij (z_j + e_j).
/// summaries [..., n, E], encoder_out [..., m, E], source_embed [..., m, E].
AttentionResult convs2s_attend(const Tensor& summaries, const Tensor& encoder_out, const Tensor& source_embed,
                               const Mask* key_mask = nullptr);

/// d_i = h_i W_d + b_d + g_i for decoder states h [..., n, H] and target
/// embeddings g [..., n, E], with W_d [H x E].
Tensor decoder_state_summary(const Tensor& hidden, const Tensor& target_embed, const Tensor& weight,
                             const Tensor& bias);

} // namespace attnbench
