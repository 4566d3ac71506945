#include "attnbench/attention.hpp"

#include <cmath>

#include "attnbench/errors.hpp"

namespace attnbench {

Mask::Mask(Tensor additive) : additive_(std::move(additive)) {
    if (additive_.rank() == 0) throw DimensionError("mask must have at least one dimension");
    const std::size_t width = additive_.shape().back();
    auto v = additive_.data();
    for (std::size_t row = 0; row * width < v.size(); ++row) {
        bool open = false;
        for (std::size_t j = 0; j < width; ++j) {
            const double x = v[row * width + j];
            if (x == 0.0) {
                open = true;
            } else if (x != kNegInf) {
                throw ConfigError("mask entries must be 0 or -inf");
            }
        }
        if (!open) throw MaskingError("mask row " + std::to_string(row) + " hides every position");
    }
}

Mask Mask::reshaped(Shape shape) const {
    return Mask(Tensor(std::move(shape), std::vector<double>(additive_.data().begin(), additive_.data().end())));
}

Mask causal_mask(std::size_t n) {
    if (n == 0) throw DimensionError("causal mask needs at least one position");
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) v[i * n + j] = kNegInf;
    return Mask(Tensor({n, n}, std::move(v)));
}

Mask padding_mask(std::span<const std::size_t> lengths, std::size_t max_len) {
    std::vector<double> v(lengths.size() * max_len, 0.0);
    for (std::size_t b = 0; b < lengths.size(); ++b)
        for (std::size_t t = lengths[b]; t < max_len; ++t) v[b * max_len + t] = kNegInf;
    return Mask(Tensor({lengths.size(), 1, max_len}, std::move(v)));
}

AttentionResult attend(const Tensor& values, const Tensor& scores) {
    if (scores.rank() == 1 && values.rank() == 2) {
        if (values.dim(0) != scores.dim(0)) {
            throw DimensionError("attend: " + std::to_string(scores.dim(0)) + " scores for " +
                                 std::to_string(values.dim(0)) + " values");
        }
        Tensor weights = softmax(scores, 0);
        Tensor ctx = matmul(reshape(weights, {1, scores.dim(0)}), values);
        return {reshape(ctx, {values.dim(1)}), weights};
    }
    if (scores.rank() < 2 || values.rank() != scores.rank() ||
        scores.shape().back() != values.dim(values.rank() - 2)) {
        throw DimensionError("attend: scores " + shape_string(scores.shape()) + " do not match values " +
                             shape_string(values.shape()));
    }
    Tensor weights = softmax(scores, -1);
    return {bmm(weights, values), weights};
}

AttentionResult last_element_attention(const Tensor& hidden_states) {
    if (hidden_states.rank() != 2 || hidden_states.dim(0) == 0) {
        throw DimensionError("last_element_attention: need a non-empty [T x d] sequence, got " +
                             shape_string(hidden_states.shape()));
    }
    const std::size_t T = hidden_states.dim(0);
    std::vector<double> w(T, 0.0);
    w[T - 1] = 1.0;
    return {select(hidden_states, 0, T - 1), Tensor({T}, std::move(w))};
}

AttentionResult last_element_attention(const Tensor& hidden_states, std::span<const std::size_t> lengths) {
    if (hidden_states.rank() != 3 || lengths.size() != hidden_states.dim(0)) {
        throw DimensionError("last_element_attention: need [B x T x d] with B lengths, got " +
                             shape_string(hidden_states.shape()));
    }
    const std::size_t B = hidden_states.dim(0), T = hidden_states.dim(1);
    std::vector<std::size_t> last(B);
    std::vector<double> w(B * T, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        if (lengths[b] == 0 || lengths[b] > T) throw DimensionError("last_element_attention: invalid length");
        last[b] = lengths[b] - 1;
        w[b * T + last[b]] = 1.0;
    }
    return {gather_steps(hidden_states, last), Tensor({B, T}, std::move(w))};
}

AdditiveScorer AdditiveScorer::create(ParameterStore& store, const std::string& name, std::size_t decoder_dim,
                                      std::size_t encoder_dim, std::size_t attention_dim, Rng& rng) {
    AdditiveScorer s;
    s.hidden = Linear::create(store, name + ".hidden", decoder_dim + encoder_dim, attention_dim, rng);
    s.out = store.add_weight(name + ".out", {attention_dim, 1}, attention_dim, rng);
    s.decoder_dim = decoder_dim;
    s.encoder_dim = encoder_dim;
    return s;
}

namespace {

void check_additive_dims(const Tensor& decoder_state, const Tensor& encoder_states, const AdditiveScorer& scorer) {
    const bool unbatched = decoder_state.rank() == 1 && encoder_states.rank() == 2;
    const bool batched = decoder_state.rank() == 2 && encoder_states.rank() == 3 &&
                         decoder_state.dim(0) == encoder_states.dim(0);
    if ((!unbatched && !batched) || decoder_state.shape().back() != scorer.decoder_dim ||
        encoder_states.shape().back() != scorer.encoder_dim) {
        throw ConfigError("additive score: decoder state " + shape_string(decoder_state.shape()) +
                          " / encoder states " + shape_string(encoder_states.shape()) + " do not match scorer (" +
                          std::to_string(scorer.decoder_dim) + " + " + std::to_string(scorer.encoder_dim) + ")");
    }
}

Tensor drop_last_axis(const Tensor& t) {
    Shape s = t.shape();
    s.pop_back();
    return reshape(t, s);
}

} // namespace

Tensor additive_score(const Tensor& decoder_state, const Tensor& encoder_states, const AdditiveScorer& scorer) {
    check_additive_dims(decoder_state, encoder_states, scorer);
    // Repeat s along the time axis so each row reads [s ; h_t'].
    Shape rep_shape = encoder_states.shape();
    rep_shape.back() = scorer.decoder_dim;
    Shape s_shape = decoder_state.shape();
    s_shape.insert(s_shape.end() - 1, 1);
    Tensor repeated = add(reshape(decoder_state, s_shape), Tensor(rep_shape));
    Tensor joined = concat({repeated, encoder_states}, -1);
    Tensor energy = attnbench::tanh(scorer.hidden(joined));
    return drop_last_axis(matmul(energy, scorer.out));
}

Tensor project_keys(const Tensor& encoder_states, const AdditiveScorer& scorer) {
    if (encoder_states.rank() < 2 || encoder_states.shape().back() != scorer.encoder_dim) {
        throw ConfigError("project_keys: encoder states " + shape_string(encoder_states.shape()) +
                          " do not match scorer");
    }
    const std::size_t d_dec = scorer.decoder_dim;
    Tensor w_enc = slice(scorer.hidden.weight, 0, d_dec, d_dec + scorer.encoder_dim);
    return add(matmul(encoder_states, w_enc), scorer.hidden.bias);
}

Tensor additive_score_projected(const Tensor& decoder_state, const Tensor& projected_keys,
                                const AdditiveScorer& scorer) {
    const std::size_t d_attn = scorer.hidden.out_features();
    const bool unbatched = decoder_state.rank() == 1 && projected_keys.rank() == 2;
    const bool batched =
        decoder_state.rank() == 2 && projected_keys.rank() == 3 && decoder_state.dim(0) == projected_keys.dim(0);
    if ((!unbatched && !batched) || decoder_state.shape().back() != scorer.decoder_dim ||
        projected_keys.shape().back() != d_attn) {
        throw ConfigError("additive score: decoder state " + shape_string(decoder_state.shape()) +
                          " / projected keys " + shape_string(projected_keys.shape()) + " do not match scorer");
    }
    Tensor w_dec = slice(scorer.hidden.weight, 0, 0, scorer.decoder_dim);
    Tensor query = matmul(decoder_state, w_dec);
    Shape q_shape = query.shape();
    q_shape.insert(q_shape.end() - 1, 1);
    Tensor energy = attnbench::tanh(add(projected_keys, reshape(query, q_shape)));
    return drop_last_axis(matmul(energy, scorer.out));
}

AttentionResult scaled_dot_product(const Tensor& query, const Tensor& key, const Tensor& value, const Mask* mask) {
    if (query.rank() < 2 || key.rank() != query.rank() || value.rank() != query.rank() ||
        query.shape().back() != key.shape().back() || key.dim(key.rank() - 2) != value.dim(value.rank() - 2)) {
        throw DimensionError("scaled_dot_product: Q " + shape_string(query.shape()) + ", K " +
                             shape_string(key.shape()) + ", V " + shape_string(value.shape()) + " do not conform");
    }
    const double d_k = static_cast<double>(query.shape().back());
    Tensor scores = scale(bmm(query, key, true), 1.0 / std::sqrt(d_k));
    if (mask) {
        Tensor masked = add(scores, mask->additive());
        if (masked.shape() != scores.shape()) {
            throw DimensionError("mask " + shape_string(mask->additive().shape()) + " does not broadcast to scores " +
                                 shape_string(scores.shape()));
        }
        scores = masked;
    }
    Tensor weights = softmax(scores, -1);
    return {bmm(weights, value), weights};
}

Projections qkv_project(const Tensor& x_query, const Tensor& x_key_value, const Tensor& w_query,
                        const Tensor& w_key, const Tensor& w_value) {
    auto conforms = [](const Tensor& x, const Tensor& w) {
        return x.rank() >= 1 && w.rank() == 2 && x.shape().back() == w.dim(0);
    };
    if (!conforms(x_query, w_query) || !conforms(x_key_value, w_key) || !conforms(x_key_value, w_value) ||
        w_query.dim(1) != w_key.dim(1)) {
        throw ConfigError("qkv_project: inputs " + shape_string(x_query.shape()) + " / " +
                          shape_string(x_key_value.shape()) + " do not match projection weights");
    }
    return {matmul(x_query, w_query), matmul(x_key_value, w_key), matmul(x_key_value, w_value)};
}

MultiHeadParams MultiHeadParams::create(ParameterStore& store, const std::string& name, std::size_t model_dim,
                                        Rng& rng) {
    MultiHeadParams p;
    p.query_weight = store.add_weight(name + ".query_weight", {model_dim, model_dim}, model_dim, rng);
    p.key_weight = store.add_weight(name + ".key_weight", {model_dim, model_dim}, model_dim, rng);
    p.value_weight = store.add_weight(name + ".value_weight", {model_dim, model_dim}, model_dim, rng);
    p.output = Linear::create(store, name + ".output", model_dim, model_dim, rng);
    return p;
}

Tensor multi_head(const Tensor& x_query, const Tensor& x_key_value, std::size_t n_heads,
                  const MultiHeadParams& params, const Mask* mask) {
    if (x_query.rank() < 2 || x_query.rank() > 3 || x_key_value.rank() != x_query.rank()) {
        throw DimensionError("multi_head: expected [n x D] or [B x n x D] inputs, got " +
                             shape_string(x_query.shape()) + " / " + shape_string(x_key_value.shape()));
    }
    const std::size_t D = params.query_weight.dim(1);
    if (n_heads == 0 || D % n_heads != 0) {
        throw ConfigError("multi_head: model dimension " + std::to_string(D) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    }
    const bool unbatched = x_query.rank() == 2;
    Tensor xq = unbatched ? reshape(x_query, {1, x_query.dim(0), x_query.dim(1)}) : x_query;
    Tensor xkv = unbatched ? reshape(x_key_value, {1, x_key_value.dim(0), x_key_value.dim(1)}) : x_key_value;
    const std::size_t B = xq.dim(0), n = xq.dim(1), m = xkv.dim(1);
    const std::size_t dh = D / n_heads;

    Projections p = qkv_project(xq, xkv, params.query_weight, params.key_weight, params.value_weight);
    auto split_heads = [&](const Tensor& t, std::size_t len) {
        return permute(reshape(t, {B, len, n_heads, dh}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(p.query, n);
    Tensor k = split_heads(p.key, m);
    Tensor v = split_heads(p.value, m);

    AttentionResult r;
    if (mask && mask->additive().rank() == 3) {
        const Shape& s = mask->additive().shape();
        Mask expanded = mask->reshaped({s[0], 1, s[1], s[2]});
        r = scaled_dot_product(q, k, v, &expanded);
    } else {
        r = scaled_dot_product(q, k, v, mask);
    }
    Tensor joined = reshape(permute(r.context, {0, 2, 1, 3}), {B, n, D});
    Tensor out = params.output(joined);
    return unbatched ? reshape(out, {n, D}) : out;
}

AttentionResult convs2s_attend(const Tensor& summaries, const Tensor& encoder_out, const Tensor& source_embed,
                               const Mask* key_mask) {
    if (summaries.rank() < 2 || encoder_out.shape() != source_embed.shape() ||
        encoder_out.rank() != summaries.rank() || summaries.shape().back() != encoder_out.shape().back()) {
        throw DimensionError("convs2s_attend: summaries " + shape_string(summaries.shape()) + ", encoder outputs " +
                             shape_string(encoder_out.shape()) + ", embeddings " +
                             shape_string(source_embed.shape()) + " do not conform");
    }
    Tensor scores = bmm(summaries, encoder_out, true);
    if (key_mask) {
        Tensor masked = add(scores, key_mask->additive());
        if (masked.shape() != scores.shape()) {
            throw DimensionError("mask " + shape_string(key_mask->additive().shape()) +
                                 " does not broadcast to scores " + shape_string(scores.shape()));
        }
        scores = masked;
    }
    Tensor weights = softmax(scores, -1);
    return {bmm(weights, add(encoder_out, source_embed)), weights};
}

Tensor decoder_state_summary(const Tensor& hidden, const Tensor& target_embed, const Tensor& weight,
                             const Tensor& bias) {
    if (hidden.rank() < 1 || weight.rank() != 2 || hidden.shape().back() != weight.dim(0) ||
        bias.numel() != weight.dim(1) || target_embed.rank() != hidden.rank() ||
        target_embed.shape().back() != weight.dim(1)) {
        throw ConfigError("decoder_state_summary: h " + shape_string(hidden.shape()) + ", g " +
                          shape_string(target_embed.shape()) + ", W_d " + shape_string(weight.shape()) +
                          " do not conform");
    }
    Tensor d = add(add(matmul(hidden, weight), bias), target_embed);
    if (d.shape() != target_embed.shape()) {
        throw ConfigError("decoder_state_summary: embedding shape " + shape_string(target_embed.shape()) +
                          " does not match positions of " + shape_string(hidden.shape()));
    }
    return d;
}

} // namespace attnbench
