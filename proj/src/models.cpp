#include "attnbench/models.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace attnbench {

std::string family_name(Family family) {
    switch (family) {
    case Family::LstmPlain: return "lstm_plain";
    case Family::GruBahdanau: return "gru_bahdanau";
    case Family::ConvS2S: return "conv_s2s";
    case Family::Transformer: return "transformer";
    }
    return "unknown";
}

Family parse_family(const std::string& name) {
    for (Family f : kAllFamilies) {
        if (family_name(f) == name) return f;
    }
    throw ConfigError("unknown model family '" + name + "' (expected lstm_plain, gru_bahdanau, conv_s2s, transformer)");
}

std::string scale_name(Scale scale) { return scale == Scale::Paper ? "paper" : "desk"; }

Scale parse_scale(const std::string& name) {
    if (name == "paper") return Scale::Paper;
    if (name == "desk") return Scale::Desk;
    throw ConfigError("unknown scale '" + name + "' (expected paper or desk)");
}

ModelConfig ModelConfig::preset(Family family, Scale scale, std::size_t vocab_size) {
    const bool paper = scale == Scale::Paper;
    ModelConfig c;
    c.family = family;
    c.vocab_size = vocab_size;
    c.embed_dim = paper ? 256 : 32;
    c.hidden_dim = paper ? 512 : 64;
    c.max_decode_len = paper ? 60 : 30;
    switch (family) {
    case Family::LstmPlain:
    case Family::GruBahdanau:
        c.n_layers = 1;
        c.dropout_p = 0.5;
        break;
    case Family::ConvS2S:
        c.n_layers = paper ? 10 : 4;
        c.kernel_size = 3;
        c.max_positions = 100;
        c.dropout_p = 0.25;
        break;
    case Family::Transformer:
        c.embed_dim = c.hidden_dim;
        c.n_layers = paper ? 6 : 2;
        c.n_heads = paper ? 8 : 4;
        c.ffn_dim = paper ? 2048 : 256;
        c.dropout_p = 0.1;
        break;
    }
    return c;
}

void ModelConfig::validate() const {
    auto fail = [&](const std::string& what) { throw ConfigError(family_name(family) + " config: " + what); };
    if (vocab_size <= kReservedTokens) fail("vocab_size must exceed the reserved ids");
    if (embed_dim == 0 || hidden_dim == 0) fail("embed_dim and hidden_dim must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout must lie in [0, 1)");
    if (max_decode_len == 0) fail("max_decode_len must be positive");
    if (n_layers == 0) fail("n_layers must be positive");
    switch (family) {
    case Family::LstmPlain:
    case Family::GruBahdanau:
        if (n_layers != 1) fail("recurrent families use a single layer");
        break;
    case Family::ConvS2S:
        if (kernel_size == 0 || kernel_size % 2 == 0) fail("kernel_size must be odd");
        if (max_positions == 0) fail("max_positions must be positive");
        if (max_decode_len + 1 > max_positions) fail("max_decode_len + 1 exceeds max_positions");
        break;
    case Family::Transformer:
        if (embed_dim != hidden_dim) fail("embed_dim must equal hidden_dim (the model dimension)");
        if (n_heads == 0 || hidden_dim % n_heads != 0) {
            fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (hidden_dim % 2 != 0) fail("hidden_dim must be even for sinusoidal positions");
        if (ffn_dim == 0) fail("ffn_dim must be positive");
        break;
    }
}

std::map<std::string, std::string> ModelConfig::to_fields() const {
    std::ostringstream drop;
    drop.precision(17);
    drop << dropout_p;
    return {{"family", family_name(family)},
            {"vocab_size", std::to_string(vocab_size)},
            {"embed_dim", std::to_string(embed_dim)},
            {"hidden_dim", std::to_string(hidden_dim)},
            {"n_layers", std::to_string(n_layers)},
            {"n_heads", std::to_string(n_heads)},
            {"ffn_dim", std::to_string(ffn_dim)},
            {"kernel_size", std::to_string(kernel_size)},
            {"max_positions", std::to_string(max_positions)},
            {"dropout_p", drop.str()},
            {"max_decode_len", std::to_string(max_decode_len)}};
}

ModelConfig ModelConfig::from_fields(const std::map<std::string, std::string>& fields) {
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = fields.find(key);
        if (it == fields.end()) throw ConfigError("model config is missing '" + key + "'");
        return it->second;
    };
    auto count = [&](const std::string& key) {
        try {
            return static_cast<std::size_t>(std::stoull(get(key)));
        } catch (const std::logic_error&) {
            throw ConfigError("model config field '" + key + "' is not a count");
        }
    };
    ModelConfig c;
    c.family = parse_family(get("family"));
    c.vocab_size = count("vocab_size");
    c.embed_dim = count("embed_dim");
    c.hidden_dim = count("hidden_dim");
    c.n_layers = count("n_layers");
    c.n_heads = count("n_heads");
    c.ffn_dim = count("ffn_dim");
    c.kernel_size = count("kernel_size");
    c.max_positions = count("max_positions");
    try {
        c.dropout_p = std::stod(get("dropout_p"));
    } catch (const std::logic_error&) {
        throw ConfigError("model config field 'dropout_p' is not a number");
    }
    c.max_decode_len = count("max_decode_len");
    return c;
}

// --- shared model machinery ----------------------------------------------

Tensor Seq2SeqModel::maybe_dropout(const Tensor& x, ForwardPass& pass) const {
    if (!pass.training || config_.dropout_p == 0.0) return x;
    if (!pass.rng) throw ContractError("training forward pass needs a dropout rng");
    return dropout(x, config_.dropout_p, true, *pass.rng);
}

Tensor Seq2SeqModel::embed(const Tensor& table, const TokenBatch& tokens) const {
    return embedding_lookup(table, tokens.ids, {tokens.batch, tokens.max_len});
}

Tensor Seq2SeqModel::forward(const TokenBatch& source, const TokenBatch& decoder_input, ForwardPass& pass) const {
    if (source.batch != decoder_input.batch) {
        throw DimensionError("source batch " + std::to_string(source.batch) + " != target batch " +
                             std::to_string(decoder_input.batch));
    }
    auto enc = encode(source, pass);
    return decode(*enc, decoder_input, pass);
}

Tensor Seq2SeqModel::forward_teacher_forced(const TokenBatch& source, const TokenBatch& target) const {
    ForwardPass pass;
    return forward(source, shift_right(target), pass);
}

Tensor Seq2SeqModel::forward_teacher_forced(const TokenBatch& source, const TokenBatch& target,
                                            Rng& dropout_rng) const {
    ForwardPass pass{true, &dropout_rng, nullptr};
    return forward(source, shift_right(target), pass);
}

TokenBatch Seq2SeqModel::greedy_decode(const TokenBatch& source, std::size_t max_len) const {
    NoGradScope no_grad;
    ForwardPass pass;
    auto enc = encode(source, pass);
    const std::size_t B = source.batch;
    const std::size_t V = config_.vocab_size;
    std::vector<TokenSequence> produced(B);
    std::vector<bool> done(B, false);
    TokenBatch prefix;
    prefix.batch = B;
    prefix.max_len = 1;
    prefix.ids.assign(B, kSos);
    prefix.lengths.assign(B, 1);
    for (std::size_t step = 0; step < max_len; ++step) {
        Tensor logits = decode(*enc, prefix, pass);
        const std::size_t T = prefix.max_len;
        auto data = logits.data();
        std::vector<TokenId> next(B, kPad);
        for (std::size_t b = 0; b < B; ++b) {
            const double* row = data.data() + (b * T + (T - 1)) * V;
            // PAD and SOS are never emitted.
            next[b] = static_cast<TokenId>(std::max_element(row + kEos, row + V) - row);
            if (done[b]) continue;
            if (next[b] == kEos) {
                done[b] = true;
            } else {
                produced[b].push_back(next[b]);
            }
        }
        if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
        TokenBatch grown;
        grown.batch = B;
        grown.max_len = T + 1;
        grown.ids.resize(B * (T + 1));
        grown.lengths.assign(B, T + 1);
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(prefix.ids.begin() + static_cast<std::ptrdiff_t>(b * T), T,
                        grown.ids.begin() + static_cast<std::ptrdiff_t>(b * (T + 1)));
            grown.ids[b * (T + 1) + T] = next[b];
        }
        prefix = std::move(grown);
    }
    return TokenBatch::from_sequences(produced);
}

Tensor Seq2SeqModel::positional_representation(std::size_t) const {
    throw ConfigError(family_name(config_.family) + " has no positional representation");
}

Tensor sinusoidal_encoding(std::size_t n_positions, std::size_t dim) {
    std::vector<double> v(n_positions * dim);
    for (std::size_t pos = 0; pos < n_positions; ++pos) {
        for (std::size_t i = 0; i < dim; i += 2) {
            const double angle =
                static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
            v[pos * dim + i] = std::sin(angle);
            if (i + 1 < dim) v[pos * dim + i + 1] = std::cos(angle);
        }
    }
    return Tensor({n_positions, dim}, std::move(v));
}

ConvLayer ConvLayer::create(ParameterStore& store, const std::string& name, std::size_t channels, std::size_t kernel,
                            Rng& rng) {
    return {Linear::create(store, name, kernel * channels, 2 * channels, rng), kernel};
}

Tensor conv_glu(const Tensor& x, const ConvLayer& layer, bool causal) {
    if (x.rank() != 3 || x.dim(1) == 0) {
        throw DimensionError("conv block: expected [B x T x C] with T >= 1, got " + shape_string(x.shape()));
    }
    if (layer.conv.in_features() != layer.kernel * x.dim(2)) {
        throw ConfigError("conv block: " + std::to_string(x.dim(2)) + " channels do not match the layer");
    }
    const std::size_t left = causal ? layer.kernel - 1 : (layer.kernel - 1) / 2;
    const std::size_t right = causal ? 0 : (layer.kernel - 1) / 2;
    return glu(layer.conv(unfold_time(x, layer.kernel, left, right)));
}

Tensor conv_block(const Tensor& x, const ConvLayer& layer, bool causal) {
    return add(x, conv_glu(x, layer, causal));
}

namespace {

std::vector<bool> active_rows(const std::vector<std::size_t>& lengths, std::size_t t) {
    std::vector<bool> keep(lengths.size());
    for (std::size_t b = 0; b < lengths.size(); ++b) keep[b] = t < lengths[b];
    return keep;
}

/// [B x T x 1] tensor of 1 at real positions and 0 at padding.
Tensor position_mask(const TokenBatch& tokens) {
    std::vector<double> v(tokens.batch * tokens.max_len, 0.0);
    for (std::size_t b = 0; b < tokens.batch; ++b)
        for (std::size_t t = 0; t < tokens.lengths[b]; ++t) v[b * tokens.max_len + t] = 1.0;
    return Tensor({tokens.batch, tokens.max_len, 1}, std::move(v));
}

// --- plain LSTM encoder-decoder --------------------------------------------

class SutskeverModel final : public Seq2SeqModel {
  public:
    SutskeverModel(const ModelConfig& c, Rng& rng) : Seq2SeqModel(c) {
        source_embed_ = params_.add_weight("encoder.embed", {c.vocab_size, c.embed_dim}, c.embed_dim, rng);
        encoder_ = LstmCell::create(params_, "encoder.lstm", c.embed_dim, c.hidden_dim, rng);
        target_embed_ = params_.add_weight("decoder.embed", {c.vocab_size, c.embed_dim}, c.embed_dim, rng);
        decoder_ = LstmCell::create(params_, "decoder.lstm", c.embed_dim, c.hidden_dim, rng);
        output_ = Linear::create(params_, "output", c.hidden_dim, c.vocab_size, rng);
    }

    std::unique_ptr<Encoding> encode(const TokenBatch& source, ForwardPass& pass) const override {
        const std::size_t B = source.batch, H = config_.hidden_dim;
        Tensor x = maybe_dropout(embed(source_embed_, source), pass);
        LstmState state{Tensor({B, H}), Tensor({B, H})};
        std::vector<Tensor> states;
        for (std::size_t t = 0; t < source.max_len; ++t) {
            LstmState next = encoder_(select(x, 1, t), state);
            const auto keep = active_rows(source.lengths, t);
            state = {where_rows(keep, next.hidden, state.hidden), where_rows(keep, next.cell, state.cell)};
            states.push_back(state.hidden);
        }
        auto enc = std::make_unique<RecurrentEncoding>();
        enc->states = stack(states, 1);
        enc->lengths = source.lengths;
        return enc;
    }

    Tensor decode(const Encoding& encoding, const TokenBatch& input, ForwardPass& pass) const override {
        const auto& enc = dynamic_cast<const RecurrentEncoding&>(encoding);
        // The whole source reaches the decoder through v = h_T only.
        Tensor v = last_element_attention(enc.states, enc.lengths).context;
        LstmState state{v, Tensor({input.batch, config_.hidden_dim})};
        Tensor y = maybe_dropout(embed(target_embed_, input), pass);
        std::vector<Tensor> outputs;
        for (std::size_t t = 0; t < input.max_len; ++t) {
            state = decoder_(select(y, 1, t), state);
            outputs.push_back(state.hidden);
        }
        return output_(maybe_dropout(stack(outputs, 1), pass));
    }

  private:
    Tensor source_embed_, target_embed_;
    LstmCell encoder_, decoder_;
    Linear output_;
};

// --- bidirectional GRU encoder with additive attention ---------------------

class BahdanauModel final : public Seq2SeqModel {
  public:
    BahdanauModel(const ModelConfig& c, Rng& rng) : Seq2SeqModel(c) {
        const std::size_t E = c.embed_dim, H = c.hidden_dim, V = c.vocab_size;
        source_embed_ = params_.add_weight("encoder.embed", {V, E}, E, rng);
        forward_cell_ = GruCell::create(params_, "encoder.gru_forward", E, H, rng);
        backward_cell_ = GruCell::create(params_, "encoder.gru_backward", E, H, rng);
        bridge_ = Linear::create(params_, "encoder.bridge", 2 * H, H, rng);
        target_embed_ = params_.add_weight("decoder.embed", {V, E}, E, rng);
        scorer_ = AdditiveScorer::create(params_, "decoder.attention", H, 2 * H, H, rng);
        decoder_ = GruCell::create(params_, "decoder.gru", E + 2 * H, H, rng);
        output_ = Linear::create(params_, "output", H + 2 * H + E, V, rng);
    }

    std::unique_ptr<Encoding> encode(const TokenBatch& source, ForwardPass& pass) const override {
        const std::size_t B = source.batch, H = config_.hidden_dim, T = source.max_len;
        Tensor x = maybe_dropout(embed(source_embed_, source), pass);
        std::vector<Tensor> fwd(T), bwd(T);
        Tensor h({B, H});
        for (std::size_t t = 0; t < T; ++t) {
            h = where_rows(active_rows(source.lengths, t), forward_cell_(select(x, 1, t), h), h);
            fwd[t] = h;
        }
        Tensor forward_final = h;
        h = Tensor({B, H});
        for (std::size_t t = T; t-- > 0;) {
            h = where_rows(active_rows(source.lengths, t), backward_cell_(select(x, 1, t), h), h);
            bwd[t] = h;
        }
        auto enc = std::make_unique<RecurrentEncoding>();
        enc->states = concat({stack(fwd, 1), stack(bwd, 1)}, -1);
        enc->lengths = source.lengths;
        enc->initial_state = attnbench::tanh(bridge_(concat({forward_final, h}, -1)));
        enc->projected_keys = project_keys(enc->states, scorer_);
        if (pass.trace) pass.trace->encoder_states = enc->states;
        return enc;
    }

    Tensor decode(const Encoding& encoding, const TokenBatch& input, ForwardPass& pass) const override {
        const auto& enc = dynamic_cast<const RecurrentEncoding&>(encoding);
        const std::size_t B = input.batch;
        const std::size_t T_src = enc.states.dim(1);
        const Mask key_mask = padding_mask(enc.lengths, T_src);
        Tensor y = maybe_dropout(embed(target_embed_, input), pass);
        Tensor s = enc.initial_state;
        std::vector<Tensor> features;
        for (std::size_t t = 0; t < input.max_len; ++t) {
            Tensor scores = reshape(additive_score_projected(s, enc.projected_keys, scorer_), {B, 1, T_src});
            AttentionResult a = attend(enc.states, add(scores, key_mask.additive()));
            Tensor context = reshape(a.context, {B, enc.states.dim(2)});
            if (pass.trace) {
                AttentionTrace::Step step;
                step.query = s;
                step.weights = reshape(a.weights, {B, T_src});
                step.context = context;
                pass.trace->steps.push_back(step);
            }
            Tensor y_t = select(y, 1, t);
            s = decoder_(concat({y_t, context}, -1), s);
            features.push_back(concat({s, context, y_t}, -1));
        }
        return output_(maybe_dropout(stack(features, 1), pass));
    }

  private:
    Tensor source_embed_, target_embed_;
    GruCell forward_cell_, backward_cell_, decoder_;
    Linear bridge_;
    AdditiveScorer scorer_;
    Linear output_;
};

// --- convolutional encoder-decoder ----------------------------------------

struct ConvEncoding : Seq2SeqModel::Encoding {
    Tensor outputs;      // z [B x T x E]
    Tensor embeddings;   // e [B x T x E]
    std::vector<std::size_t> lengths;
};

class ConvModel final : public Seq2SeqModel {
  public:
    ConvModel(const ModelConfig& c, Rng& rng) : Seq2SeqModel(c) {
        const std::size_t E = c.embed_dim, H = c.hidden_dim, V = c.vocab_size, P = c.max_positions;
        source_embed_ = params_.add_weight("encoder.embed", {V, E}, E, rng);
        source_positions_ = params_.add_weight("encoder.positions", {P, E}, E, rng);
        encoder_in_ = Linear::create(params_, "encoder.embed_to_hidden", E, H, rng);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            encoder_layers_.push_back(
                ConvLayer::create(params_, "encoder.conv" + std::to_string(l), H, c.kernel_size, rng));
        }
        encoder_out_ = Linear::create(params_, "encoder.hidden_to_embed", H, E, rng);
        target_embed_ = params_.add_weight("decoder.embed", {V, E}, E, rng);
        target_positions_ = params_.add_weight("decoder.positions", {P, E}, E, rng);
        decoder_in_ = Linear::create(params_, "decoder.embed_to_hidden", E, H, rng);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            decoder_layers_.push_back(
                ConvLayer::create(params_, "decoder.conv" + std::to_string(l), H, c.kernel_size, rng));
        }
        attention_in_ = Linear::create(params_, "decoder.attention_hidden_to_embed", H, E, rng);
        attention_out_ = Linear::create(params_, "decoder.attention_embed_to_hidden", E, H, rng);
        decoder_out_ = Linear::create(params_, "decoder.hidden_to_embed", H, E, rng);
        output_ = Linear::create(params_, "output", E, V, rng);
    }

    Tensor positional_representation(std::size_t n_positions) const override {
        check_length(n_positions);
        return slice(source_positions_, 0, 0, n_positions);
    }

    std::unique_ptr<Encoding> encode(const TokenBatch& source, ForwardPass& pass) const override {
        const Tensor pad = position_mask(source);
        Tensor e = mul(maybe_dropout(embed_with_positions(source_embed_, source_positions_, source), pass), pad);
        Tensor x = mul(encoder_in_(e), pad);
        for (const auto& layer : encoder_layers_) x = mul(conv_block(x, layer, false), pad);
        auto enc = std::make_unique<ConvEncoding>();
        enc->outputs = mul(encoder_out_(x), pad);
        enc->embeddings = e;
        enc->lengths = source.lengths;
        if (pass.trace) {
            pass.trace->encoder_states = enc->outputs;
            pass.trace->source_embed = enc->embeddings;
        }
        return enc;
    }

    Tensor decode(const Encoding& encoding, const TokenBatch& input, ForwardPass& pass) const override {
        const auto& enc = dynamic_cast<const ConvEncoding&>(encoding);
        const Mask key_mask = padding_mask(enc.lengths, enc.outputs.dim(1));
        Tensor g = maybe_dropout(embed_with_positions(target_embed_, target_positions_, input), pass);
        Tensor x = decoder_in_(g);
        for (const auto& layer : decoder_layers_) {
            Tensor h = conv_glu(x, layer, true);
            Tensor d = decoder_state_summary(h, g, attention_in_.weight, attention_in_.bias);
            AttentionResult a = convs2s_attend(d, enc.outputs, enc.embeddings, &key_mask);
            if (pass.trace) {
                AttentionTrace::Step step;
                step.hidden = h;
                step.target_embed = g;
                step.summary = d;
                step.weights = a.weights;
                step.context = a.context;
                pass.trace->steps.push_back(step);
            }
            x = add(x, add(h, attention_out_(a.context)));
        }
        return output_(maybe_dropout(decoder_out_(x), pass));
    }

  private:
    void check_length(std::size_t n) const {
        if (n > config_.max_positions) {
            throw SequenceLengthError("sequence of " + std::to_string(n) + " positions exceeds the " +
                                      std::to_string(config_.max_positions) + " learned position vectors");
        }
    }

    Tensor embed_with_positions(const Tensor& table, const Tensor& positions, const TokenBatch& tokens) const {
        check_length(tokens.max_len);
        return add(embed(table, tokens), slice(positions, 0, 0, tokens.max_len));
    }

    Tensor source_embed_, source_positions_, target_embed_, target_positions_;
    Linear encoder_in_, encoder_out_, decoder_in_, decoder_out_;
    std::vector<ConvLayer> encoder_layers_, decoder_layers_;
    Linear attention_in_, attention_out_, output_;
};

// --- transformer -------------------------------------------------------------

struct TransformerEncoding : Seq2SeqModel::Encoding {
    Tensor memory;
    std::vector<std::size_t> lengths;
};

class TransformerModel final : public Seq2SeqModel {
  public:
    TransformerModel(const ModelConfig& c, Rng& rng) : Seq2SeqModel(c) {
        const std::size_t D = c.hidden_dim, V = c.vocab_size;
        source_embed_ = params_.add_weight("encoder.embed", {V, D}, D, rng);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            const std::string p = "encoder.layer" + std::to_string(l);
            EncoderLayer layer;
            layer.self_attention = MultiHeadParams::create(params_, p + ".self_attention", D, rng);
            layer.norm1 = LayerNorm::create(params_, p + ".norm1", D);
            layer.ffn_in = Linear::create(params_, p + ".ffn_in", D, c.ffn_dim, rng);
            layer.ffn_out = Linear::create(params_, p + ".ffn_out", c.ffn_dim, D, rng);
            layer.norm2 = LayerNorm::create(params_, p + ".norm2", D);
            encoder_.push_back(layer);
        }
        target_embed_ = params_.add_weight("decoder.embed", {V, D}, D, rng);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            const std::string p = "decoder.layer" + std::to_string(l);
            DecoderLayer layer;
            layer.self_attention = MultiHeadParams::create(params_, p + ".self_attention", D, rng);
            layer.norm1 = LayerNorm::create(params_, p + ".norm1", D);
            layer.cross_attention = MultiHeadParams::create(params_, p + ".cross_attention", D, rng);
            layer.norm2 = LayerNorm::create(params_, p + ".norm2", D);
            layer.ffn_in = Linear::create(params_, p + ".ffn_in", D, c.ffn_dim, rng);
            layer.ffn_out = Linear::create(params_, p + ".ffn_out", c.ffn_dim, D, rng);
            layer.norm3 = LayerNorm::create(params_, p + ".norm3", D);
            decoder_.push_back(layer);
        }
        output_ = Linear::create(params_, "output", D, V, rng);
    }

    Tensor positional_representation(std::size_t n_positions) const override {
        return sinusoidal_encoding(n_positions, config_.hidden_dim);
    }

    std::unique_ptr<Encoding> encode(const TokenBatch& source, ForwardPass& pass) const override {
        const Mask key_mask = padding_mask(source.lengths, source.max_len);
        Tensor x = maybe_dropout(embed_scaled(source_embed_, source), pass);
        for (const auto& layer : encoder_) {
            Tensor a = multi_head(x, x, config_.n_heads, layer.self_attention, &key_mask);
            x = layer.norm1(add(x, maybe_dropout(a, pass)));
            x = layer.norm2(add(x, maybe_dropout(feed_forward(x, layer.ffn_in, layer.ffn_out), pass)));
        }
        auto enc = std::make_unique<TransformerEncoding>();
        enc->memory = x;
        enc->lengths = source.lengths;
        return enc;
    }

    Tensor decode(const Encoding& encoding, const TokenBatch& input, ForwardPass& pass) const override {
        const auto& enc = dynamic_cast<const TransformerEncoding&>(encoding);
        const Mask key_mask = padding_mask(enc.lengths, enc.memory.dim(1));
        const Mask causal = causal_mask(input.max_len);
        Tensor y = maybe_dropout(embed_scaled(target_embed_, input), pass);
        for (const auto& layer : decoder_) {
            Tensor a = multi_head(y, y, config_.n_heads, layer.self_attention, &causal);
            y = layer.norm1(add(y, maybe_dropout(a, pass)));
            Tensor c = multi_head(y, enc.memory, config_.n_heads, layer.cross_attention, &key_mask);
            y = layer.norm2(add(y, maybe_dropout(c, pass)));
            y = layer.norm3(add(y, maybe_dropout(feed_forward(y, layer.ffn_in, layer.ffn_out), pass)));
        }
        return output_(y);
    }

  private:
    struct EncoderLayer {
        MultiHeadParams self_attention;
        LayerNorm norm1;
        Linear ffn_in, ffn_out;
        LayerNorm norm2;
    };
    struct DecoderLayer {
        MultiHeadParams self_attention;
        LayerNorm norm1;
        MultiHeadParams cross_attention;
        LayerNorm norm2;
        Linear ffn_in, ffn_out;
        LayerNorm norm3;
    };

    static Tensor feed_forward(const Tensor& x, const Linear& in, const Linear& out) { return out(relu(in(x))); }

    Tensor embed_scaled(const Tensor& table, const TokenBatch& tokens) const {
        const double s = std::sqrt(static_cast<double>(config_.hidden_dim));
        return add(scale(embed(table, tokens), s), sinusoidal_encoding(tokens.max_len, config_.hidden_dim));
    }

    Tensor source_embed_, target_embed_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    Linear output_;
};

} // namespace

std::unique_ptr<Seq2SeqModel> build_model(const ModelConfig& config, Rng& rng) {
    config.validate();
    switch (config.family) {
    case Family::LstmPlain: return std::make_unique<SutskeverModel>(config, rng);
    case Family::GruBahdanau: return std::make_unique<BahdanauModel>(config, rng);
    case Family::ConvS2S: return std::make_unique<ConvModel>(config, rng);
    case Family::Transformer: return std::make_unique<TransformerModel>(config, rng);
    }
    throw ConfigError("unknown model family");
}

} // namespace attnbench
