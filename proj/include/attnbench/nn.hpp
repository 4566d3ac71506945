#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "attnbench/ops.hpp"
#include "attnbench/random.hpp"
#include "attnbench/tensor.hpp"

namespace attnbench {

/// Ordered, named collection of trainable tensors. Order is registration order
/// and is what checkpoints and optimizers iterate over.
class ParameterStore {
  public:
    struct Entry {
        std::string name;
        Tensor tensor;
    };

    /// Weight matrix initialized uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    Tensor add_weight(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);
    /// Zero-initialized tensor (biases, layer-norm shifts).
    Tensor add_zeros(const std::string& name, Shape shape);
    /// Tensor filled with a constant (layer-norm gains).
    Tensor add_constant(const std::string& name, Shape shape, double value);

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;
    void zero_grad();
    /// Drops every gradient buffer; parameters missed by the next backward
    /// pass are then detectable through has_grad().
    void clear_grad();
    /// Rounds every value to the nearest IEEE single, the checkpoint precision.
    void round_to_float();

  private:
    Tensor add(const std::string& name, Tensor t);
    std::vector<Entry> entries_;
};

/// y = x W + b with W stored [in x out].
struct Linear {
    Tensor weight;
    Tensor bias; // undefined when built without bias

    static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                         bool with_bias = true);
    Tensor operator()(const Tensor& x) const;
    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }
};

struct LayerNorm {
    Tensor gain;
    Tensor shift;

    static LayerNorm create(ParameterStore& store, const std::string& name, std::size_t width);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, shift); }
};

struct LstmState {
    Tensor hidden; // [B x H]
    Tensor cell;   // [B x H]
};

/// Standard LSTM cell, gate order (input, forget, candidate, output).
struct LstmCell {
    Tensor input_weight;  // [in x 4H]
    Tensor hidden_weight; // [H x 4H]
    Tensor bias;          // [4H]

    static LstmCell create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                           Rng& rng);
    std::size_t hidden_size() const { return hidden_weight.dim(0); }
    LstmState operator()(const Tensor& x, const LstmState& state) const;
};

/// Standard GRU cell, gate order (reset, update, candidate):
///   r = s(x Wr + h Ur + b), z = s(x Wz + h Uz + b), n = tanh(x Wn + bn + r * (h Un + cn)),
///   h' = (1 - z) * n + z * h.
struct GruCell {
    Tensor input_weight;  // [in x 3H]
    Tensor hidden_weight; // [H x 3H]
    Tensor input_bias;    // [3H]
    Tensor hidden_bias;   // [3H]

    static GruCell create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                          Rng& rng);
    std::size_t hidden_size() const { return hidden_weight.dim(0); }
    Tensor operator()(const Tensor& x, const Tensor& hidden) const;
};

} // namespace attnbench
