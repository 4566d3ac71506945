#include "attnbench/nn.hpp"

#include <algorithm>
#include <cmath>

#include "attnbench/errors.hpp"

namespace attnbench {

Tensor ParameterStore::add(const std::string& name, Tensor t) {
    if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    entries_.push_back({name, t});
    return t;
}

Tensor ParameterStore::add_weight(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
    if (fan_in == 0) throw ConfigError("parameter '" + name + "' has zero fan-in");
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = rng.uniform(-bound, bound);
    return add(name, Tensor(std::move(shape), std::move(values)));
}

Tensor ParameterStore::add_zeros(const std::string& name, Shape shape) { return add(name, Tensor(std::move(shape))); }

Tensor ParameterStore::add_constant(const std::string& name, Shape shape, double value) {
    return add(name, Tensor::full(std::move(shape), value));
}

const Tensor& ParameterStore::get(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e.tensor;
    }
    throw ConfigError("no parameter named '" + name + "'");
}

bool ParameterStore::contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

void ParameterStore::clear_grad() {
    for (auto& e : entries_) e.tensor.clear_grad();
}

void ParameterStore::round_to_float() {
    for (auto& e : entries_) {
        for (double& v : e.tensor.mutable_data()) v = static_cast<double>(static_cast<float>(v));
    }
}

Linear Linear::create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      bool with_bias) {
    Linear l;
    l.weight = store.add_weight(name + ".weight", {in, out}, in, rng);
    if (with_bias) l.bias = store.add_zeros(name + ".bias", {out});
    return l;
}

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, std::size_t width) {
    return {store.add_constant(name + ".gain", {width}, 1.0), store.add_zeros(name + ".shift", {width})};
}

LstmCell LstmCell::create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                          Rng& rng) {
    LstmCell c;
    c.input_weight = store.add_weight(name + ".input_weight", {in, 4 * hidden}, in, rng);
    c.hidden_weight = store.add_weight(name + ".hidden_weight", {hidden, 4 * hidden}, hidden, rng);
    c.bias = store.add_zeros(name + ".bias", {4 * hidden});
    return c;
}

LstmState LstmCell::operator()(const Tensor& x, const LstmState& state) const {
    const std::size_t H = hidden_size();
    if (x.rank() != 2 || x.dim(1) != input_weight.dim(0) || state.hidden.rank() != 2 || state.hidden.dim(1) != H) {
        throw ConfigError("lstm cell: input " + shape_string(x.shape()) + " / state " +
                          shape_string(state.hidden.shape()) + " do not match weights " +
                          shape_string(input_weight.shape()));
    }
    Tensor gates = add(add(matmul(x, input_weight), matmul(state.hidden, hidden_weight)), bias);
    Tensor i = sigmoid(slice(gates, 1, 0, H));
    Tensor f = sigmoid(slice(gates, 1, H, 2 * H));
    Tensor g = attnbench::tanh(slice(gates, 1, 2 * H, 3 * H));
    Tensor o = sigmoid(slice(gates, 1, 3 * H, 4 * H));
    Tensor cell = add(mul(f, state.cell), mul(i, g));
    Tensor hidden = mul(o, attnbench::tanh(cell));
    return {hidden, cell};
}

GruCell GruCell::create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                        Rng& rng) {
    GruCell c;
    c.input_weight = store.add_weight(name + ".input_weight", {in, 3 * hidden}, in, rng);
    c.hidden_weight = store.add_weight(name + ".hidden_weight", {hidden, 3 * hidden}, hidden, rng);
    c.input_bias = store.add_zeros(name + ".input_bias", {3 * hidden});
    c.hidden_bias = store.add_zeros(name + ".hidden_bias", {3 * hidden});
    return c;
}

Tensor GruCell::operator()(const Tensor& x, const Tensor& hidden) const {
    const std::size_t H = hidden_size();
    if (x.rank() != 2 || x.dim(1) != input_weight.dim(0) || hidden.rank() != 2 || hidden.dim(1) != H) {
        throw ConfigError("gru cell: input " + shape_string(x.shape()) + " / state " + shape_string(hidden.shape()) +
                          " do not match weights " + shape_string(input_weight.shape()));
    }
    Tensor xi = add(matmul(x, input_weight), input_bias);
    Tensor hh = add(matmul(hidden, hidden_weight), hidden_bias);
    Tensor r = sigmoid(add(slice(xi, 1, 0, H), slice(hh, 1, 0, H)));
    Tensor z = sigmoid(add(slice(xi, 1, H, 2 * H), slice(hh, 1, H, 2 * H)));
    Tensor n = attnbench::tanh(add(slice(xi, 1, 2 * H, 3 * H), mul(r, slice(hh, 1, 2 * H, 3 * H))));
    // h' = n + z * (h - n)
    return add(n, mul(z, sub(hidden, n)));
}

} // namespace attnbench
