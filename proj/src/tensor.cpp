#include "attnbench/tensor.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <sstream>

#include "attnbench/errors.hpp"

namespace attnbench {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) : storage_(std::make_shared<detail::TensorStorage>()) {
    storage_->data.assign(shape_numel(shape), 0.0);
    storage_->shape = std::move(shape);
    storage_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : storage_(std::make_shared<detail::TensorStorage>()) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_string(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    storage_->shape = std::move(shape);
    storage_->data = std::move(values);
    storage_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

const Shape& Tensor::shape() const {
    static const Shape empty;
    return storage_ ? storage_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape()));
    }
    return storage_->shape[axis];
}

std::size_t Tensor::numel() const { return storage_ ? storage_->data.size() : 0; }

std::span<const double> Tensor::data() const {
    if (!storage_) return {};
    return storage_->data;
}

std::span<double> Tensor::mutable_data() const {
    if (!storage_) return {};
    return storage_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return storage_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank does not match " + shape_string(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= storage_->shape[axis]) throw DimensionError("index out of range for " + shape_string(shape()));
        flat = flat * storage_->shape[axis] + i;
        ++axis;
    }
    return storage_->data[flat];
}

bool Tensor::requires_grad() const { return storage_ && storage_->requires_grad; }

void Tensor::set_requires_grad(bool flag) const {
    if (storage_) storage_->requires_grad = flag;
}

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!storage_) return {};
    return storage_->grad;
}

std::span<double> Tensor::mutable_grad() const {
    if (!storage_) return {};
    if (storage_->grad.size() != storage_->data.size()) storage_->grad.assign(storage_->data.size(), 0.0);
    return storage_->grad;
}

void Tensor::zero_grad() const {
    if (!storage_) return;
    storage_->grad.assign(storage_->data.size(), 0.0);
}

void Tensor::clear_grad() const {
    if (!storage_) return;
    storage_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<double>(data().begin(), data().end())); }

namespace {
thread_local Tape* current_tape = nullptr;
} // namespace

Tape* active_tape() { return current_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
    }
    Tensor seed = loss;
    auto g = seed.mutable_grad();
    g[0] += 1.0;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    rules_.clear();
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

void tune_allocator() {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

} // namespace attnbench
