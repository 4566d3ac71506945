#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace attnbench {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

namespace detail {

struct TensorStorage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until a gradient is accumulated
    bool requires_grad = false;
};

} // namespace detail

/// Dense row-major array of doubles with an optional gradient slot.
///
/// A Tensor is a cheap handle: copies share storage. Operations never write
/// into their inputs' data; only the gradient slot is written during
/// backward, and parameter data is written by optimizers and loaders.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double value);
    static Tensor full(Shape shape, double value);

    bool defined() const { return static_cast<bool>(storage_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data() const;
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag) const;

    bool has_grad() const;
    std::span<const double> grad() const;
    /// Gradient buffer, allocated (zero-filled) on first access.
    std::span<double> mutable_grad() const;
    void zero_grad() const;
    /// Releases the gradient buffer so has_grad() is false again.
    void clear_grad() const;

    /// Copy of the values with no gradient history.
    Tensor detach() const;
    bool shares_storage(const Tensor& other) const { return storage_ == other.storage_; }

  private:
    std::shared_ptr<detail::TensorStorage> storage_;
};

/// Ordered record of backward rules for one forward pass.
///
/// Operations append to the tape that is active on the calling thread (see
/// TapeScope) whenever one of their inputs requires a gradient. backward()
/// replays the rules in exact reverse recording order and then releases them.
class Tape {
  public:
    using BackwardRule = std::function<void()>;

    void record(BackwardRule rule) { rules_.push_back(std::move(rule)); }
    std::size_t size() const { return rules_.size(); }
    void clear() { rules_.clear(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates. loss must hold one element.
    void backward(const Tensor& loss);

  private:
    std::vector<BackwardRule> rules_;
};

/// Tape that operations on this thread record into, or nullptr (no-grad mode).
Tape* active_tape();

/// Makes a tape active on the current thread for the lifetime of the scope.
class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* previous_;
};

/// Disables recording on the current thread for the lifetime of the scope.
class NoGradScope {
  public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

  private:
    Tape* previous_;
};

void backward(Tape& tape, const Tensor& loss);

/// Keeps freed tensor buffers in the process heap. Training allocates and
/// frees the same sizes every step, and returning them to the OS each time
/// costs more than the arithmetic. No-op outside glibc.
void tune_allocator();

} // namespace attnbench
