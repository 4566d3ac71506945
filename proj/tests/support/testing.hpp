#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "attnbench/ops.hpp"
#include "attnbench/random.hpp"
#include "attnbench/tensor.hpp"

namespace attnbench::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Fixed random weighting so that sum(w * y) exercises every output element
/// with a different coefficient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    return sum(mul(y, random_tensor(y.shape(), rng, -1.0, 1.0, false)));
}

struct GradCheck {
    double max_error = 0.0; // |analytic - numeric| / max(|analytic|, |numeric|, floor)
    std::string where;
    std::size_t checked = 0;
};

/// Compares backward gradients of loss_fn with central differences for every
/// element of every tensor in `inputs`.
inline GradCheck grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& inputs,
                            double step = 1e-5, double floor = 1e-3) {
    for (const auto& t : inputs) t.clear_grad();
    {
        Tape tape;
        Tensor loss;
        {
            TapeScope scope(tape);
            loss = loss_fn();
        }
        tape.backward(loss);
    }
    GradCheck result;
    NoGradScope no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor& t = inputs[k];
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        auto data = t.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + step;
            const double up = loss_fn().item();
            data[i] = saved - step;
            const double down = loss_fn().item();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double err =
                std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            ++result.checked;
            if (err > result.max_error) {
                result.max_error = err;
                result.where = "input " + std::to_string(k) + " element " + std::to_string(i) + ": analytic " +
                               std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return result;
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("attnbench_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream(path, std::ios::binary) << text;
}

} // namespace attnbench::testing
