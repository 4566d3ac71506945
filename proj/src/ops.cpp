#include "attnbench/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "attnbench/errors.hpp"

namespace attnbench {

namespace {

Tape* recording(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = active_tape();
    if (!tape) return nullptr;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return tape;
    }
    return nullptr;
}

Tape* recording(const std::vector<Tensor>& inputs) {
    Tape* tape = active_tape();
    if (!tape) return nullptr;
    for (const Tensor& t : inputs) {
        if (t.requires_grad()) return tape;
    }
    return nullptr;
}

std::size_t normalize_axis(int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// C[m x n] += op(A) * B[q x n] where op(A)(r, c) = A[r * rs + c * cs].
// Register tiles of 4 rows x 16 columns; the tail falls back to row axpy loops.
using Vec4 = double __attribute__((vector_size(32)));

inline Vec4 load4(const double* p) {
    Vec4 v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store4(double* p, Vec4 v) { std::memcpy(p, &v, sizeof v); }

void gemm_kernel(const double* A, std::size_t rs, std::size_t cs, const double* B, double* C, std::size_t m,
                 std::size_t q, std::size_t n) {
    constexpr std::size_t MR = 4, NR = 16, NV = NR / 4;
    std::size_t i = 0;
    for (; i + MR <= m; i += MR) {
        std::size_t j = 0;
        for (; j + NR <= n; j += NR) {
            Vec4 acc[MR][NV];
            for (std::size_t r = 0; r < MR; ++r)
                for (std::size_t v = 0; v < NV; ++v) acc[r][v] = load4(C + (i + r) * n + j + 4 * v);
            for (std::size_t p = 0; p < q; ++p) {
                const double* b = B + p * n + j;
                Vec4 bv[NV];
                for (std::size_t v = 0; v < NV; ++v) bv[v] = load4(b + 4 * v);
                for (std::size_t r = 0; r < MR; ++r) {
                    const double av = A[(i + r) * rs + p * cs];
                    for (std::size_t v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
                }
            }
            for (std::size_t r = 0; r < MR; ++r)
                for (std::size_t v = 0; v < NV; ++v) store4(C + (i + r) * n + j + 4 * v, acc[r][v]);
        }
        if (j < n) {
            for (std::size_t r = 0; r < MR; ++r) {
                double* c = C + (i + r) * n;
                for (std::size_t p = 0; p < q; ++p) {
                    const double av = A[(i + r) * rs + p * cs];
                    const double* b = B + p * n;
                    for (std::size_t jj = j; jj < n; ++jj) c[jj] += av * b[jj];
                }
            }
        }
    }
    for (; i < m; ++i) {
        double* c = C + i * n;
        for (std::size_t p = 0; p < q; ++p) {
            const double av = A[i * rs + p * cs];
            const double* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
    gemm_kernel(A, k, 1, B, C, m, k, n);
}

// C[k x n] += A[m x k]^T * G[m x n]
void gemm_tn_acc(const double* A, const double* G, double* C, std::size_t m, std::size_t k, std::size_t n) {
    gemm_kernel(A, 1, k, G, C, k, m, n);
}

void transpose_into(const double* src, double* dst, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// --- broadcasting -------------------------------------------------------

struct BroadcastPlan {
    Shape out;
    enum class Kind { Same, SuffixB, SuffixA, General } kind = Kind::General;
    std::vector<std::size_t> a_index; // General only
    std::vector<std::size_t> b_index;
};

Shape strip_leading_ones(const Shape& s) {
    std::size_t i = 0;
    while (i < s.size() && s[i] == 1) ++i;
    return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
    const Shape s = strip_leading_ones(small);
    if (s.size() > big.size()) return false;
    return std::equal(s.begin(), s.end(), big.end() - static_cast<std::ptrdiff_t>(s.size()));
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out = a;
        plan.kind = BroadcastPlan::Kind::Same;
        return plan;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    Shape ap(rank, 1), bp(rank, 1);
    std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
    std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
    plan.out.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (ap[i] == bp[i] || bp[i] == 1) {
            plan.out[i] = ap[i];
        } else if (ap[i] == 1) {
            plan.out[i] = bp[i];
        } else {
            throw DimensionError("cannot broadcast shapes " + shape_string(a) + " and " + shape_string(b));
        }
    }
    if (plan.out == a && is_suffix(b, a)) {
        plan.kind = BroadcastPlan::Kind::SuffixB;
        return plan;
    }
    if (plan.out == b && is_suffix(a, b)) {
        plan.kind = BroadcastPlan::Kind::SuffixA;
        return plan;
    }
    std::vector<std::size_t> as(rank, 0), bs(rank, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = rank; i-- > 0;) {
        as[i] = ap[i] == 1 ? 0 : sa;
        bs[i] = bp[i] == 1 ? 0 : sb;
        sa *= ap[i];
        sb *= bp[i];
    }
    const std::size_t n = shape_numel(plan.out);
    plan.a_index.resize(n);
    plan.b_index.resize(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        plan.a_index[flat] = ia;
        plan.b_index[flat] = ib;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += as[d];
            ib += bs[d];
            if (idx[d] < plan.out[d]) break;
            ia -= as[d] * idx[d];
            ib -= bs[d] * idx[d];
            idx[d] = 0;
        }
    }
    plan.kind = BroadcastPlan::Kind::General;
    return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, std::size_t n, std::size_t na, std::size_t nb, F f) {
    switch (plan.kind) {
    case BroadcastPlan::Kind::Same:
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        break;
    case BroadcastPlan::Kind::SuffixB:
        for (std::size_t base = 0; base < n; base += nb)
            for (std::size_t j = 0; j < nb; ++j) f(base + j, base + j, j);
        break;
    case BroadcastPlan::Kind::SuffixA:
        for (std::size_t base = 0; base < n; base += na)
            for (std::size_t j = 0; j < na; ++j) f(base + j, j, base + j);
        break;
    case BroadcastPlan::Kind::General:
        for (std::size_t i = 0; i < n; ++i) f(i, plan.a_index[i], plan.b_index[i]);
        break;
    }
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
    Tensor out(plan->out);
    const double* x = a.data().data();
    const double* y = b.data().data();
    double* o = out.mutable_data().data();
    for_each_broadcast(*plan, out.numel(), a.numel(), b.numel(),
                       [=](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = fwd(x[ia], y[ib]); });
    if (Tape* tape = recording({&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, plan, da, db]() {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            const double* x = a.data().data();
            const double* y = b.data().data();
            const std::size_t n = out.numel(), na = a.numel(), nb = b.numel();
            if (a.requires_grad()) {
                double* ga = a.mutable_grad().data();
                for_each_broadcast(*plan, n, na, nb, [=](std::size_t i, std::size_t ia, std::size_t ib) {
                    ga[ia] += da(x[ia], y[ib], g[i]);
                });
            }
            if (b.requires_grad()) {
                double* gb = b.mutable_grad().data();
                for_each_broadcast(*plan, n, na, nb, [=](std::size_t i, std::size_t ia, std::size_t ib) {
                    gb[ib] += db(x[ia], y[ib], g[i]);
                });
            }
        });
    }
    return out;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv_from_output) {
    Tensor out(x.shape());
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = fwd(in[i]);
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, deriv_from_output]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto in = x.data();
            auto y = out.data();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv_from_output(in[i], y[i]);
        });
    }
    return out;
}

void require_rank_at_least(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() < r) {
        throw DimensionError(std::string(op) + ": expected rank >= " + std::to_string(r) + ", got " +
                             shape_string(t.shape()));
    }
}

} // namespace

// --- products -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank_at_least(a, 1, "matmul");
    if (b.rank() != 2 || a.shape().back() != b.dim(0)) {
        throw DimensionError("matmul: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                             " do not conform");
    }
    const std::size_t k = b.dim(0);
    const std::size_t n = b.dim(1);
    const std::size_t m = a.numel() / std::max<std::size_t>(k, 1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    gemm_acc(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    if (Tape* tape = recording({&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                std::vector<double> bt(k * n);
                transpose_into(b.data().data(), bt.data(), k, n);
                gemm_acc(g, bt.data(), a.mutable_grad().data(), m, n, k);
            }
            if (b.requires_grad()) gemm_tn_acc(a.data().data(), g, b.mutable_grad().data(), m, k, n);
        });
    }
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    require_rank_at_least(a, 2, "bmm");
    require_rank_at_least(b, 2, "bmm");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const std::size_t r = as.size();
    if (bs.size() != r || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
        throw DimensionError("bmm: batch dimensions differ: " + shape_string(as) + " vs " + shape_string(bs));
    }
    const std::size_t m = as[r - 2], k = as[r - 1];
    const std::size_t bk = transpose_b ? bs[r - 1] : bs[r - 2];
    const std::size_t n = transpose_b ? bs[r - 2] : bs[r - 1];
    if (bk != k) {
        throw DimensionError("bmm: inner dimensions differ: " + shape_string(as) + " vs " + shape_string(bs) +
                             (transpose_b ? " (transposed)" : ""));
    }
    const std::size_t batch = shape_numel(Shape(as.begin(), as.end() - 2));
    Shape out_shape(as.begin(), as.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    {
        const double* A = a.data().data();
        const double* B = b.data().data();
        double* C = out.mutable_data().data();
        std::vector<double> bt(transpose_b ? k * n : 0);
        for (std::size_t i = 0; i < batch; ++i) {
            const double* Bi = B + i * k * n;
            if (transpose_b) {
                transpose_into(Bi, bt.data(), n, k);
                Bi = bt.data();
            }
            gemm_acc(A + i * m * k, Bi, C + i * m * n, m, k, n);
        }
    }
    if (Tape* tape = recording({&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, batch, m, k, n, transpose_b]() mutable {
            if (!out.has_grad()) return;
            const double* G = out.grad().data();
            const double* A = a.data().data();
            const double* B = b.data().data();
            double* GA = a.requires_grad() ? a.mutable_grad().data() : nullptr;
            double* GB = b.requires_grad() ? b.mutable_grad().data() : nullptr;
            std::vector<double> tmp(std::max(k * n, m * n));
            for (std::size_t i = 0; i < batch; ++i) {
                const double* Gi = G + i * m * n;
                const double* Ai = A + i * m * k;
                const double* Bi = B + i * k * n;
                if (GA) {
                    // dA = G * B^T; B^T is [n x k] which is B itself when transposed.
                    if (transpose_b) {
                        gemm_acc(Gi, Bi, GA + i * m * k, m, n, k);
                    } else {
                        transpose_into(Bi, tmp.data(), k, n);
                        gemm_acc(Gi, tmp.data(), GA + i * m * k, m, n, k);
                    }
                }
                if (GB) {
                    if (transpose_b) {
                        // B is [n x k]: dB = G^T * A
                        gemm_tn_acc(Gi, Ai, GB + i * k * n, m, n, k);
                    } else {
                        gemm_tn_acc(Ai, Gi, GB + i * k * n, m, k, n);
                    }
                }
            }
        });
    }
    return out;
}

// --- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
        [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
        [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x * y; }, [](double, double y, double g) { return g * y; },
        [](double x, double, double g) { return g * x; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary(
        x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
    return unary(
        x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor tanh(const Tensor& x) {
    return unary(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& x, int axis) {
    require_rank_at_least(x, 1, "softmax");
    const std::size_t ax = normalize_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    Tensor out(x.shape());
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t outer = 0; outer < s.outer; ++outer) {
        for (std::size_t inner = 0; inner < s.inner; ++inner) {
            const std::size_t base = outer * s.len * s.inner + inner;
            double mx = kNegInf;
            for (std::size_t i = 0; i < s.len; ++i) mx = std::max(mx, in[base + i * s.inner]);
            if (mx == kNegInf) throw MaskingError("softmax: every entry of a slice is -inf");
            double total = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) {
                const double e = std::exp(in[base + i * s.inner] - mx);
                o[base + i * s.inner] = e;
                total += e;
            }
            const double inv = 1.0 / total;
            for (std::size_t i = 0; i < s.len; ++i) o[base + i * s.inner] *= inv;
        }
    }
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, s]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto y = out.data();
            auto gx = x.mutable_grad();
            for (std::size_t outer = 0; outer < s.outer; ++outer) {
                for (std::size_t inner = 0; inner < s.inner; ++inner) {
                    const std::size_t base = outer * s.len * s.inner + inner;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < s.len; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
                    for (std::size_t i = 0; i < s.len; ++i) {
                        const std::size_t j = base + i * s.inner;
                        gx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        });
    }
    return out;
}

Tensor glu(const Tensor& x) {
    require_rank_at_least(x, 1, "glu");
    const std::size_t width = x.shape().back();
    if (width % 2 != 0) throw DimensionError("glu: last dimension must be even, got " + shape_string(x.shape()));
    const std::size_t half = width / 2;
    const std::size_t rows = x.numel() / std::max<std::size_t>(width, 1);
    Shape out_shape = x.shape();
    out_shape.back() = half;
    Tensor out(out_shape);
    std::vector<double> gate(rows * half);
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < half; ++c) {
            const double sg = 1.0 / (1.0 + std::exp(-in[r * width + half + c]));
            gate[r * half + c] = sg;
            o[r * half + c] = in[r * width + c] * sg;
        }
    }
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, gate = std::move(gate), rows, half, width]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto in = x.data();
            auto gx = x.mutable_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < half; ++c) {
                    const double sg = gate[r * half + c];
                    const double gi = g[r * half + c];
                    gx[r * width + c] += gi * sg;
                    gx[r * width + half + c] += gi * in[r * width + c] * sg * (1.0 - sg);
                }
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : 0.0;
    Tensor m(x.shape(), std::move(mask));
    return mul(x, m);
}

Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids, const Shape& index_shape) {
    if (table.rank() != 2) throw DimensionError("embedding table must be [V x d], got " + shape_string(table.shape()));
    if (shape_numel(index_shape) != ids.size()) {
        throw DimensionError("embedding: index shape " + shape_string(index_shape) + " does not hold " +
                             std::to_string(ids.size()) + " ids");
    }
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(vocab));
        }
    }
    Shape out_shape = index_shape;
    out_shape.push_back(d);
    Tensor out(out_shape);
    auto src = table.data();
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    o.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    if (Tape* tape = recording({&table})) {
        out.set_requires_grad(true);
        std::vector<TokenId> kept(ids.begin(), ids.end());
        tape->record([table, out, kept = std::move(kept), d]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gt = table.mutable_grad();
            for (std::size_t i = 0; i < kept.size(); ++i) {
                double* row = gt.data() + static_cast<std::size_t>(kept[i]) * d;
                for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_id) {
    require_rank_at_least(logits, 1, "cross_entropy");
    const std::size_t vocab = logits.shape().back();
    const std::size_t rows = logits.numel() / std::max<std::size_t>(vocab, 1);
    if (targets.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_string(logits.shape()));
    }
    auto x = logits.data();
    std::vector<double> probs(x.size(), 0.0);
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const TokenId t = targets[r];
        if (t == ignore_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw VocabularyError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(vocab));
        }
        const double* row = x.data() + r * vocab;
        double mx = *std::max_element(row, row + vocab);
        double z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        total += lse - row[t];
        for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = std::exp(row[j] - lse);
        ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: every position is ignored, loss is empty");
    Tensor out = Tensor::scalar(total / static_cast<double>(counted));
    if (Tape* tape = recording({&logits})) {
        out.set_requires_grad(true);
        std::vector<TokenId> kept(targets.begin(), targets.end());
        tape->record(
            [logits, out, probs = std::move(probs), kept = std::move(kept), ignore_id, vocab, counted]() mutable {
                if (!out.has_grad()) return;
                const double g = out.grad()[0] / static_cast<double>(counted);
                auto gx = logits.mutable_grad();
                for (std::size_t r = 0; r < kept.size(); ++r) {
                    if (kept[r] == ignore_id) continue;
                    for (std::size_t j = 0; j < vocab; ++j) gx[r * vocab + j] += g * probs[r * vocab + j];
                    gx[r * vocab + static_cast<std::size_t>(kept[r])] -= g;
                }
            });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tensor out = Tensor::scalar(total);
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            for (double& v : x.mutable_grad()) v += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// --- shape manipulation -------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const std::size_t ax = normalize_axis(axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch at " + shape_string(p.shape()));
        for (std::size_t i = 0; i < out_shape.size(); ++i) {
            if (i != ax && p.dim(i) != parts[0].dim(i)) {
                throw DimensionError("concat: shapes " + shape_string(parts[0].shape()) + " and " +
                                     shape_string(p.shape()) + " differ off the concat axis");
            }
        }
        out_shape[ax] += p.dim(ax);
    }
    const AxisSplit s = split_at(out_shape, ax);
    Tensor out(out_shape);
    auto o = out.mutable_data();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t chunk = p.dim(ax) * s.inner;
        auto in = p.data();
        for (std::size_t outer = 0; outer < s.outer; ++outer) {
            std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(outer * chunk), chunk,
                        o.begin() + static_cast<std::ptrdiff_t>(outer * s.len * s.inner + offset));
        }
        offset += chunk;
    }
    if (Tape* tape = recording(parts)) {
        out.set_requires_grad(true);
        tape->record([parts, out, s, ax]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            std::size_t offset = 0;
            for (const Tensor& p : parts) {
                const std::size_t chunk = p.dim(ax) * s.inner;
                if (p.requires_grad()) {
                    auto gp = p.mutable_grad();
                    for (std::size_t outer = 0; outer < s.outer; ++outer) {
                        const double* src = g.data() + outer * s.len * s.inner + offset;
                        double* dst = gp.data() + outer * chunk;
                        for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                    }
                }
                offset += chunk;
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    if (begin > end || end > x.dim(ax)) {
        throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                             shape_string(x.shape()));
    }
    const AxisSplit s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    out_shape[ax] = end - begin;
    Tensor out(out_shape);
    const std::size_t chunk = (end - begin) * s.inner;
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t outer = 0; outer < s.outer; ++outer) {
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(outer * s.len * s.inner + begin * s.inner), chunk,
                    o.begin() + static_cast<std::ptrdiff_t>(outer * chunk));
    }
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, s, begin, chunk]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t outer = 0; outer < s.outer; ++outer) {
                double* dst = gx.data() + outer * s.len * s.inner + begin * s.inner;
                const double* src = g.data() + outer * chunk;
                for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
    }
    Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    const std::size_t r = x.rank();
    if (order.size() != r) throw DimensionError("permute: order length does not match " + shape_string(x.shape()));
    std::vector<bool> seen(r, false);
    for (auto o : order) {
        if (o >= r || seen[o]) throw DimensionError("permute: invalid axis order");
        seen[o] = true;
    }
    Shape out_shape(r);
    std::vector<std::size_t> in_strides(r);
    {
        std::size_t st = 1;
        for (std::size_t i = r; i-- > 0;) {
            in_strides[i] = st;
            st *= x.dim(i);
        }
    }
    std::vector<std::size_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = x.dim(order[i]);
        src_strides[i] = in_strides[order[i]];
    }
    const std::size_t n = x.numel();
    auto index = std::make_shared<std::vector<std::size_t>>(n);
    {
        std::vector<std::size_t> idx(r, 0);
        std::size_t src = 0;
        for (std::size_t flat = 0; flat < n; ++flat) {
            (*index)[flat] = src;
            for (std::size_t d = r; d-- > 0;) {
                ++idx[d];
                src += src_strides[d];
                if (idx[d] < out_shape[d]) break;
                src -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
    Tensor out(out_shape);
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < n; ++i) o[i] = in[(*index)[i]];
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, index]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[(*index)[i]] += g[i];
        });
    }
    return out;
}

Tensor select(const Tensor& x, int axis, std::size_t index) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    Tensor part = slice(x, static_cast<int>(ax), index, index + 1);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
    return reshape(part, shape);
}

Tensor stack(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("stack of zero tensors");
    const std::size_t r = parts[0].rank();
    const int ax = axis < 0 ? axis + static_cast<int>(r) + 1 : axis;
    if (ax < 0 || ax > static_cast<int>(r)) throw DimensionError("stack: invalid axis");
    std::vector<Tensor> expanded;
    expanded.reserve(parts.size());
    for (const Tensor& p : parts) {
        if (p.shape() != parts[0].shape()) {
            throw DimensionError("stack: shapes " + shape_string(parts[0].shape()) + " and " +
                                 shape_string(p.shape()) + " differ");
        }
        Shape s = p.shape();
        s.insert(s.begin() + ax, 1);
        expanded.push_back(reshape(p, s));
    }
    return concat(expanded, ax);
}

Tensor gather_steps(const Tensor& x, std::span<const std::size_t> steps) {
    if (x.rank() != 3 || steps.size() != x.dim(0)) {
        throw DimensionError("gather_steps: expected [B x T x d] with B steps, got " + shape_string(x.shape()));
    }
    const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    for (auto t : steps) {
        if (t >= T) throw DimensionError("gather_steps: step " + std::to_string(t) + " beyond length " + std::to_string(T));
    }
    Tensor out(Shape{B, d});
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t b = 0; b < B; ++b) {
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((b * T + steps[b]) * d), d,
                    o.begin() + static_cast<std::ptrdiff_t>(b * d));
    }
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        std::vector<std::size_t> kept(steps.begin(), steps.end());
        tape->record([x, out, kept = std::move(kept), T, d]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t b = 0; b < kept.size(); ++b) {
                double* dst = gx.data() + (b * T + kept[b]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[b * d + j];
            }
        });
    }
    return out;
}

Tensor where_rows(const std::vector<bool>& keep, const Tensor& when_true, const Tensor& when_false) {
    if (when_true.shape() != when_false.shape() || when_true.rank() == 0 || when_true.dim(0) != keep.size()) {
        throw DimensionError("where_rows: shapes " + shape_string(when_true.shape()) + " and " +
                             shape_string(when_false.shape()) + " with " + std::to_string(keep.size()) + " rows");
    }
    const std::size_t width = when_true.numel() / std::max<std::size_t>(keep.size(), 1);
    Tensor out(when_true.shape());
    auto t = when_true.data();
    auto f = when_false.data();
    auto o = out.mutable_data();
    for (std::size_t b = 0; b < keep.size(); ++b) {
        const auto& src = keep[b] ? t : f;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(b * width), width,
                    o.begin() + static_cast<std::ptrdiff_t>(b * width));
    }
    if (Tape* tape = recording({&when_true, &when_false})) {
        out.set_requires_grad(true);
        tape->record([keep, when_true, when_false, out, width]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            for (std::size_t b = 0; b < keep.size(); ++b) {
                const Tensor& target = keep[b] ? when_true : when_false;
                if (!target.requires_grad()) continue;
                auto gt = target.mutable_grad();
                for (std::size_t j = 0; j < width; ++j) gt[b * width + j] += g[b * width + j];
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank_at_least(x, 1, "layer_norm");
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
    }
    const std::size_t rows = x.numel() / std::max<std::size_t>(d, 1);
    Tensor out(x.shape());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    auto in = x.data();
    auto gn = gain.data();
    auto bs = bias.data();
    auto o = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * inv;
            xhat[r * d + j] = h;
            o[r * d + j] = h * gn[j] + bs[j];
        }
    }
    if (Tape* tape = recording({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        tape->record([x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gn = gain.data();
            if (gain.requires_grad()) {
                auto gg = gain.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
            if (bias.requires_grad()) {
                auto gb = bias.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
            }
            if (x.requires_grad()) {
                auto gx = x.mutable_grad();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gn[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[r * d + j] * gn[j];
                        gx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

Tensor unfold_time(const Tensor& x, std::size_t kernel, std::size_t pad_left, std::size_t pad_right) {
    if (x.rank() != 3) throw DimensionError("unfold_time: expected [B x T x C], got " + shape_string(x.shape()));
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (kernel == 0 || T + pad_left + pad_right < kernel) {
        throw DimensionError("unfold_time: sequence of length " + std::to_string(T) + " too short for kernel " +
                             std::to_string(kernel));
    }
    const std::size_t T_out = T + pad_left + pad_right - kernel + 1;
    const std::size_t width = kernel * C;
    Tensor out(Shape{B, T_out, width});
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T_out; ++t) {
            for (std::size_t j = 0; j < kernel; ++j) {
                const std::ptrdiff_t src_t =
                    static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
                if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(T)) continue;
                std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((b * T + static_cast<std::size_t>(src_t)) * C), C,
                            o.begin() + static_cast<std::ptrdiff_t>((b * T_out + t) * width + j * C));
            }
        }
    }
    if (Tape* tape = recording({&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, B, T, C, T_out, kernel, pad_left, width]() mutable {
            if (!out.has_grad()) return;
            auto g = out.grad();
            auto gx = x.mutable_grad();
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t t = 0; t < T_out; ++t) {
                    for (std::size_t j = 0; j < kernel; ++j) {
                        const std::ptrdiff_t src_t =
                            static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad_left);
                        if (src_t < 0 || src_t >= static_cast<std::ptrdiff_t>(T)) continue;
                        double* dst = gx.data() + (b * T + static_cast<std::size_t>(src_t)) * C;
                        const double* src = g.data() + (b * T_out + t) * width + j * C;
                        for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
        });
    }
    return out;
}

} // namespace attnbench
