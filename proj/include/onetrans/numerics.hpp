#pragma once

// Dense row-major matrix substrate, the exact kernels the model needs,
// multiply-add metering, and a central-difference gradient oracle.
//
// Conventions:
//  - row-vector times matrix: out[j] = sum_k x[k] * W[k][j], W is (in x out)
//  - every kernel accumulates per output element in ascending-k order, so
//    batched and per-row paths produce bit-identical results
//  - the meter counts matmul multiply-adds only; softmax/norm arithmetic is
//    deliberately excluded from the accounting

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace onetrans {

// ---------------------------------------------------------------------------
// FLOP metering
// ---------------------------------------------------------------------------

enum class FlopPhase : int { tokenizer = 0, attention, ffn, heads, other };
inline constexpr int kFlopPhaseCount = 5;

struct FlopBreakdown {
    uint64_t tokenizer = 0;
    uint64_t attention = 0;
    uint64_t ffn = 0;
    uint64_t heads = 0;
    uint64_t other = 0;

    uint64_t total() const { return tokenizer + attention + ffn + heads + other; }

    FlopBreakdown& operator+=(const FlopBreakdown& o) {
        tokenizer += o.tokenizer;
        attention += o.attention;
        ffn += o.ffn;
        heads += o.heads;
        other += o.other;
        return *this;
    }
    bool operator==(const FlopBreakdown& o) const = default;
};

// Monotone multiply-add counter with a per-phase breakdown. Adds are atomic
// so several worker threads metering into one counter never lose counts.
class FlopCounter {
public:
    FlopCounter() { reset(); }

    void add(FlopPhase phase, uint64_t madds) {
        counts_[static_cast<int>(phase)].fetch_add(madds, std::memory_order_relaxed);
    }

    void reset() {
        for (auto& c : counts_) c.store(0, std::memory_order_relaxed);
    }

    uint64_t total() const {
        uint64_t t = 0;
        for (const auto& c : counts_) t += c.load(std::memory_order_relaxed);
        return t;
    }

    FlopBreakdown snapshot() const {
        FlopBreakdown b;
        b.tokenizer = counts_[0].load(std::memory_order_relaxed);
        b.attention = counts_[1].load(std::memory_order_relaxed);
        b.ffn = counts_[2].load(std::memory_order_relaxed);
        b.heads = counts_[3].load(std::memory_order_relaxed);
        b.other = counts_[4].load(std::memory_order_relaxed);
        return b;
    }

private:
    std::array<std::atomic<uint64_t>, kFlopPhaseCount> counts_;
};

namespace detail {
FlopCounter*& tl_meter();
FlopPhase& tl_phase();
}  // namespace detail

inline void meter_madds(uint64_t madds) {
    if (detail::tl_meter() != nullptr) detail::tl_meter()->add(detail::tl_phase(), madds);
}

// Installs a counter for the current thread for the lifetime of the scope.
class MeterScope {
public:
    explicit MeterScope(FlopCounter& counter, FlopPhase phase = FlopPhase::other)
        : prev_(detail::tl_meter()), prev_phase_(detail::tl_phase()) {
        detail::tl_meter() = &counter;
        detail::tl_phase() = phase;
    }
    ~MeterScope() {
        detail::tl_meter() = prev_;
        detail::tl_phase() = prev_phase_;
    }
    MeterScope(const MeterScope&) = delete;
    MeterScope& operator=(const MeterScope&) = delete;

private:
    FlopCounter* prev_;
    FlopPhase prev_phase_;
};

// Switches the phase attributed to subsequent kernel calls on this thread.
class PhaseScope {
public:
    explicit PhaseScope(FlopPhase phase) : prev_(detail::tl_phase()) { detail::tl_phase() = phase; }
    ~PhaseScope() { detail::tl_phase() = prev_; }
    PhaseScope(const PhaseScope&) = delete;
    PhaseScope& operator=(const PhaseScope&) = delete;

private:
    FlopPhase prev_;
};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

template <typename T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;  // row-major, data.size() == rows*cols

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {
        if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
    }

    T& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    std::span<T> row_span(int r) { return {row(r), static_cast<size_t>(cols)}; }
    std::span<const T> row_span(int r) const { return {row(r), static_cast<size_t>(cols)}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool is_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
std::string shape_str(const Matrix<T>& m) {
    return "(" + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")";
}

template <typename T>
void ensure_finite(const Matrix<T>& m, const char* op) {
    if (!m.is_finite()) throw std::runtime_error(std::string(op) + ": non-finite values in result");
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

// C = A * B, A (m x k), B (k x n). Meters m*k*n multiply-adds.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a) + " x " + shape_str(b));
    Matrix<T> c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        T* crow = c.row(i);
        const T* arow = a.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const T av = arow[k];
            const T* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    meter_madds(static_cast<uint64_t>(a.rows) * a.cols * b.cols);
    ensure_finite(c, "matmul");
    return c;
}

// C = A * B^T, A (m x k), B (n x k). Meters m*k*n.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.cols)
        throw std::invalid_argument("matmul_nt: inner dimension mismatch " + shape_str(a) + " x " + shape_str(b) + "^T");
    Matrix<T> c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const T* arow = a.row(i);
        T* crow = c.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const T* brow = b.row(j);
            T acc = T(0);
            for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            crow[j] = acc;
        }
    }
    meter_madds(static_cast<uint64_t>(a.rows) * a.cols * b.rows);
    ensure_finite(c, "matmul_nt");
    return c;
}

// C = A^T * B, A (k x m), B (k x n). Meters m*k*n. Used for weight gradients.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows != b.rows)
        throw std::invalid_argument("matmul_tn: inner dimension mismatch " + shape_str(a) + "^T x " + shape_str(b));
    Matrix<T> c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const T* arow = a.row(k);
        const T* brow = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const T av = arow[i];
            T* crow = c.row(i);
            for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
        }
    }
    meter_madds(static_cast<uint64_t>(a.cols) * a.rows * b.cols);
    ensure_finite(c, "matmul_tn");
    return c;
}

// y_i = gain_i * x_i / sqrt(mean(x^2) + eps). Returns the normalized vector;
// if inv_rms_out is non-null it receives 1/sqrt(mean(x^2)+eps) for backward.
template <typename T>
void rms_norm(std::span<const T> x, std::span<const T> gain, T eps, std::span<T> out, T* inv_rms_out = nullptr) {
    const size_t d = x.size();
    if (d == 0) throw std::invalid_argument("rms_norm: empty input");
    if (gain.size() != d || out.size() != d) throw std::invalid_argument("rms_norm: size mismatch");
    if (!(eps > T(0))) throw std::invalid_argument("rms_norm: eps must be positive");
    T ss = T(0);
    for (size_t i = 0; i < d; ++i) {
        if (!std::isfinite(static_cast<double>(x[i]))) throw std::runtime_error("rms_norm: non-finite input");
        ss += x[i] * x[i];
    }
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    for (size_t i = 0; i < d; ++i) out[i] = gain[i] * x[i] * inv;
    if (inv_rms_out) *inv_rms_out = inv;
}

template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> gain, T eps) {
    std::vector<T> out(x.size());
    rms_norm(x, gain, eps, std::span<T>(out));
    return out;
}

// Backward of rms_norm for one row. Adds into dx and dgain.
template <typename T>
void rms_norm_backward(std::span<const T> dy, std::span<const T> x, std::span<const T> gain, T inv_rms,
                       std::span<T> dx, std::span<T> dgain) {
    const size_t d = x.size();
    T dot = T(0);
    for (size_t i = 0; i < d; ++i) dot += dy[i] * gain[i] * x[i];
    const T coef = dot * inv_rms * inv_rms * inv_rms / static_cast<T>(d);
    for (size_t i = 0; i < d; ++i) {
        dx[i] += dy[i] * gain[i] * inv_rms - x[i] * coef;
        dgain[i] += dy[i] * x[i] * inv_rms;
    }
}

// Masked softmax with max-subtraction. Masked positions are exactly zero;
// requires at least one unmasked position.
template <typename T>
void softmax_masked(std::span<const T> scores, std::span<const uint8_t> mask, std::span<T> out) {
    const size_t n = scores.size();
    if (mask.size() != n || out.size() != n) throw std::invalid_argument("softmax_masked: size mismatch");
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        any = true;
        if (scores[i] > mx) mx = scores[i];
    }
    if (!any) throw std::runtime_error("softmax_masked: all positions masked (malformed mask)");
    T sum = T(0);
    for (size_t i = 0; i < n; ++i) {
        if (mask[i]) {
            out[i] = std::exp(scores[i] - mx);
            sum += out[i];
        } else {
            out[i] = T(0);
        }
    }
    const T inv = T(1) / sum;
    for (size_t i = 0; i < n; ++i)
        if (mask[i]) out[i] *= inv;
}

template <typename T>
std::vector<T> softmax_masked(std::span<const T> scores, std::span<const uint8_t> mask) {
    std::vector<T> out(scores.size());
    softmax_masked(scores, mask, std::span<T>(out));
    return out;
}

// dscores_j = p_j * (dp_j - sum_k p_k dp_k) over unmasked positions.
template <typename T>
void softmax_backward(std::span<const T> p, std::span<const T> dp, std::span<T> dscores) {
    const size_t n = p.size();
    T dot = T(0);
    for (size_t i = 0; i < n; ++i) dot += p[i] * dp[i];
    for (size_t i = 0; i < n; ++i) dscores[i] = p[i] * (dp[i] - dot);
}

template <typename T>
T silu(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return x * s;
}

template <typename T>
T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle (64-bit only)
// ---------------------------------------------------------------------------

// Central differences (f(t+h e_i) - f(t-h e_i)) / 2h. Throws if f goes
// non-finite at any probe point.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::vector<double> theta, double h = 1e-4) {
    if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    std::vector<double> grad(theta.size());
    for (size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        theta[i] = saved + h;
        const double fp = f(theta);
        theta[i] = saved - h;
        const double fm = f(theta);
        theta[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_diff_grad: non-finite objective at probe " + std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace onetrans
