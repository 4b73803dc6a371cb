#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "trgcn/rng.hpp"

namespace trgcn {

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Dense 2-D matrix of doubles with an optional gradient buffer. Tensor is a
// cheap handle: copies share the underlying node, which is what lets tape
// closures accumulate gradients into the tensors the caller still holds.
class Tensor {
  public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : node_(std::make_shared<Node>()) {
        node_->rows = rows;
        node_->cols = cols;
        node_->value.assign(rows * cols, fill);
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Tensor t(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("from_rows: ragged initializer");
            std::size_t j = 0;
            for (double v : row) t.set(i, j++, v);
            ++i;
        }
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t.set(i, i, 1.0);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->value.size(); }

    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    void set(std::size_t r, std::size_t c, double v) { node_->value[r * cols() + c] = v; }

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }

    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        if (on)
            node_->grad.assign(size(), 0.0);
        else
            node_->grad.clear();
        return *this;
    }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad; }
    double grad_at(std::size_t r, std::size_t c) const { return node_->grad[r * cols() + c]; }
    void zero_grad() {
        for (double& g : node_->grad) g = 0.0;
    }

    // Detached value copy (no grad, no tape history).
    Tensor clone_values() const {
        Tensor t(rows(), cols());
        t.node_->value = node_->value;
        return t;
    }

    bool shares_node(const Tensor& other) const { return node_ == other.node_; }

    bool all_finite() const {
        for (double v : node_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        if (!defined()) return "[undefined]";
        return "[" + std::to_string(rows()) + "x" + std::to_string(cols()) + "]";
    }

  private:
    struct Node {
        std::size_t rows = 0, cols = 0;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Node> node_;
};

// Validity flags for a padded block; masked-off entries are structural
// padding, not data.
struct Mask {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> on;

    Mask() = default;
    Mask(std::size_t r, std::size_t c, bool fill = true)
        : rows(r), cols(c), on(r * c, fill ? 1 : 0) {}

    bool at(std::size_t r, std::size_t c) const { return on[r * cols + c] != 0; }
    void set(std::size_t r, std::size_t c, bool v) { on[r * cols + c] = v ? 1 : 0; }
};

// Ordered record of the backward steps for one forward pass. Constructing a
// Tape makes it the active tape for the current thread; ops record onto the
// active tape when any input requires grad. backward() replays the steps in
// exact reverse order.
class Tape {
  public:
    Tape() : prev_(active_) { active_ = this; }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
    std::size_t op_count() const { return steps_.size(); }

    void backward(Tensor& loss) {
        if (loss.rows() != 1 || loss.cols() != 1)
            throw ShapeError("backward: loss must be 1x1, got " + loss.shape_str());
        if (!loss.requires_grad())
            throw std::invalid_argument("backward: loss is not connected to this tape");
        loss.mutable_grad()[0] += 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

  private:
    std::vector<std::function<void()>> steps_;
    Tape* prev_ = nullptr;
    inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch, " + a.shape_str() + " vs " +
                         b.shape_str());
}

}  // namespace detail

// out = a * b
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ, " + a.shape_str() + " x " +
                         b.shape_str());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out(m, n);
    {
        const double* av = a.values().data();
        const double* bv = b.values().data();
        double* ov = out.mutable_values().data();
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = av + i * k;
            double* orow = ov + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = arow[kk];
                const double* brow = bv + kk * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    }
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active()->record([a = a, b = b, out]() mutable {
            const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
            const double* dout = out.grad().data();
            if (a.requires_grad()) {
                // dA = dOut * B^T
                double* da = a.mutable_grad().data();
                const double* bv = b.values().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* drow = dout + i * n;
                    double* darow = da + i * k;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double* brow = bv + kk * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
                        darow[kk] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                // dB = A^T * dOut
                double* db = b.mutable_grad().data();
                const double* av = a.values().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = av + i * k;
                    const double* drow = dout + i * n;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double aik = arow[kk];
                        if (aik == 0.0) continue;
                        double* dbrow = db + kk * n;
                        for (std::size_t j = 0; j < n; ++j) dbrow[j] += aik * drow[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    Tensor out(x.cols(), x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out.set(j, i, x.at(i, j));
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, out]() mutable {
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            const std::size_t r = x.rows(), c = x.cols();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dout[j * r + i];
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.mutable_values()[i] = a.values()[i] + b.values()[i];
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active()->record([a = a, b = b, out]() mutable {
            const double* dout = out.grad().data();
            if (a.requires_grad()) {
                double* da = a.mutable_grad().data();
                for (std::size_t i = 0; i < a.size(); ++i) da[i] += dout[i];
            }
            if (b.requires_grad()) {
                double* db = b.mutable_grad().data();
                for (std::size_t i = 0; i < b.size(); ++i) db[i] += dout[i];
            }
        });
    }
    return out;
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.mutable_values()[i] = a.values()[i] * b.values()[i];
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active()->record([a = a, b = b, out]() mutable {
            const double* dout = out.grad().data();
            if (a.requires_grad()) {
                double* da = a.mutable_grad().data();
                for (std::size_t i = 0; i < a.size(); ++i) da[i] += b.values()[i] * dout[i];
            }
            if (b.requires_grad()) {
                double* db = b.mutable_grad().data();
                for (std::size_t i = 0; i < b.size(); ++i) db[i] += a.values()[i] * dout[i];
            }
        });
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i)
        out.mutable_values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, out]() mutable {
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x.values()[i] > 0.0) dx[i] += dout[i];
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double c) {
    Tensor out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out.mutable_values()[i] = c * x.values()[i];
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, out, c]() mutable {
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i) dx[i] += c * dout[i];
        });
    }
    return out;
}

// Inverted dropout: zero each entry with probability p, scale survivors by
// 1/(1-p). Identity in eval mode. The mask comes from a counter-based stream
// so a forward pass is reproducible given (seed, epoch, batch, op index).
inline Tensor dropout(const Tensor& x, double p, const CounterRng& rng, bool training) {
    if (!(p >= 0.0 && p < 1.0))
        throw std::invalid_argument("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    Tensor out(x.rows(), x.cols());
    auto keep = std::make_shared<std::vector<std::uint8_t>>(x.size());
    const double inv = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool k = rng.uniform_at(i) >= p;
        (*keep)[i] = k;
        out.mutable_values()[i] = k ? x.values()[i] * inv : 0.0;
    }
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, out, keep, inv]() mutable {
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i)
                if ((*keep)[i]) dx[i] += inv * dout[i];
        });
    }
    return out;
}

// Row-wise softmax with max subtraction. Masked-off positions are treated as
// -inf logits and come out exactly zero. A fully masked row has no defined
// distribution and is an error.
inline Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr) {
    if (mask && (mask->rows != x.rows() || mask->cols != x.cols()))
        throw ShapeError("softmax_rows: mask shape mismatch");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!mask || mask->at(i, j)) mx = std::max(mx, x.at(i, j));
        if (!std::isfinite(mx))
            throw std::runtime_error("softmax_rows: row " + std::to_string(i) +
                                     " is fully masked");
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask || mask->at(i, j)) {
                const double e = std::exp(x.at(i, j) - mx);
                out.set(i, j, e);
                sum += e;
            }
        }
        for (std::size_t j = 0; j < n; ++j)
            if (!mask || mask->at(i, j)) out.set(i, j, out.at(i, j) / sum);
    }
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        auto mask_copy = mask ? std::make_shared<Mask>(*mask) : nullptr;
        Tape::active()->record([x = x, out, mask_copy]() mutable {
            const std::size_t m = x.rows(), n = x.cols();
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            const double* y = out.values().data();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    if (!mask_copy || mask_copy->at(i, j)) dot += dout[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    if (!mask_copy || mask_copy->at(i, j))
                        dx[i * n + j] += y[i * n + j] * (dout[i * n + j] - dot);
            }
        });
    }
    return out;
}

// Per-row normalization to zero mean / unit variance followed by an affine
// transform: y = gain .* (x - mean) / sqrt(var + eps) + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t m = x.rows(), n = x.cols();
    if (n < 2) throw ShapeError("layer_norm: need at least 2 columns, got " + x.shape_str());
    if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
        throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(n));
    Tensor out(m, n);
    auto xhat = std::make_shared<std::vector<double>>(m * n);
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = inv;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (x.at(i, j) - mean) * inv;
            (*xhat)[i * n + j] = h;
            out.set(i, j, gain.at(0, j) * h + bias.at(0, j));
        }
    }
    if (detail::tracing({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, gain = gain, bias = bias, out, xhat, inv_std]() mutable {
            const std::size_t m = x.rows(), n = x.cols();
            const double* dout = out.grad().data();
            if (gain.requires_grad()) {
                double* dg = gain.mutable_grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        dg[j] += dout[i * n + j] * (*xhat)[i * n + j];
            }
            if (bias.requires_grad()) {
                double* db = bias.mutable_grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) db[j] += dout[i * n + j];
            }
            if (x.requires_grad()) {
                double* dx = x.mutable_grad().data();
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = dout[i * n + j] * gain.at(0, j);
                        mean_dh += dh;
                        mean_dh_h += dh * (*xhat)[i * n + j];
                    }
                    mean_dh /= static_cast<double>(n);
                    mean_dh_h /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = dout[i * n + j] * gain.at(0, j);
                        dx[i * n + j] +=
                            (*inv_std)[i] * (dh - mean_dh - (*xhat)[i * n + j] * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

// Broadcast a 1xN bias over every row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != x.cols())
        throw ShapeError("add_bias: bias " + bias.shape_str() + " does not match " +
                         x.shape_str());
    Tensor out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out.set(i, j, x.at(i, j) + bias.at(0, j));
    if (detail::tracing({&x, &bias})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, bias = bias, out]() mutable {
            const std::size_t m = x.rows(), n = x.cols();
            const double* dout = out.grad().data();
            if (x.requires_grad()) {
                double* dx = x.mutable_grad().data();
                for (std::size_t i = 0; i < m * n; ++i) dx[i] += dout[i];
            }
            if (bias.requires_grad()) {
                double* db = bias.mutable_grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) db[j] += dout[i * n + j];
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    Tensor out(1, 1);
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    out.set(0, 0, acc);
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, out]() mutable {
            const double d = out.grad()[0];
            double* dx = x.mutable_grad().data();
            for (std::size_t i = 0; i < x.size(); ++i) dx[i] += d;
        });
    }
    return out;
}

// Column-wise mean over all rows: MxN -> 1xN.
inline Tensor mean_rows(const Tensor& x) {
    if (x.rows() == 0) throw ShapeError("mean_rows: empty input");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out(1, n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += x.at(i, j);
        out.set(0, j, acc / static_cast<double>(m));
    }
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, out]() mutable {
            const std::size_t m = x.rows(), n = x.cols();
            const double inv = 1.0 / static_cast<double>(m);
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += inv * dout[j];
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t first, std::size_t count) {
    if (first + count > x.rows())
        throw ShapeError("slice_rows: range [" + std::to_string(first) + ", " +
                         std::to_string(first + count) + ") exceeds " + x.shape_str());
    const std::size_t n = x.cols();
    Tensor out(count, n);
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t j = 0; j < n; ++j) out.set(i, j, x.at(first + i, j));
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x = x, out, first, count]() mutable {
            const std::size_t n = x.cols();
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            for (std::size_t i = 0; i < count; ++i)
                for (std::size_t j = 0; j < n; ++j) dx[(first + i) * n + j] += dout[i * n + j];
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const std::size_t n = parts.front().cols();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
        total += p.rows();
    }
    Tensor out(total, n);
    std::size_t r = 0;
    for (const Tensor& p : parts) {
        for (std::size_t i = 0; i < p.rows(); ++i)
            for (std::size_t j = 0; j < n; ++j) out.set(r + i, j, p.at(i, j));
        r += p.rows();
    }
    bool trace = Tape::active() != nullptr;
    if (trace) {
        bool any = false;
        for (const Tensor& p : parts) any = any || p.requires_grad();
        trace = any;
    }
    if (trace) {
        out.set_requires_grad(true);
        Tape::active()->record([parts = parts, out]() mutable {
            const std::size_t n = out.cols();
            const double* dout = out.grad().data();
            std::size_t r = 0;
            for (Tensor& p : parts) {
                if (p.requires_grad()) {
                    double* dp = p.mutable_grad().data();
                    for (std::size_t i = 0; i < p.rows(); ++i)
                        for (std::size_t j = 0; j < n; ++j)
                            dp[i * n + j] += dout[(r + i) * n + j];
                }
                r += p.rows();
            }
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const std::size_t m = parts.front().rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    Tensor out(m, total);
    std::size_t c = 0;
    for (const Tensor& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.set(i, c + j, p.at(i, j));
        c += p.cols();
    }
    bool trace = Tape::active() != nullptr;
    if (trace) {
        bool any = false;
        for (const Tensor& p : parts) any = any || p.requires_grad();
        trace = any;
    }
    if (trace) {
        out.set_requires_grad(true);
        Tape::active()->record([parts = parts, out]() mutable {
            const std::size_t m = out.rows(), total = out.cols();
            const double* dout = out.grad().data();
            std::size_t c = 0;
            for (Tensor& p : parts) {
                if (p.requires_grad()) {
                    double* dp = p.mutable_grad().data();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < p.cols(); ++j)
                            dp[i * p.cols() + j] += dout[i * total + (c + j)];
                }
                c += p.cols();
            }
        });
    }
    return out;
}

// Multiply each row by a constant factor (no gradient w.r.t. the factors).
// Used to zero out padding rows.
inline Tensor row_scale(const Tensor& x, const std::vector<double>& factors) {
    if (factors.size() != x.rows())
        throw ShapeError("row_scale: " + std::to_string(factors.size()) + " factors for " +
                         x.shape_str());
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.set(i, j, factors[i] * x.at(i, j));
    if (detail::tracing({&x})) {
        out.set_requires_grad(true);
        auto f = std::make_shared<std::vector<double>>(factors);
        Tape::active()->record([x = x, out, f]() mutable {
            const std::size_t m = x.rows(), n = x.cols();
            double* dx = x.mutable_grad().data();
            const double* dout = out.grad().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += (*f)[i] * dout[i * n + j];
        });
    }
    return out;
}

// Mean over rows of -ln(probs[row, label_row]), with a probability floor so
// early training cannot produce -inf.
inline constexpr double kProbFloor = 1e-12;

inline Tensor neg_log_likelihood_mean(const Tensor& probs, const std::vector<int>& labels) {
    if (labels.size() != probs.rows())
        throw ShapeError("neg_log_likelihood_mean: " + std::to_string(labels.size()) +
                         " labels for " + probs.shape_str());
    const std::size_t m = probs.rows();
    for (std::size_t i = 0; i < m; ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= probs.cols())
            throw std::invalid_argument("neg_log_likelihood_mean: label out of range at row " +
                                        std::to_string(i));
    Tensor out(1, 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        acc -= std::log(std::max(probs.at(i, static_cast<std::size_t>(labels[i])), kProbFloor));
    out.set(0, 0, acc / static_cast<double>(m));
    if (detail::tracing({&probs})) {
        out.set_requires_grad(true);
        auto lab = std::make_shared<std::vector<int>>(labels);
        Tape::active()->record([probs = probs, out, lab]() mutable {
            const std::size_t m = probs.rows(), n = probs.cols();
            const double d = out.grad()[0];
            double* dp = probs.mutable_grad().data();
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t j = static_cast<std::size_t>((*lab)[i]);
                const double p = probs.at(i, j);
                if (p > kProbFloor) dp[i * n + j] -= d / (static_cast<double>(m) * p);
            }
        });
    }
    return out;
}

}  // namespace trgcn
