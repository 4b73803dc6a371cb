#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "trgcn/tensor.hpp"

namespace trgcn {

// One trainable tensor, addressable by name. weight_decay marks whether the
// tensor participates in the L2 penalty (weight matrices yes, biases and
// layer-norm parameters no).
struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool weight_decay = true;
};

class NamedParams {
  public:
    // Returns a handle onto the registered tensor (Tensor copies share state,
    // so the handle stays valid as the entry vector grows).
    Tensor add(std::string name, Tensor t, bool weight_decay = true) {
        for (const ParamEntry& e : items_)
            if (e.name == name)
                throw std::invalid_argument("NamedParams: duplicate name '" + name + "'");
        t.set_requires_grad(true);
        items_.push_back({std::move(name), t, weight_decay});
        return t;
    }

    bool contains(const std::string& name) const {
        for (const ParamEntry& e : items_)
            if (e.name == name) return true;
        return false;
    }

    Tensor& at(const std::string& name) {
        for (ParamEntry& e : items_)
            if (e.name == name) return e.tensor;
        throw std::invalid_argument("NamedParams: unknown name '" + name + "'");
    }
    const Tensor& at(const std::string& name) const {
        return const_cast<NamedParams*>(this)->at(name);
    }

    std::vector<ParamEntry>& entries() { return items_; }
    const std::vector<ParamEntry>& entries() const { return items_; }

    std::size_t count() const { return items_.size(); }
    std::size_t total_entries() const {
        std::size_t n = 0;
        for (const ParamEntry& e : items_) n += e.tensor.size();
        return n;
    }

    void zero_grad() {
        for (ParamEntry& e : items_) e.tensor.zero_grad();
    }

    // Detached snapshot of all values, restorable later (early stopping).
    std::vector<std::vector<double>> snapshot_values() const {
        std::vector<std::vector<double>> snap;
        snap.reserve(items_.size());
        for (const ParamEntry& e : items_) {
            auto v = e.tensor.values();
            snap.emplace_back(v.begin(), v.end());
        }
        return snap;
    }
    void restore_values(const std::vector<std::vector<double>>& snap) {
        if (snap.size() != items_.size())
            throw std::invalid_argument("NamedParams: snapshot layout mismatch");
        for (std::size_t i = 0; i < items_.size(); ++i) {
            auto dst = items_[i].tensor.mutable_values();
            if (snap[i].size() != dst.size())
                throw std::invalid_argument("NamedParams: snapshot size mismatch at '" +
                                            items_[i].name + "'");
            std::copy(snap[i].begin(), snap[i].end(), dst.begin());
        }
    }

  private:
    std::vector<ParamEntry> items_;
};

struct GradCheckIssue {
    std::string param;
    std::size_t row = 0, col = 0;
    double analytic = 0.0, numeric = 0.0, rel_err = 0.0;
};

struct GradCheckReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_row = 0, worst_col = 0;
    double worst_analytic = 0.0, worst_numeric = 0.0;
    double step = 0.0, tol = 0.0;
    std::size_t checked_entries = 0;
    std::vector<GradCheckIssue> failures;
};

// Compare the tape gradient of a scalar computation against central finite
// differences for every entry of every parameter. `f` must rebuild the
// forward pass from the current parameter values on each call; it runs under
// a fresh tape for the analytic pass and with no tape for the numeric evals.
// Relative error uses max(1, |analytic|, |numeric|) as denominator.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, NamedParams& params,
                                  double h = 1e-5, double tol = 1e-4) {
    GradCheckReport report;
    report.step = h;
    report.tol = tol;

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = f();
        if (loss.rows() != 1 || loss.cols() != 1)
            throw ShapeError("grad_check: f must return a 1x1 tensor, got " + loss.shape_str());
        if (!std::isfinite(loss.at(0, 0)))
            throw std::runtime_error("grad_check: non-finite loss");
        params.zero_grad();
        tape.backward(loss);
        for (const ParamEntry& e : params.entries()) {
            auto g = e.tensor.grad();
            analytic.emplace_back(g.begin(), g.end());
        }
    }

    auto eval = []( const std::function<Tensor()>& fn) {
        Tensor v = fn();
        const double x = v.at(0, 0);
        if (!std::isfinite(x)) throw std::runtime_error("grad_check: non-finite loss");
        return x;
    };

    for (std::size_t p = 0; p < params.entries().size(); ++p) {
        ParamEntry& entry = params.entries()[p];
        auto vals = entry.tensor.mutable_values();
        const std::size_t cols = entry.tensor.cols();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = eval(f);
            vals[i] = orig - h;
            const double fm = eval(f);
            vals[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[p][i];
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            const double rel = std::abs(a - numeric) / denom;
            ++report.checked_entries;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = entry.name;
                report.worst_row = i / cols;
                report.worst_col = i % cols;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            if (rel > tol)
                report.failures.push_back(
                    {entry.name, i / cols, i % cols, a, numeric, rel});
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace trgcn
