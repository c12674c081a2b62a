#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfp/matrix.hpp"

namespace sfp {

// Recorded computation graph. Values live in a slot table; every recorded op
// pushes one node whose adjoint scatters into the grad table. Slots created
// before any node (or via leaf()) are differentiable leaves.
template <class T>
class Tape {
  public:
    using Mat = Matrix<T>;
    using BackwardFn = std::function<void(Tape&, int /*out_slot*/)>;

    int leaf(Mat v) {
        values_.push_back(std::move(v));
        return static_cast<int>(values_.size()) - 1;
    }

    // Records a node producing `out`; `back` must only read values/grads of
    // earlier slots and accumulate into their grads.
    int record(Mat out, BackwardFn back) {
        const int slot = leaf(std::move(out));
        nodes_.push_back(Node{slot, std::move(back)});
        return slot;
    }

    const Mat& value(int slot) const { return values_[slot]; }
    Mat& mutable_value(int slot) { return values_[slot]; }

    const Mat& grad(int slot) const { return grads_[slot]; }
    Mat& grad(int slot) { return grads_[slot]; }

    std::size_t num_slots() const { return values_.size(); }

    // Reverse sweep from a scalar loss slot. Nodes are visited exactly once,
    // in reverse recording order; accumulation order is therefore fixed.
    void backward(int loss_slot) {
        const Mat& loss = values_[loss_slot];
        if (loss.rows != 1 || loss.cols != 1)
            throw std::logic_error("backward: loss slot is not a scalar");
        grads_.clear();
        grads_.reserve(values_.size());
        for (const Mat& v : values_) grads_.emplace_back(v.rows, v.cols, T(0));
        grads_[loss_slot](0, 0) = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back(*this, it->out_slot);
    }

    bool has_grads() const { return !grads_.empty(); }

  private:
    struct Node {
        int out_slot;
        BackwardFn back;
    };
    std::vector<Mat> values_;
    std::vector<Mat> grads_;
    std::vector<Node> nodes_;
};

// Named parameter table with AdamW state. std::map keeps enumeration order
// deterministic and stable across save/load.
template <class T>
class ParamStore {
  public:
    struct Entry {
        Matrix<T> value;
        Matrix<T> grad;
        Matrix<T> moment1;
        Matrix<T> moment2;
        std::vector<std::uint64_t> shape;  // logical shape; value is its 2D flattening
        int tape_slot = -1;
    };

    Entry& add(const std::string& name, Matrix<T> value, std::vector<std::uint64_t> shape = {}) {
        if (params_.count(name)) throw std::logic_error("duplicate parameter: " + name);
        Entry e;
        e.grad = Matrix<T>(value.rows, value.cols, T(0));
        e.moment1 = e.grad;
        e.moment2 = e.grad;
        e.shape = shape.empty() ? std::vector<std::uint64_t>{value.rows, value.cols}
                                : std::move(shape);
        e.value = std::move(value);
        return params_.emplace(name, std::move(e)).first->second;
    }

    Entry& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    // Registers the parameter's current value as a tape leaf for one forward.
    int use(Tape<T>& tape, const std::string& name) {
        Entry& e = at(name);
        e.tape_slot = tape.leaf(e.value);
        return e.tape_slot;
    }

    // Pulls leaf gradients out of a swept tape, accumulating into entries.
    void collect_grads(const Tape<T>& tape) {
        for (auto& [name, e] : params_) {
            if (e.tape_slot < 0) continue;
            const Matrix<T>& g = tape.grad(e.tape_slot);
            for (std::size_t i = 0; i < g.size(); ++i) e.grad.data[i] += g.data[i];
            e.tape_slot = -1;
        }
    }

    void zero_grads() {
        for (auto& [name, e] : params_) e.grad.fill(T(0));
    }

    std::map<std::string, Entry>& entries() { return params_; }
    const std::map<std::string, Entry>& entries() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, e] : params_) n += e.value.size();
        return n;
    }

    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    // Decoupled weight decay Adam update; zeroes gradients afterwards.
    void adamw_step(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8) {
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        for (auto& [name, e] : params_) {
            for (std::size_t i = 0; i < e.value.size(); ++i) {
                const double g = static_cast<double>(e.grad.data[i]);
                if (std::isnan(g))
                    throw std::runtime_error("adamw_step: NaN gradient in parameter " + name);
                double m = beta1 * static_cast<double>(e.moment1.data[i]) + (1.0 - beta1) * g;
                double v = beta2 * static_cast<double>(e.moment2.data[i]) + (1.0 - beta2) * g * g;
                e.moment1.data[i] = static_cast<T>(m);
                e.moment2.data[i] = static_cast<T>(v);
                const double update = (m / bc1) / (std::sqrt(v / bc2) + eps);
                double theta = static_cast<double>(e.value.data[i]);
                theta -= lr * update;
                theta -= lr * weight_decay * static_cast<double>(e.value.data[i]);
                e.value.data[i] = static_cast<T>(theta);
            }
            e.grad.fill(T(0));
        }
    }

  private:
    std::map<std::string, Entry> params_;
    std::uint64_t step_ = 0;
};

// Polynomial decay: lr(t) = lr0 * (1 - t/T)^power.
inline double poly_lr(double lr0, std::uint64_t t, std::uint64_t total, double power = 0.9) {
    if (total == 0 || t >= total) return 0.0;
    return lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total), power);
}

}  // namespace sfp
