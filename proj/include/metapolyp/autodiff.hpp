#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "metapolyp/tensor.hpp"

namespace metapolyp {

/// Named learnable tensor with its accumulated gradient.
struct Parameter {
    Parameter(std::string name, Tensor value)
        : name(std::move(name)), value(std::move(value)), grad(Tensor::zeros(this->value.shape())) {}

    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad();
};

/// Owns parameters with stable addresses and unique names.
class ParameterRegistry {
   public:
    Parameter& create(const std::string& name, Tensor init);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;

    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::size_t size() const noexcept { return params_.size(); }
    std::size_t scalar_count() const;
    void zero_grad();

   private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
};

/// Records differentiable operations in execution order and replays them in
/// reverse to accumulate gradients. One tape per forward pass; single thread.
class Tape {
   public:
    /// Receives the gradient and value of the node's output; must call
    /// accumulate() for every input that requires a gradient.
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

    enum class Mode { Training, Inference };

    explicit Tape(Mode mode = Mode::Training) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Mode mode() const noexcept { return mode_; }

    /// Leaf without gradient.
    Var constant(Tensor value);
    /// Leaf with a gradient readable via grad() after backward().
    Var variable(Tensor value);
    /// Leaf bound to a Parameter; backward() adds into param.grad. Reusing the
    /// same parameter returns the same leaf.
    Var param(Parameter& p);

    /// Adds an op result. `fn` is kept only when some input requires a
    /// gradient and the tape is in training mode.
    Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    const char* op(Var v) const { return nodes_.at(v.id).op; }
    /// Gradient of a node; zeros if nothing flowed into it.
    Tensor grad(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    void accumulate(Var v, const Tensor& g);
    /// In-place access to a node's gradient buffer (allocated on demand).
    Tensor& grad_buffer(Var v);

    /// Backpropagates from a scalar loss and flushes parameter gradients.
    void backward(Var loss);
    /// Vector-Jacobian product: backpropagates `seed` from any node.
    void backward(Var out, const Tensor& seed);

   private:
    struct Node {
        const char* op;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn fn;
        Parameter* param = nullptr;
    };

    Mode mode_;
    // deque: references returned by value() survive later records.
    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
    bool consumed_ = false;
};

}  // namespace metapolyp
