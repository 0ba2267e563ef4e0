#include "metapolyp/autodiff.hpp"

#include "metapolyp/error.hpp"

namespace metapolyp {

void Parameter::zero_grad() {
    auto g = grad.data();
    std::fill(g.begin(), g.end(), 0.0f);
}

Parameter& ParameterRegistry::create(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    return *params_.back();
}

Parameter* ParameterRegistry::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterRegistry::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
}

std::vector<Parameter*> ParameterRegistry::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Parameter*> ParameterRegistry::all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

std::size_t ParameterRegistry::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

void ParameterRegistry::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

const Tensor& Var::value() const { return tape->value(*this); }
bool Var::requires_grad() const { return tape->requires_grad(*this); }

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{"constant", std::move(value), {}, false, {}, nullptr});
    return Var{this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{"variable", std::move(value), {}, mode_ == Mode::Training, {}, nullptr});
    return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
    nodes_.push_back(Node{"param", p.value, {}, mode_ == Mode::Training, {}, &p});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    require_finite(value, op);
    bool needs = false;
    for (const auto& in : inputs) {
        if (in.tape != this) throw UsageError(std::string(op) + ": input belongs to a different tape");
        needs = needs || nodes_[in.id].requires_grad;
    }
    needs = needs && mode_ == Mode::Training;
    nodes_.push_back(Node{op, std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}, nullptr});
    return Var{this, nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor::zeros(n.value.shape()) : n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
    auto& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
        throw DimensionError(std::string("gradient shape ") + shape_str(g.shape()) + " does not match " + n.op +
                             " value " + shape_str(n.value.shape()));
    }
    if (n.grad.empty()) {
        n.grad = g;
        return;
    }
    float* dst = n.grad.raw();
    const float* src = g.raw();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
    if (value(loss).size() != 1) {
        throw UsageError("backward() requires a scalar loss, got shape " + shape_str(value(loss).shape()));
    }
    backward(loss, Tensor::full(value(loss).shape(), 1.0f));
}

void Tape::backward(Var out, const Tensor& seed) {
    if (mode_ != Mode::Training) throw UsageError("backward() on an inference tape");
    if (consumed_) throw UsageError("backward() may run once per tape");
    if (seed.shape() != value(out).shape()) throw DimensionError("backward seed shape mismatch");
    consumed_ = true;
    accumulate(out, seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.fn) {
            // Copy out the gradient: the callback may grow other nodes' buffers.
            Tensor g = std::move(n.grad);
            n.fn(*this, g, n.value);
            n.grad = std::move(g);
        }
        if (n.param) {
            require_finite(n.grad, "gradient of " + n.param->name);
            float* dst = n.param->grad.raw();
            const float* src = n.grad.raw();
            for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += src[k];
        }
    }
}

}  // namespace metapolyp
