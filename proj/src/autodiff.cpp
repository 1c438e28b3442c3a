#include "prefixprop/autodiff.hpp"

#include <algorithm>
#include <stdexcept>

#include "prefixprop/errors.hpp"

namespace prefixprop {

void Parameter::zero_grad() {
    if (grad.shape() != value.shape()) {
        grad = Tensor::zeros_like(value);
    } else {
        std::fill(grad.data().begin(), grad.data().end(), 0.0);
    }
}

const Tensor& Var::value() const {
    return tape_->value(id_);
}

bool Var::requires_grad() const {
    return tape_->requires_grad(id_);
}

const Tensor& Tape::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
}

Var Tape::constant(Tensor value) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant_ref(const Tensor& value) {
    Node& n = nodes_.emplace_back();
    n.external = &value;
    return Var(this, nodes_.size() - 1);
}

Var Tape::bind(Parameter& p) {
    if (p.grad.shape() != p.value.shape()) {
        p.grad = Tensor::zeros_like(p.value);
    }
    Node& n = nodes_.emplace_back();
    n.external = &p.value;
    n.requires_grad = record_ && p.trainable;
    n.param = &p;
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
    BackwardWithOutput wrapped;
    if (backward) {
        wrapped = [b = std::move(backward)](const Tensor& g, const Tensor&) { b(g); };
    }
    return push(std::move(value), inputs, std::move(wrapped));
}

Var Tape::record_with_output(Tensor value, std::initializer_list<Var> inputs, BackwardWithOutput backward) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::push(Tensor value, std::span<const Var> inputs, BackwardWithOutput backward) {
    bool needs = false;
    if (record_) {
        for (const Var& v : inputs) {
            if (v.tape_ != this) {
                throw std::logic_error("operand recorded on a different tape");
            }
            needs = needs || nodes_[v.id_].requires_grad;
        }
    }
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = needs && backward;
    if (n.requires_grad) {
        n.backward = std::move(backward);
    }
    return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(Var v) {
    Node& n = nodes_[v.id_];
    if (n.grad.shape() != value(v.id_).shape()) {
        n.grad = Tensor::zeros_like(value(v.id_));
    }
    return n.grad;
}

void Tape::accumulate(Var v, const Tensor& grad) {
    if (!nodes_[v.id_].requires_grad) {
        return;
    }
    Tensor& buf = grad_buffer(v);
    require_same_shape(buf, grad, "gradient accumulation");
    for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] += grad[i];
    }
}

void Tape::backward(Var loss) {
    if (!record_) {
        throw std::logic_error("backward() on a tape that does not record");
    }
    if (consumed_) {
        throw std::logic_error("backward() called twice on one tape");
    }
    if (loss.value().size() != 1) {
        throw ShapeError("backward() needs a single-element loss, got " + shape_string(loss.value().shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id_].requires_grad) {
        return;
    }
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty()) {
            continue;
        }
        if (n.backward) {
            n.backward(n.grad, n.owned);
            n.backward = nullptr;
        } else if (n.param) {
            Tensor& dst = n.param->grad;
            for (std::size_t i = 0; i < dst.size(); ++i) {
                dst[i] += n.grad[i];
            }
        }
    }
}

}  // namespace prefixprop
