#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>

#include "prefixprop/tensor.hpp"

namespace prefixprop {

/// Named model weight with its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string name_, Tensor value_, bool trainable_ = true)
        : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros_like(value)),
          trainable(trainable_) {}

    void zero_grad();
    std::size_t count() const noexcept { return value.size(); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    bool requires_grad() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Records differentiable operations for one reverse pass.
///
/// Parameters bound with `bind` are leaves; only trainable ones require a
/// gradient, and nodes whose inputs all lack one record no backward step.
/// A tape built with record == false only evaluates values. One tape per
/// thread; a tape is not reusable after backward().
class Tape {
public:
    using Backward = std::function<void(const Tensor& grad_out)>;
    // Variant that also sees the node's forward value.
    using BackwardWithOutput = std::function<void(const Tensor& grad_out, const Tensor& out)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    // Leaf that reads p.value in place; p must outlive the tape.
    Var bind(Parameter& p);
    // Non-differentiable leaf over an external tensor that outlives the tape.
    Var constant_ref(const Tensor& value);

    // Appends an op node. `backward` receives dL/d(output) and must call
    // accumulate() for each input that requires a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
    Var record(Tensor value, std::span<const Var> inputs, Backward backward);
    Var record_with_output(Tensor value, std::initializer_list<Var> inputs, BackwardWithOutput backward);

    // Reverse sweep from a single-element loss; adds leaf gradients into the
    // bound trainable Parameters' grad tensors.
    void backward(Var loss);

    void accumulate(Var v, const Tensor& grad);
    // Gradient buffer for v, allocated as zeros on first use.
    Tensor& grad_buffer(Var v);

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    const Tensor& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor grad;
        bool requires_grad = false;
        BackwardWithOutput backward;
        Parameter* param = nullptr;
    };

    Var push(Tensor value, std::span<const Var> inputs, BackwardWithOutput backward);

    bool record_;
    bool consumed_ = false;
    std::deque<Node> nodes_;
};

}  // namespace prefixprop
