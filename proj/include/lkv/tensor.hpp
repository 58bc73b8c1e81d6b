// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense float64 tensor with reverse-mode differentiation.
//
// Every primitive is eager: it computes its value immediately and, when some
// input requires a gradient (and grad mode is on), attaches a tape node
// holding the analytic vector-Jacobian product. backward() replays reachable
// nodes once, in reverse creation order, which is a valid topological order
// because nodes are appended as they are created.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

namespace lkv {

class Tensor;

using TensorId = const void*;

struct TapeNode {
    std::vector<Tensor> inputs;
    // One gradient per input, aligned with `inputs`; an undefined Tensor marks
    // an input that needs no gradient.
    std::function<std::vector<Tensor>(const Tensor& upstream)> vjp;
    TensorId output_id = nullptr;
    std::vector<int> output_shape;
    int64_t seq = 0;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t numel() const;

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool v) { requires_grad_ = v; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    const std::vector<double>& vec() const { return *data_; }

    // Scalar read; the tensor must hold exactly one element.
    double value() const;

    // Identity = the underlying buffer. Copies of a Tensor share it.
    TensorId id() const { return static_cast<TensorId>(data_.get()); }

    // Deep copy with no tape attachment.
    Tensor detached_clone() const;

    std::shared_ptr<TapeNode> node;

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
};

// Gradients keyed by tensor identity, produced by backward().
class GradMap {
public:
    // Gradient of the backward root w.r.t. t; zeros of t's shape when t was
    // never reached.
    Tensor grad_for(const Tensor& t) const;
    bool contains(const Tensor& t) const { return grads_.count(t.id()) > 0; }
    void accumulate(const Tensor& t, const Tensor& g);
    size_t size() const { return grads_.size(); }

private:
    std::unordered_map<TensorId, Tensor> grads_;
};

bool grad_enabled();

// Disables tape recording for its scope (evaluation passes, oracles).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Reverse-mode sweep from a scalar root. Throws contract_error when the root
// is not scalar or carries no tape.
GradMap backward(const Tensor& root);

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// Adds a length-d row vector to every row of x (last dim must match).
Tensor add_rowvec(const Tensor& x, const Tensor& bias);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, int offset, int length);
Tensor silu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Elementwise squared difference (a - b)^2.
Tensor sq_error(const Tensor& a, const Tensor& b);
// Row-averaged KL(P_teacher || P_student) of two logit matrices, with
// log-sum-exp stabilized log-softmax on both sides.
Tensor kl_from_logits(const Tensor& teacher_logits, const Tensor& student_logits);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
// Rotary pair rotation over the last dim (must be even); positions are the
// absolute token indices of each row.
Tensor rope(const Tensor& x, const std::vector<int>& positions, double base = 10000.0);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// Mean next-token negative log-likelihood of `targets` under `logits` rows.
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets);
// Same data, new shape (element count must match).
Tensor reshape(const Tensor& x, std::vector<int> shape);

// Registers the output of a custom operation (used by the selection operator
// and the attention kernel, whose backward passes are analytic).
Tensor make_op_output(std::vector<int> shape, std::vector<double> values,
                      std::vector<Tensor> inputs,
                      std::function<std::vector<Tensor>(const Tensor&)> vjp);

// Central-difference gradient of a scalar function, (f(x+h e_i) - f(x-h e_i)) / 2h.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h);

}  // namespace lkv
