// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
// Every op records its inputs and a backward closure on the output node;
// nodes carry strictly increasing creation ids, so the reverse pass visits
// the recorded graph once in reverse creation order (a valid topological
// order for a define-by-run graph).
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xmoe/common.hpp"
#include "xmoe/rng.hpp"

namespace xmoe {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> v;
    std::vector<double> g;  // same size as v once touched by backward
    bool requires_grad = false;
    bool backward_done = false;
    uint64_t id = 0;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;

    ~Node();
    void ensure_grad();
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor constant(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t rank() const { return static_cast<int64_t>(shape().size()); }
    int64_t dim(int64_t i) const;
    int64_t numel() const;
    bool is_scalar() const { return defined() && numel() == 1 && rank() == 0; }

    const std::vector<double>& values() const;
    std::vector<double>& data();  // in-place mutation; leaf tensors only
    double value() const;         // scalar tensors only
    double at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool rg);  // leaf tensors only
    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& mutable_grad();  // e.g. for gradient clipping
    void zero_grad();

    Tensor detach() const;  // value copy with no graph history
    bool is_leaf() const;

    detail::NodePtr node() const { return node_; }
    static Tensor wrap(detail::NodePtr n) { return Tensor(std::move(n)); }

private:
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}
    detail::NodePtr node_;
};

// Disables graph recording for the enclosing scope (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- differentiable ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_bias(const Tensor& a, const Tensor& bias);        // bias over last dim
Tensor add_rows_tiled(const Tensor& a, const Tensor& rows);  // rows tiled over row groups
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softmax(const Tensor& a, int64_t dim);
Tensor l2_normalize(const Tensor& a, int64_t dim, double eps = 1e-12);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> targets,
                     std::span<const uint8_t> mask);
Tensor embedding_lookup(const Tensor& table, std::span<const int64_t> ids);
Tensor gather_rows(const Tensor& x, std::span<const int64_t> idx);
Tensor index_add_rows(const Tensor& base, const Tensor& x, std::span<const int64_t> idx);
Tensor rows_scale(const Tensor& x, const Tensor& s);  // row r scaled by s[r]
Tensor select_per_row(const Tensor& x, std::span<const int64_t> idx);
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
Tensor slice_cols(const Tensor& x, int64_t start, int64_t len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_rows(const Tensor& x);                     // column means of a matrix
Tensor mul_scalar_t(const Tensor& x, const Tensor& s); // s is a scalar tensor
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// forward-only; lowest index wins ties
std::vector<int64_t> argmax_rows(const Tensor& x);

// Reverse pass from a scalar loss. Fills .grad() of every reachable tensor
// that requires grad, then consumes the recorded graph; a second call on the
// same loss is an error.
void backward(const Tensor& loss);

// Central-difference gradient of a scalar function, coordinate by coordinate.
// This is the oracle the analytic backward passes are tested against.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace xmoe
