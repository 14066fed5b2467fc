// SPDX-License-Identifier: Apache-2.0
#include "xmoe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace xmoe {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

namespace {
std::atomic<uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;
}  // namespace

Node::~Node() {
    // Release parent chains iteratively; recursive shared_ptr destruction
    // can blow the stack on long op sequences.
    std::vector<NodePtr> stack;
    stack.swap(parents);
    while (!stack.empty()) {
        NodePtr p = std::move(stack.back());
        stack.pop_back();
        if (p.use_count() == 1) {
            for (auto& gp : p->parents) {
                stack.push_back(std::move(gp));
            }
            p->parents.clear();
        }
    }
}

void Node::ensure_grad() {
    if (g.size() != v.size()) {
        g.assign(v.size(), 0.0);
    }
}

}  // namespace detail

using detail::Node;
using detail::NodePtr;

namespace {

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw Error::runtime(std::string(op) + ": non-finite value produced");
        }
    }
}

NodePtr new_node(Shape shape, std::vector<double> values) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->v = std::move(values);
    n->id = detail::g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

// Builds the output node of an op: validates the result, wires up parents
// and the backward closure only when some input participates in the graph.
Tensor make_op(const char* name, Shape shape, std::vector<double> values,
               std::vector<Tensor> parents, std::function<void(Node&)> backprop) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        throw Error::runtime(std::string(name) + ": internal shape/value mismatch");
    }
    check_finite(values, name);
    NodePtr n = new_node(std::move(shape), std::move(values));
    bool rg = false;
    if (detail::g_grad_enabled) {
        for (const Tensor& p : parents) {
            rg = rg || (p.defined() && p.node()->requires_grad);
        }
    }
    if (rg) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) {
            n->parents.push_back(p.node());
        }
        n->backprop = std::move(backprop);
    }
    return Tensor::wrap(std::move(n));
}

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw Error::runtime(msg);
    }
}

// grad accumulation helper: dst += src (dst is a parent's grad buffer)
void acc_into(const NodePtr& p, const double* src, int64_t n) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    double* d = p->g.data();
    for (int64_t i = 0; i < n; ++i) {
        d[i] += src[i];
    }
}

// C += A[m x k] * B[k x n]
void gemm_nn_acc(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        double* c = C + i * n;
        const double* a = A + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = a[kk];
            const double* b = B + kk * n;
            for (int64_t j = 0; j < n; ++j) {
                c[j] += av * b[j];
            }
        }
    }
}

// C += A[m x n] * B[k x n]^T  -> C[m x k]
void gemm_nt_acc(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const double* a = A + i * n;
        double* c = C + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double* b = B + kk * n;
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                s += a[j] * b[j];
            }
            c[kk] += s;
        }
    }
}

// C += A[m x k]^T * B[m x n] -> C[k x n]
void gemm_tn_acc(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        const double* b = B + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = a[kk];
            if (av == 0.0) continue;
            double* c = C + kk * n;
            for (int64_t j = 0; j < n; ++j) {
                c[j] += av * b[j];
            }
        }
    }
}

struct LaneIter {
    int64_t outer, n, inner;
};

LaneIter lanes_for(const Shape& shape, int64_t dim) {
    require(dim >= 0 && dim < static_cast<int64_t>(shape.size()),
            "invalid reduction dim " + std::to_string(dim) + " for shape " + shape_str(shape));
    LaneIter it{1, shape[dim], 1};
    for (int64_t i = 0; i < dim; ++i) it.outer *= shape[i];
    for (size_t i = dim + 1; i < shape.size(); ++i) it.inner *= shape[i];
    return it;
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = new_node(std::move(shape), {});
    n->v.assign(numel_of(n->shape), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::constant(Shape shape, double value) {
    require(std::isfinite(value), "Tensor::constant: non-finite fill value");
    auto n = new_node(std::move(shape), {});
    n->v.assign(numel_of(n->shape), value);
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    require(numel_of(shape) == static_cast<int64_t>(values.size()),
            "Tensor::from: " + shape_str(shape) + " does not hold " +
                std::to_string(values.size()) + " values");
    check_finite(values, "Tensor::from");
    auto n = new_node(std::move(shape), std::move(values));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) {
    return Tensor::from(Shape{}, {value});
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    std::vector<double> v(numel_of(shape));
    for (double& x : v) {
        x = rng.next_gauss() * stddev;
    }
    return Tensor::from(std::move(shape), std::move(v));
}

const Shape& Tensor::shape() const {
    require(defined(), "use of undefined tensor");
    return node_->shape;
}

int64_t Tensor::dim(int64_t i) const {
    const Shape& s = shape();
    require(i >= 0 && i < static_cast<int64_t>(s.size()), "dim index out of range");
    return s[i];
}

int64_t Tensor::numel() const {
    return numel_of(shape());
}

const std::vector<double>& Tensor::values() const {
    require(defined(), "use of undefined tensor");
    return node_->v;
}

std::vector<double>& Tensor::data() {
    require(defined(), "use of undefined tensor");
    require(is_leaf(), "data(): in-place mutation is only allowed on leaf tensors");
    return node_->v;
}

double Tensor::value() const {
    require(numel() == 1, "value(): tensor is not a scalar");
    return node_->v[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = shape();
    require(idx.size() == s.size(), "at(): rank mismatch");
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
        require(i >= 0 && i < s[k], "at(): index out of range");
        off = off * s[k] + i;
        ++k;
    }
    return node_->v[off];
}

bool Tensor::requires_grad() const {
    return defined() && node_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool rg) {
    require(defined(), "use of undefined tensor");
    require(is_leaf(), "set_requires_grad: only leaf tensors");
    node_->requires_grad = rg;
    if (!rg) {
        node_->g.clear();
    }
    return *this;
}

bool Tensor::has_grad() const {
    return defined() && node_->g.size() == node_->v.size();
}

const std::vector<double>& Tensor::grad() const {
    require(has_grad(), "grad(): no gradient present (run backward first)");
    return node_->g;
}

std::vector<double>& Tensor::mutable_grad() {
    require(has_grad(), "mutable_grad(): no gradient present (run backward first)");
    return node_->g;
}

void Tensor::zero_grad() {
    require(defined(), "use of undefined tensor");
    node_->g.clear();
}

Tensor Tensor::detach() const {
    require(defined(), "use of undefined tensor");
    auto n = new_node(node_->shape, node_->v);
    return Tensor(std::move(n));
}

bool Tensor::is_leaf() const {
    return defined() && node_->parents.empty() && !node_->backprop;
}

NoGradGuard::NoGradGuard() : prev_(detail::g_grad_enabled) {
    detail::g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    detail::g_grad_enabled = prev_;
}

bool grad_enabled() {
    return detail::g_grad_enabled;
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(b.dim(0) == k, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    gemm_nn_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    return make_op("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node& o) {
        const auto& pa = a.node();
        const auto& pb = b.node();
        if (pa->requires_grad) {
            pa->ensure_grad();
            gemm_nt_acc(o.g.data(), pb->v.data(), pa->g.data(), m, n, k);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            gemm_tn_acc(pa->v.data(), o.g.data(), pb->g.data(), m, k, n);
        }
    });
}

Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose: rank-2 tensor required");
    const int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    const auto& av = a.values();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            out[j * m + i] = av[i * n + j];
        }
    }
    return make_op("transpose", Shape{n, m}, std::move(out), {a}, [a, m, n](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                pa->g[i * n + j] += o.g[j * m + i];
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op("add", a.shape(), std::move(out), {a, b}, [a, b, n](Node& o) {
        acc_into(a.node(), o.g.data(), n);
        acc_into(b.node(), o.g.data(), n);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [a, b, n](Node& o) {
        acc_into(a.node(), o.g.data(), n);
        const auto& pb = b.node();
        if (!pb->requires_grad) return;
        pb->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pb->g[i] -= o.g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [a, b, n](Node& o) {
        const auto& pa = a.node();
        const auto& pb = b.node();
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int64_t i = 0; i < n; ++i) pa->g[i] += o.g[i] * pb->v[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int64_t i = 0; i < n; ++i) pb->g[i] += o.g[i] * pa->v[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    require(std::isfinite(c), "scale: non-finite factor");
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = a.values()[i] * c;
    return make_op("scale", a.shape(), std::move(out), {a}, [a, c, n](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pa->g[i] += o.g[i] * c;
    });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    require(a.rank() >= 1 && bias.rank() == 1, "add_bias: bias must be rank-1");
    const int64_t n = a.dim(a.rank() - 1);
    require(bias.dim(0) == n, "add_bias: bias length mismatch");
    const int64_t rows = a.numel() / n;
    std::vector<double> out(a.numel());
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < n; ++j) {
            out[r * n + j] = a.values()[r * n + j] + bias.values()[j];
        }
    }
    return make_op("add_bias", a.shape(), std::move(out), {a, bias}, [a, bias, rows, n](Node& o) {
        acc_into(a.node(), o.g.data(), rows * n);
        const auto& pb = bias.node();
        if (!pb->requires_grad) return;
        pb->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < n; ++j) pb->g[j] += o.g[r * n + j];
        }
    });
}

Tensor add_rows_tiled(const Tensor& a, const Tensor& rows) {
    require(a.rank() == 2 && rows.rank() == 2, "add_rows_tiled: rank-2 tensors required");
    const int64_t R = a.dim(0), d = a.dim(1), T = rows.dim(0);
    require(rows.dim(1) == d && T > 0 && R % T == 0,
            "add_rows_tiled: " + shape_str(rows.shape()) + " does not tile " +
                shape_str(a.shape()));
    std::vector<double> out(a.numel());
    for (int64_t i = 0; i < R; ++i) {
        const int64_t t = i % T;
        for (int64_t j = 0; j < d; ++j) {
            out[i * d + j] = a.values()[i * d + j] + rows.values()[t * d + j];
        }
    }
    return make_op("add_rows_tiled", a.shape(), std::move(out), {a, rows},
                   [a, rows, R, d, T](Node& o) {
                       acc_into(a.node(), o.g.data(), R * d);
                       const auto& pr = rows.node();
                       if (!pr->requires_grad) return;
                       pr->ensure_grad();
                       for (int64_t i = 0; i < R; ++i) {
                           const int64_t t = i % T;
                           for (int64_t j = 0; j < d; ++j) pr->g[t * d + j] += o.g[i * d + j];
                       }
                   });
}

Tensor relu(const Tensor& a) {
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    return make_op("relu", a.shape(), std::move(out), {a}, [a, n](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            if (pa->v[i] > 0.0) pa->g[i] += o.g[i];
        }
    });
}

Tensor gelu(const Tensor& a) {
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) {
        const double x = a.values()[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    return make_op("gelu", a.shape(), std::move(out), {a}, [a, n](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const double x = pa->v[i];
            const double th = std::tanh(kC * (x + kA * x * x * x));
            const double dd = 0.5 * (1.0 + th) +
                              0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
            pa->g[i] += o.g[i] * dd;
        }
    });
}

Tensor sigmoid(const Tensor& a) {
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) {
        const double x = a.values()[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return make_op("sigmoid", a.shape(), std::move(out), {a}, [a, n](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const double x = pa->v[i];
            const double y = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            pa->g[i] += o.g[i] * y * (1.0 - y);
        }
    });
}

Tensor exp(const Tensor& a) {
    const int64_t n = a.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = std::exp(a.values()[i]);
    return make_op("exp", a.shape(), std::move(out), {a}, [a, n](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t i = 0; i < n; ++i) pa->g[i] += o.g[i] * o.v[i];
    });
}

Tensor softmax(const Tensor& a, int64_t dim) {
    const LaneIter it = lanes_for(a.shape(), dim);
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (int64_t o = 0; o < it.outer; ++o) {
        for (int64_t in = 0; in < it.inner; ++in) {
            const int64_t base = o * it.n * it.inner + in;
            double mx = av[base];
            for (int64_t i = 1; i < it.n; ++i) mx = std::max(mx, av[base + i * it.inner]);
            double sum = 0.0;
            for (int64_t i = 0; i < it.n; ++i) {
                const double e = std::exp(av[base + i * it.inner] - mx);
                out[base + i * it.inner] = e;
                sum += e;
            }
            for (int64_t i = 0; i < it.n; ++i) out[base + i * it.inner] /= sum;
        }
    }
    return make_op("softmax", a.shape(), std::move(out), {a}, [a, it](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t ou = 0; ou < it.outer; ++ou) {
            for (int64_t in = 0; in < it.inner; ++in) {
                const int64_t base = ou * it.n * it.inner + in;
                double dot = 0.0;
                for (int64_t i = 0; i < it.n; ++i) {
                    const int64_t k = base + i * it.inner;
                    dot += o.g[k] * o.v[k];
                }
                for (int64_t i = 0; i < it.n; ++i) {
                    const int64_t k = base + i * it.inner;
                    pa->g[k] += o.v[k] * (o.g[k] - dot);
                }
            }
        }
    });
}

Tensor l2_normalize(const Tensor& a, int64_t dim, double eps) {
    require(eps > 0.0, "l2_normalize: eps must be positive");
    const LaneIter it = lanes_for(a.shape(), dim);
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (int64_t o = 0; o < it.outer; ++o) {
        for (int64_t in = 0; in < it.inner; ++in) {
            const int64_t base = o * it.n * it.inner + in;
            double ss = 0.0;
            for (int64_t i = 0; i < it.n; ++i) {
                const double x = av[base + i * it.inner];
                ss += x * x;
            }
            const double denom = std::max(std::sqrt(ss), eps);
            for (int64_t i = 0; i < it.n; ++i) {
                out[base + i * it.inner] = av[base + i * it.inner] / denom;
            }
        }
    }
    return make_op("l2_normalize", a.shape(), std::move(out), {a}, [a, it, eps](Node& o) {
        const auto& pa = a.node();
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (int64_t ou = 0; ou < it.outer; ++ou) {
            for (int64_t in = 0; in < it.inner; ++in) {
                const int64_t base = ou * it.n * it.inner + in;
                double ss = 0.0;
                for (int64_t i = 0; i < it.n; ++i) {
                    const double x = pa->v[base + i * it.inner];
                    ss += x * x;
                }
                const double nrm = std::sqrt(ss);
                if (nrm >= eps) {
                    double dot = 0.0;
                    for (int64_t i = 0; i < it.n; ++i) {
                        const int64_t k = base + i * it.inner;
                        dot += o.g[k] * o.v[k];
                    }
                    for (int64_t i = 0; i < it.n; ++i) {
                        const int64_t k = base + i * it.inner;
                        pa->g[k] += (o.g[k] - o.v[k] * dot) / nrm;
                    }
                } else {
                    // below eps the denominator is the constant eps
                    for (int64_t i = 0; i < it.n; ++i) {
                        const int64_t k = base + i * it.inner;
                        pa->g[k] += o.g[k] / eps;
                    }
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(eps > 0.0, "layer_norm: eps must be positive");
    require(x.rank() >= 1 && gamma.rank() == 1 && beta.rank() == 1,
            "layer_norm: gamma/beta must be rank-1");
    const int64_t n = x.dim(x.rank() - 1);
    require(gamma.dim(0) == n && beta.dim(0) == n, "layer_norm: gamma/beta length mismatch");
    const int64_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        double mean = 0.0;
        for (int64_t j = 0; j < n; ++j) mean += xr[j];
        mean /= n;
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < n; ++j) {
            out[r * n + j] = (xr[j] - mean) * inv * gamma.values()[j] + beta.values()[j];
        }
    }
    return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                   [x, gamma, beta, rows, n, eps](Node& o) {
                       const auto& px = x.node();
                       const auto& pg = gamma.node();
                       const auto& pb = beta.node();
                       for (int64_t r = 0; r < rows; ++r) {
                           const double* xr = px->v.data() + r * n;
                           const double* gr = o.g.data() + r * n;
                           double mean = 0.0;
                           for (int64_t j = 0; j < n; ++j) mean += xr[j];
                           mean /= n;
                           double var = 0.0;
                           for (int64_t j = 0; j < n; ++j) {
                               const double d = xr[j] - mean;
                               var += d * d;
                           }
                           var /= n;
                           const double inv = 1.0 / std::sqrt(var + eps);
                           if (pg->requires_grad || pb->requires_grad) {
                               if (pg->requires_grad) pg->ensure_grad();
                               if (pb->requires_grad) pb->ensure_grad();
                               for (int64_t j = 0; j < n; ++j) {
                                   const double xhat = (xr[j] - mean) * inv;
                                   if (pg->requires_grad) pg->g[j] += gr[j] * xhat;
                                   if (pb->requires_grad) pb->g[j] += gr[j];
                               }
                           }
                           if (px->requires_grad) {
                               px->ensure_grad();
                               double sum_dh = 0.0, sum_dh_xh = 0.0;
                               for (int64_t j = 0; j < n; ++j) {
                                   const double xhat = (xr[j] - mean) * inv;
                                   const double dh = gr[j] * pg->v[j];
                                   sum_dh += dh;
                                   sum_dh_xh += dh * xhat;
                               }
                               for (int64_t j = 0; j < n; ++j) {
                                   const double xhat = (xr[j] - mean) * inv;
                                   const double dh = gr[j] * pg->v[j];
                                   px->g[r * n + j] +=
                                       inv * (dh - sum_dh / n - xhat * sum_dh_xh / n);
                               }
                           }
                       }
                   });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> targets,
                     std::span<const uint8_t> mask) {
    require(logits.rank() == 2, "cross_entropy: logits must be [T x V]");
    const int64_t T = logits.dim(0), V = logits.dim(1);
    require(static_cast<int64_t>(targets.size()) == T, "cross_entropy: target count mismatch");
    require(static_cast<int64_t>(mask.size()) == T, "cross_entropy: mask length mismatch");
    int64_t m_count = 0;
    for (uint8_t f : mask) m_count += f ? 1 : 0;
    if (m_count == 0) {
        throw Error::runtime("cross_entropy: no supervised positions");
    }
    for (int64_t t = 0; t < T; ++t) {
        if (mask[t]) {
            require(targets[t] >= 0 && targets[t] < V,
                    "cross_entropy: target id out of range at row " + std::to_string(t));
        }
    }
    std::vector<int64_t> tv(targets.begin(), targets.end());
    std::vector<uint8_t> mv(mask.begin(), mask.end());
    const auto& lv = logits.values();
    double loss = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        if (!mv[t]) continue;
        const double* row = lv.data() + t * V;
        double mx = row[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
        loss += std::log(sum) + mx - row[tv[t]];
    }
    loss /= static_cast<double>(m_count);
    return make_op("cross_entropy", Shape{}, {loss}, {logits},
                   [logits, tv = std::move(tv), mv = std::move(mv), T, V, m_count](Node& o) {
                       const auto& pl = logits.node();
                       if (!pl->requires_grad) return;
                       pl->ensure_grad();
                       const double gscale = o.g[0] / static_cast<double>(m_count);
                       for (int64_t t = 0; t < T; ++t) {
                           if (!mv[t]) continue;
                           const double* row = pl->v.data() + t * V;
                           double mx = row[0];
                           for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
                           double sum = 0.0;
                           for (int64_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
                           for (int64_t j = 0; j < V; ++j) {
                               const double p = std::exp(row[j] - mx) / sum;
                               pl->g[t * V + j] += gscale * (p - (j == tv[t] ? 1.0 : 0.0));
                           }
                       }
                   });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int64_t> ids) {
    require(table.rank() == 2, "embedding_lookup: table must be [V x d]");
    const int64_t V = table.dim(0), d = table.dim(1);
    const int64_t n = static_cast<int64_t>(ids.size());
    for (int64_t id : ids) {
        require(id >= 0 && id < V, "embedding_lookup: token id " + std::to_string(id) +
                                       " out of range [0, " + std::to_string(V) + ")");
    }
    std::vector<double> out(n * d);
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(out.data() + i * d, table.values().data() + ids[i] * d, d * sizeof(double));
    }
    std::vector<int64_t> iv(ids.begin(), ids.end());
    return make_op("embedding_lookup", Shape{n, d}, std::move(out), {table},
                   [table, iv = std::move(iv), n, d](Node& o) {
                       const auto& pt = table.node();
                       if (!pt->requires_grad) return;
                       pt->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) {
                           double* dst = pt->g.data() + iv[i] * d;
                           const double* src = o.g.data() + i * d;
                           for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                       }
                   });
}

Tensor gather_rows(const Tensor& x, std::span<const int64_t> idx) {
    require(x.rank() == 1 || x.rank() == 2, "gather_rows: rank-1 or rank-2 tensor required");
    const int64_t rows = x.dim(0);
    const int64_t w = x.rank() == 2 ? x.dim(1) : 1;
    for (int64_t i : idx) {
        require(i >= 0 && i < rows, "gather_rows: row index out of range");
    }
    const int64_t n = static_cast<int64_t>(idx.size());
    std::vector<double> out(n * w);
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(out.data() + i * w, x.values().data() + idx[i] * w, w * sizeof(double));
    }
    Shape oshape = x.rank() == 2 ? Shape{n, w} : Shape{n};
    std::vector<int64_t> iv(idx.begin(), idx.end());
    return make_op("gather_rows", std::move(oshape), std::move(out), {x},
                   [x, iv = std::move(iv), n, w](Node& o) {
                       const auto& px = x.node();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) {
                           double* dst = px->g.data() + iv[i] * w;
                           const double* src = o.g.data() + i * w;
                           for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
                       }
                   });
}

Tensor index_add_rows(const Tensor& base, const Tensor& x, std::span<const int64_t> idx) {
    require(base.rank() == 2 && x.rank() == 2, "index_add_rows: rank-2 tensors required");
    const int64_t rows = base.dim(0), d = base.dim(1), g = x.dim(0);
    require(x.dim(1) == d, "index_add_rows: column mismatch");
    require(static_cast<int64_t>(idx.size()) == g, "index_add_rows: index count mismatch");
    for (int64_t i : idx) {
        require(i >= 0 && i < rows, "index_add_rows: row index out of range");
    }
    std::vector<double> out = base.values();
    for (int64_t r = 0; r < g; ++r) {
        double* dst = out.data() + idx[r] * d;
        const double* src = x.values().data() + r * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    std::vector<int64_t> iv(idx.begin(), idx.end());
    return make_op("index_add_rows", base.shape(), std::move(out), {base, x},
                   [base, x, iv = std::move(iv), rows, d, g](Node& o) {
                       acc_into(base.node(), o.g.data(), rows * d);
                       const auto& px = x.node();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (int64_t r = 0; r < g; ++r) {
                           double* dst = px->g.data() + r * d;
                           const double* src = o.g.data() + iv[r] * d;
                           for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                       }
                   });
}

Tensor rows_scale(const Tensor& x, const Tensor& s) {
    require(x.rank() == 2 && s.rank() == 1, "rows_scale: x[RxC], s[R] required");
    const int64_t rows = x.dim(0), d = x.dim(1);
    require(s.dim(0) == rows, "rows_scale: row count mismatch");
    std::vector<double> out(x.numel());
    for (int64_t r = 0; r < rows; ++r) {
        const double sv = s.values()[r];
        for (int64_t j = 0; j < d; ++j) out[r * d + j] = x.values()[r * d + j] * sv;
    }
    return make_op("rows_scale", x.shape(), std::move(out), {x, s}, [x, s, rows, d](Node& o) {
        const auto& px = x.node();
        const auto& ps = s.node();
        if (px->requires_grad) {
            px->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double sv = ps->v[r];
                for (int64_t j = 0; j < d; ++j) px->g[r * d + j] += o.g[r * d + j] * sv;
            }
        }
        if (ps->requires_grad) {
            ps->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += o.g[r * d + j] * px->v[r * d + j];
                ps->g[r] += dot;
            }
        }
    });
}

Tensor select_per_row(const Tensor& x, std::span<const int64_t> idx) {
    require(x.rank() == 2, "select_per_row: rank-2 tensor required");
    const int64_t rows = x.dim(0), n = x.dim(1);
    require(static_cast<int64_t>(idx.size()) == rows, "select_per_row: index count mismatch");
    for (int64_t i : idx) {
        require(i >= 0 && i < n, "select_per_row: column index out of range");
    }
    std::vector<double> out(rows);
    for (int64_t r = 0; r < rows; ++r) out[r] = x.values()[r * n + idx[r]];
    std::vector<int64_t> iv(idx.begin(), idx.end());
    return make_op("select_per_row", Shape{rows}, std::move(out), {x},
                   [x, iv = std::move(iv), rows, n](Node& o) {
                       const auto& px = x.node();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (int64_t r = 0; r < rows; ++r) px->g[r * n + iv[r]] += o.g[r];
                   });
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
    require(x.rank() == 2, "slice_rows: rank-2 tensor required");
    const int64_t rows = x.dim(0), d = x.dim(1);
    require(start >= 0 && len >= 0 && start + len <= rows, "slice_rows: range out of bounds");
    std::vector<double> out(x.values().begin() + start * d,
                            x.values().begin() + (start + len) * d);
    return make_op("slice_rows", Shape{len, d}, std::move(out), {x}, [x, start, len, d](Node& o) {
        const auto& px = x.node();
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int64_t i = 0; i < len * d; ++i) px->g[start * d + i] += o.g[i];
    });
}

Tensor slice_cols(const Tensor& x, int64_t start, int64_t len) {
    require(x.rank() == 2, "slice_cols: rank-2 tensor required");
    const int64_t rows = x.dim(0), d = x.dim(1);
    require(start >= 0 && len >= 0 && start + len <= d, "slice_cols: range out of bounds");
    std::vector<double> out(rows * len);
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.data() + r * len, x.values().data() + r * d + start, len * sizeof(double));
    }
    return make_op("slice_cols", Shape{rows, len}, std::move(out), {x},
                   [x, start, len, rows, d](Node& o) {
                       const auto& px = x.node();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (int64_t r = 0; r < rows; ++r) {
                           for (int64_t j = 0; j < len; ++j) {
                               px->g[r * d + start + j] += o.g[r * len + j];
                           }
                       }
                   });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: empty part list");
    const int64_t d = parts[0].dim(1);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        require(p.rank() == 2 && p.dim(1) == d, "concat_rows: column mismatch");
        total += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(total * d);
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    return make_op("concat_rows", Shape{total, d}, std::move(out), parts, [parts, d](Node& o) {
        int64_t off = 0;
        for (const Tensor& p : parts) {
            const int64_t n = p.numel();
            acc_into(p.node(), o.g.data() + off, n);
            off += n;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: empty part list");
    const int64_t rows = parts[0].dim(0);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        require(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
        total += p.dim(1);
    }
    std::vector<double> out(rows * total);
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t w = p.dim(1);
        for (int64_t r = 0; r < rows; ++r) {
            std::memcpy(out.data() + r * total + off, p.values().data() + r * w,
                        w * sizeof(double));
        }
        off += w;
    }
    return make_op("concat_cols", Shape{rows, total}, std::move(out), parts,
                   [parts, rows, total](Node& o) {
                       int64_t off = 0;
                       for (const Tensor& p : parts) {
                           const int64_t w = p.dim(1);
                           const auto& pn = p.node();
                           if (pn->requires_grad) {
                               pn->ensure_grad();
                               for (int64_t r = 0; r < rows; ++r) {
                                   for (int64_t j = 0; j < w; ++j) {
                                       pn->g[r * w + j] += o.g[r * total + off + j];
                                   }
                               }
                           }
                           off += w;
                       }
                   });
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    const int64_t n = x.numel();
    return make_op("sum_all", Shape{}, {s}, {x}, [x, n](Node& o) {
        const auto& px = x.node();
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int64_t i = 0; i < n; ++i) px->g[i] += o.g[0];
    });
}

Tensor mean_all(const Tensor& x) {
    const int64_t n = x.numel();
    require(n > 0, "mean_all: empty tensor");
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_op("mean_all", Shape{}, {s / n}, {x}, [x, n](Node& o) {
        const auto& px = x.node();
        if (!px->requires_grad) return;
        px->ensure_grad();
        const double g = o.g[0] / n;
        for (int64_t i = 0; i < n; ++i) px->g[i] += g;
    });
}

Tensor mean_rows(const Tensor& x) {
    require(x.rank() == 2, "mean_rows: rank-2 tensor required");
    const int64_t rows = x.dim(0), n = x.dim(1);
    require(rows > 0, "mean_rows: empty tensor");
    std::vector<double> out(n, 0.0);
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < n; ++j) out[j] += x.values()[r * n + j];
    }
    for (int64_t j = 0; j < n; ++j) out[j] /= rows;
    return make_op("mean_rows", Shape{n}, std::move(out), {x}, [x, rows, n](Node& o) {
        const auto& px = x.node();
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < n; ++j) px->g[r * n + j] += o.g[j] / rows;
        }
    });
}

Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    require(s.numel() == 1, "mul_scalar_t: s must be a scalar tensor");
    const double sv = s.values()[0];
    const int64_t n = x.numel();
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = x.values()[i] * sv;
    return make_op("mul_scalar_t", x.shape(), std::move(out), {x, s}, [x, s, sv, n](Node& o) {
        const auto& px = x.node();
        const auto& ps = s.node();
        if (px->requires_grad) {
            px->ensure_grad();
            for (int64_t i = 0; i < n; ++i) px->g[i] += o.g[i] * sv;
        }
        if (ps->requires_grad) {
            ps->ensure_grad();
            double dot = 0.0;
            for (int64_t i = 0; i < n; ++i) dot += o.g[i] * px->v[i];
            ps->g[0] += dot;
        }
    });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
    if (rate == 0.0) {
        return x;
    }
    const int64_t n = x.numel();
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(n);
    for (int64_t i = 0; i < n; ++i) {
        mask[i] = rng.next_double() >= rate ? keep_scale : 0.0;
    }
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = x.values()[i] * mask[i];
    return make_op("dropout", x.shape(), std::move(out), {x},
                   [x, mask = std::move(mask), n](Node& o) {
                       const auto& px = x.node();
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (int64_t i = 0; i < n; ++i) px->g[i] += o.g[i] * mask[i];
                   });
}

std::vector<int64_t> argmax_rows(const Tensor& x) {
    require(x.rank() == 2, "argmax_rows: rank-2 tensor required");
    const int64_t rows = x.dim(0), n = x.dim(1);
    require(n >= 1, "argmax_rows: empty rows");
    std::vector<int64_t> out(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = x.values().data() + r * n;
        int64_t best = 0;
        for (int64_t j = 1; j < n; ++j) {
            if (row[j] > row[best]) best = j;  // strict: lowest index wins ties
        }
        out[r] = best;
    }
    return out;
}

void backward(const Tensor& loss) {
    require(loss.defined(), "backward: undefined loss tensor");
    if (loss.numel() != 1) {
        throw Error::runtime("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    NodePtr root = loss.node();
    if (!root->requires_grad) {
        throw Error::runtime("backward: loss is not connected to any differentiable input");
    }
    if (root->backward_done) {
        throw Error::runtime("backward: already called on this loss; rebuild the graph first");
    }
    root->backward_done = true;

    // reverse creation order == reverse topological order for this graph;
    // the order vector keeps every node alive until the walk finishes
    std::vector<NodePtr> order;
    std::unordered_set<Node*> seen;
    std::vector<NodePtr> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        for (const NodePtr& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) {
                stack.push_back(p);
            }
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });

    root->ensure_grad();
    root->g[0] = 1.0;
    for (const NodePtr& n : order) {
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
    // consume the graph: each recorded op runs exactly once
    for (const NodePtr& n : order) {
        n->parents.clear();
        n->backprop = nullptr;
    }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
    require(h > 0.0, "finite_diff_grad: h must be positive");
    NoGradGuard ng;
    Tensor probe = x.detach();
    std::vector<double>& pv = probe.data();
    std::vector<double> out(x.numel());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = pv[i];
        pv[i] = orig + h;
        const double fp = f(probe);
        pv[i] = orig - h;
        const double fm = f(probe);
        pv[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from(x.shape(), std::move(out));
}

}  // namespace xmoe
