// SPDX-License-Identifier: Apache-2.0
//
// Sparse mixture-of-experts layer: per-expert FFN stacks combined through
// the gated residual h' = h + g(s_k) f_k(h), plus the analytic two-term
// Jacobian of that map used by the collapse diagnostics.
#pragma once

#include <cstdint>
#include <vector>

#include "xmoe/routing.hpp"
#include "xmoe/tensor.hpp"

namespace xmoe {

enum class Activation { gelu, relu };
std::string to_string(Activation a);
Activation activation_from(const std::string& s);

struct ExpertFFN {
    struct Sublayer {
        Tensor w1, b1, w2, b2;  // w1 [d x d_ff], w2 [d_ff x d]
    };
    std::vector<Sublayer> subs;

    static ExpertFFN init(int64_t d, int64_t d_ff, int64_t n_sublayers, Rng& rng);
    Tensor forward(const Tensor& x, Activation act, bool frozen = false) const;
};

struct SMoELayer {
    RouterConfig cfg;  // resolved
    ExpertEmbeddings router;
    std::vector<ExpertFFN> experts;
    Activation act = Activation::gelu;

    static SMoELayer init(const RouterConfig& cfg, int64_t d, int64_t d_ff,
                          int64_t n_sublayers, Activation act, Rng& rng);
};

struct SMoEForward {
    Tensor hidden;  // [T x d]
    RoutingOutcome outcome;
};

// Routes every token, runs the selected expert groups in expert-index order
// and combines through the gated residual.
SMoEForward smoe_forward(const Tensor& H, const SMoELayer& layer, bool frozen = false);

struct JacobianParts {
    Tensor j1;  // I + S_k * J_ffn        (gate held constant)
    Tensor j2;  // sum_j S_k (delta_kj - S_j) h_ffn e_j^T
    int64_t selected = 0;
    double margin = 0.0;  // top-1 vs top-2 raw score gap
};

// Analytic Jacobian of smoe_forward at a single off-boundary point, in the
// baseline + softmax setting the decomposition is derived for. Entries use
// the standard convention J[out][in]. Points whose top-2 score margin is
// below delta_margin are rejected.
JacobianParts jacobian_analytic(const Tensor& h, const SMoELayer& layer,
                                double delta_margin = 1e-6);

// The routing-path gradient J2^T u, which always lands inside
// span{e_1..e_N}.
Tensor routing_grad_component(const Tensor& h, const SMoELayer& layer, const Tensor& upstream,
                              double delta_margin = 1e-6);

}  // namespace xmoe
