// SPDX-License-Identifier: Apache-2.0
//
// Token-to-expert scoring, top-1 selection and gating.
//
// Two routing variants:
//   baseline     s_i = h . e_i          (dot product in model space, fixed gate)
//   hypersphere  s_i = cos(W^T h, e_i)  (projected, L2-normalized, learnable
//                                        gate temperature)
// The projection and normalization stages can be toggled independently for
// component ablations; the presets above are what the variants mean.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmoe/tensor.hpp"

namespace xmoe {

enum class RouterVariant { baseline, hypersphere };
enum class Gating { softmax, sigmoid };

std::string to_string(RouterVariant v);
std::string to_string(Gating g);
RouterVariant router_variant_from(const std::string& s);
Gating gating_from(const std::string& s);

struct RouterConfig {
    RouterVariant variant = RouterVariant::hypersphere;
    Gating gating = Gating::softmax;
    int64_t num_experts = 8;
    int64_t routing_dim = 0;   // 0 -> max(1, num_experts / 2)
    double tau_init = 0.0;     // 0 -> 0.3 (softmax) / 0.07 (sigmoid); baseline pins 1
    double tau0 = 0.0;         // fixed balance temperature; 0 -> gate default / 1 for baseline
    double eps_norm = 1e-12;
    // component toggles (ablations); resolve() aligns them with the variant
    bool dim_reduction = true;
    bool l2_norm = true;

    // Fills derived defaults and validates; returns the finished config.
    RouterConfig resolved() const;
    bool learnable_tau() const { return variant == RouterVariant::hypersphere; }
    int64_t embed_dim(int64_t model_dim) const {
        return dim_reduction ? routing_dim : model_dim;
    }
    void validate() const;
};

// Learnable router state. E holds one embedding row per expert; W is the
// projection into the routing space (present only with dim_reduction);
// log_tau stores ln(tau) so tau stays positive under any update.
struct ExpertEmbeddings {
    Tensor E;
    Tensor W;
    Tensor log_tau;

    static ExpertEmbeddings init(const RouterConfig& cfg, int64_t model_dim, Rng& rng);
    double tau() const;
};

struct RoutingOutcome {
    Tensor scores;                  // [T x N], pre-gate
    std::vector<int64_t> selected;  // argmax per token, lowest index on ties
    Tensor gate;                    // [T], g(s_k)
    Tensor projected;               // [T x d_e] normalized projections (hypersphere only)
};

Tensor score_baseline(const Tensor& H, const Tensor& E);

struct HypersphereScores {
    Tensor scores;
    Tensor projected;
};
HypersphereScores score_hypersphere(const Tensor& H, const Tensor& W, const Tensor& E,
                                    double eps);

std::vector<int64_t> select_top1(const Tensor& scores);

// Gate for the selected expert. log_tau may be undefined, which means a
// fixed unit temperature. Softmax gating backpropagates into every score of
// a row; sigmoid gating touches only the selected one.
Tensor gate_value(const Tensor& scores, const std::vector<int64_t>& selected, Gating gating,
                  const Tensor& log_tau);

// Full routing pass. With frozen == true the outcome is numerically
// identical but W, E and log_tau are taken as constants, so no gradient
// accumulates into them while the path into H stays differentiable.
RoutingOutcome route(const Tensor& H, const RouterConfig& cfg, const ExpertEmbeddings& params,
                     bool frozen = false);

}  // namespace xmoe
