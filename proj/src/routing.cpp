// SPDX-License-Identifier: Apache-2.0
#include "xmoe/routing.hpp"

#include <cmath>

namespace xmoe {

std::string to_string(RouterVariant v) {
    return v == RouterVariant::baseline ? "baseline" : "hypersphere";
}

std::string to_string(Gating g) {
    return g == Gating::softmax ? "softmax" : "sigmoid";
}

RouterVariant router_variant_from(const std::string& s) {
    if (s == "baseline") return RouterVariant::baseline;
    if (s == "hypersphere") return RouterVariant::hypersphere;
    throw Error::config("unknown router variant '" + s + "' (baseline|hypersphere)");
}

Gating gating_from(const std::string& s) {
    if (s == "softmax") return Gating::softmax;
    if (s == "sigmoid") return Gating::sigmoid;
    throw Error::config("unknown gating '" + s + "' (softmax|sigmoid)");
}

RouterConfig RouterConfig::resolved() const {
    RouterConfig c = *this;
    if (c.variant == RouterVariant::baseline) {
        c.dim_reduction = false;
        c.l2_norm = false;
        if (c.tau_init <= 0.0) c.tau_init = 1.0;
        if (c.tau0 <= 0.0) c.tau0 = 1.0;
    } else {
        const double gate_default = c.gating == Gating::softmax ? 0.3 : 0.07;
        if (c.tau_init <= 0.0) c.tau_init = gate_default;
        if (c.tau0 <= 0.0) c.tau0 = gate_default;
    }
    if (c.routing_dim <= 0) {
        c.routing_dim = std::max<int64_t>(1, c.num_experts / 2);
    }
    c.validate();
    return c;
}

void RouterConfig::validate() const {
    if (num_experts < 1) throw Error::config("router: num_experts must be >= 1");
    if (routing_dim < 1) throw Error::config("router: routing_dim must be >= 1");
    if (tau_init <= 0.0) throw Error::config("router: tau_init must be positive");
    if (tau0 <= 0.0) throw Error::config("router: tau0 must be positive");
    if (eps_norm <= 0.0) throw Error::config("router: eps_norm must be positive");
}

ExpertEmbeddings ExpertEmbeddings::init(const RouterConfig& cfg, int64_t model_dim, Rng& rng) {
    ExpertEmbeddings p;
    const int64_t de = cfg.embed_dim(model_dim);
    Rng er = rng.child("router.E");
    Tensor raw = Tensor::randn({cfg.num_experts, de}, er);
    p.E = l2_normalize(raw, 1, cfg.eps_norm).detach().set_requires_grad(true);
    if (cfg.dim_reduction) {
        Rng wr = rng.child("router.W");
        p.W = Tensor::randn({model_dim, cfg.routing_dim}, wr, 1.0 / std::sqrt(double(model_dim)))
                  .set_requires_grad(true);
    }
    p.log_tau = Tensor::from({}, {std::log(cfg.tau_init)});
    p.log_tau.set_requires_grad(cfg.learnable_tau());
    return p;
}

double ExpertEmbeddings::tau() const {
    return std::exp(log_tau.value());
}

Tensor score_baseline(const Tensor& H, const Tensor& E) {
    if (H.rank() != 2 || E.rank() != 2 || H.dim(1) != E.dim(1)) {
        throw Error::runtime("score_baseline: H " + shape_str(H.shape()) + " vs E " +
                             shape_str(E.shape()));
    }
    return matmul(H, transpose(E));
}

HypersphereScores score_hypersphere(const Tensor& H, const Tensor& W, const Tensor& E,
                                    double eps) {
    Tensor z = W.defined() ? matmul(H, W) : H;
    Tensor zn = l2_normalize(z, 1, eps);
    Tensor en = l2_normalize(E, 1, eps);
    if (zn.dim(1) != en.dim(1)) {
        throw Error::runtime("score_hypersphere: projected dim " + shape_str(zn.shape()) +
                             " vs E " + shape_str(E.shape()));
    }
    return {matmul(zn, transpose(en)), zn};
}

std::vector<int64_t> select_top1(const Tensor& scores) {
    return argmax_rows(scores);
}

Tensor gate_value(const Tensor& scores, const std::vector<int64_t>& selected, Gating gating,
                  const Tensor& log_tau) {
    Tensor scaled = scores;
    if (log_tau.defined()) {
        if (std::exp(log_tau.value()) <= 0.0) {
            throw Error::runtime("gate_value: non-positive temperature");
        }
        // s / tau == s * exp(-log_tau); keeps tau positive by construction
        Tensor inv_tau = xmoe::exp(scale(log_tau, -1.0));
        scaled = mul_scalar_t(scores, inv_tau);
    }
    if (gating == Gating::softmax) {
        return select_per_row(softmax(scaled, 1), selected);
    }
    return sigmoid(select_per_row(scaled, selected));
}

RoutingOutcome route(const Tensor& H, const RouterConfig& cfg, const ExpertEmbeddings& params,
                     bool frozen) {
    if (params.E.dim(0) != cfg.num_experts) {
        throw Error::runtime("route: config expects " + std::to_string(cfg.num_experts) +
                             " experts, params hold " + std::to_string(params.E.dim(0)));
    }
    // frozen mode evaluates identically but severs the parameter side of the
    // graph, so gradients keep flowing into H only
    const Tensor E = frozen ? params.E.detach() : params.E;
    const Tensor W = frozen && params.W.defined() ? params.W.detach() : params.W;
    const Tensor log_tau = frozen ? params.log_tau.detach() : params.log_tau;

    RoutingOutcome out;
    if (cfg.l2_norm) {
        HypersphereScores hs = score_hypersphere(H, cfg.dim_reduction ? W : Tensor(), E,
                                                 cfg.eps_norm);
        out.scores = hs.scores;
        out.projected = hs.projected;
    } else if (cfg.dim_reduction) {
        out.scores = score_baseline(matmul(H, W), E);
    } else {
        out.scores = score_baseline(H, E);
    }
    out.selected = select_top1(out.scores);
    out.gate = gate_value(out.scores, out.selected, cfg.gating,
                          cfg.learnable_tau() ? log_tau : Tensor());
    return out;
}

}  // namespace xmoe
