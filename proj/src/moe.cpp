// SPDX-License-Identifier: Apache-2.0
#include "xmoe/moe.hpp"

#include <cmath>
#include <limits>

namespace xmoe {

std::string to_string(Activation a) {
    return a == Activation::gelu ? "gelu" : "relu";
}

Activation activation_from(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw Error::config("unknown activation '" + s + "' (gelu|relu)");
}

ExpertFFN ExpertFFN::init(int64_t d, int64_t d_ff, int64_t n_sublayers, Rng& rng) {
    ExpertFFN e;
    e.subs.reserve(n_sublayers);
    for (int64_t s = 0; s < n_sublayers; ++s) {
        Rng r1 = rng.child("w1", s);
        Rng r2 = rng.child("w2", s);
        Sublayer sub;
        sub.w1 = Tensor::randn({d, d_ff}, r1, 1.0 / std::sqrt(double(d))).set_requires_grad(true);
        sub.b1 = Tensor::zeros({d_ff}, true);
        sub.w2 = Tensor::randn({d_ff, d}, r2, 1.0 / std::sqrt(double(d_ff)))
                     .set_requires_grad(true);
        sub.b2 = Tensor::zeros({d}, true);
        e.subs.push_back(std::move(sub));
    }
    return e;
}

namespace {

Tensor apply_act(const Tensor& x, Activation act) {
    return act == Activation::gelu ? gelu(x) : relu(x);
}

double act_deriv(double z, Activation act) {
    if (act == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    const double th = std::tanh(kC * (z + kA * z * z * z));
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * z * z);
}

}  // namespace

Tensor ExpertFFN::forward(const Tensor& x, Activation act, bool frozen) const {
    Tensor h = x;
    for (const Sublayer& s : subs) {
        const Tensor w1 = frozen ? s.w1.detach() : s.w1;
        const Tensor b1 = frozen ? s.b1.detach() : s.b1;
        const Tensor w2 = frozen ? s.w2.detach() : s.w2;
        const Tensor b2 = frozen ? s.b2.detach() : s.b2;
        h = add_bias(matmul(apply_act(add_bias(matmul(h, w1), b1), act), w2), b2);
    }
    return h;
}

SMoELayer SMoELayer::init(const RouterConfig& cfg, int64_t d, int64_t d_ff,
                          int64_t n_sublayers, Activation act, Rng& rng) {
    SMoELayer layer;
    layer.cfg = cfg.resolved();
    layer.act = act;
    Rng router_rng = rng.child("router");
    layer.router = ExpertEmbeddings::init(layer.cfg, d, router_rng);
    layer.experts.reserve(layer.cfg.num_experts);
    for (int64_t e = 0; e < layer.cfg.num_experts; ++e) {
        Rng er = rng.child("expert", e);
        layer.experts.push_back(ExpertFFN::init(d, d_ff, n_sublayers, er));
    }
    return layer;
}

SMoEForward smoe_forward(const Tensor& H, const SMoELayer& layer, bool frozen) {
    if (H.rank() != 2) {
        throw Error::runtime("smoe_forward: H must be [T x d]");
    }
    SMoEForward out;
    out.outcome = route(H, layer.cfg, layer.router, frozen);

    const int64_t T = H.dim(0);
    const int64_t N = layer.cfg.num_experts;
    std::vector<std::vector<int64_t>> groups(N);
    for (int64_t t = 0; t < T; ++t) {
        groups[out.outcome.selected[t]].push_back(t);
    }

    // expert-index order keeps gradient accumulation deterministic
    Tensor combined = H;
    for (int64_t e = 0; e < N; ++e) {
        const auto& idx = groups[e];
        if (idx.empty()) continue;
        Tensor x = gather_rows(H, idx);
        Tensor y = layer.experts[e].forward(x, layer.act, frozen);
        Tensor g = gather_rows(out.outcome.gate, idx);
        combined = index_add_rows(combined, rows_scale(y, g), idx);
    }
    out.hidden = combined;
    return out;
}

namespace {

// Analytic expert Jacobian at h (standard convention J[out][in]) plus the
// expert output. Independent of the autodiff path: straight chain rule over
// the sublayer stack.
void expert_jacobian(const ExpertFFN& expert, const std::vector<double>& h, Activation act,
                     std::vector<double>& jac, std::vector<double>& out) {
    const int64_t d = static_cast<int64_t>(h.size());
    // J starts as identity, x is the running activation
    jac.assign(d * d, 0.0);
    for (int64_t i = 0; i < d; ++i) jac[i * d + i] = 1.0;
    std::vector<double> x = h;

    for (const auto& sub : expert.subs) {
        const int64_t f = sub.w1.dim(1);
        const auto& w1 = sub.w1.values();
        const auto& b1 = sub.b1.values();
        const auto& w2 = sub.w2.values();
        const auto& b2 = sub.b2.values();

        std::vector<double> z(f, 0.0);
        for (int64_t j = 0; j < f; ++j) z[j] = b1[j];
        for (int64_t i = 0; i < d; ++i) {
            const double xi = x[i];
            for (int64_t j = 0; j < f; ++j) z[j] += xi * w1[i * f + j];
        }
        std::vector<double> a(f), dz(f);
        for (int64_t j = 0; j < f; ++j) {
            dz[j] = act_deriv(z[j], act);
            if (act == Activation::gelu) {
                constexpr double kC = 0.7978845608028654;
                constexpr double kA = 0.044715;
                a[j] = 0.5 * z[j] * (1.0 + std::tanh(kC * (z[j] + kA * z[j] * z[j] * z[j])));
            } else {
                a[j] = z[j] > 0.0 ? z[j] : 0.0;
            }
        }
        std::vector<double> y(d, 0.0);
        for (int64_t j = 0; j < d; ++j) y[j] = b2[j];
        for (int64_t j = 0; j < f; ++j) {
            const double aj = a[j];
            for (int64_t k = 0; k < d; ++k) y[k] += aj * w2[j * d + k];
        }

        // J_sub[p][q] = sum_f w2[f][p] dz[f] w1[q][f]; accumulate J = J_sub * J
        std::vector<double> jsub(d * d, 0.0);
        for (int64_t p = 0; p < d; ++p) {
            for (int64_t j = 0; j < f; ++j) {
                const double c = w2[j * d + p] * dz[j];
                if (c == 0.0) continue;
                for (int64_t q = 0; q < d; ++q) {
                    jsub[p * d + q] += c * w1[q * f + j];
                }
            }
        }
        std::vector<double> jnew(d * d, 0.0);
        for (int64_t p = 0; p < d; ++p) {
            for (int64_t m = 0; m < d; ++m) {
                const double c = jsub[p * d + m];
                if (c == 0.0) continue;
                for (int64_t q = 0; q < d; ++q) {
                    jnew[p * d + q] += c * jac[m * d + q];
                }
            }
        }
        jac.swap(jnew);
        x.swap(y);
    }
    out = std::move(x);
}

struct SoftmaxScores {
    std::vector<double> s;  // raw scores
    std::vector<double> S;  // softmax(s)
    int64_t k = 0;
    double margin = 0.0;
};

SoftmaxScores baseline_softmax_scores(const Tensor& h, const SMoELayer& layer) {
    if (layer.cfg.variant != RouterVariant::baseline || layer.cfg.gating != Gating::softmax) {
        throw Error::runtime(
            "jacobian_analytic: requires the baseline variant with softmax gating");
    }
    if (h.rank() != 1) {
        throw Error::runtime("jacobian_analytic: h must be a rank-1 vector");
    }
    const int64_t d = h.dim(0);
    const int64_t N = layer.cfg.num_experts;
    if (layer.router.E.dim(1) != d) {
        throw Error::runtime("jacobian_analytic: h dim does not match expert embeddings");
    }
    SoftmaxScores r;
    r.s.assign(N, 0.0);
    const auto& E = layer.router.E.values();
    for (int64_t i = 0; i < N; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += h.values()[j] * E[i * d + j];
        r.s[i] = dot;
    }
    r.k = 0;
    for (int64_t i = 1; i < N; ++i) {
        if (r.s[i] > r.s[r.k]) r.k = i;
    }
    double second = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < N; ++i) {
        if (i != r.k) second = std::max(second, r.s[i]);
    }
    r.margin = N > 1 ? r.s[r.k] - second : std::numeric_limits<double>::infinity();

    double mx = r.s[r.k];
    double sum = 0.0;
    r.S.assign(N, 0.0);
    for (int64_t i = 0; i < N; ++i) {
        r.S[i] = std::exp(r.s[i] - mx);
        sum += r.S[i];
    }
    for (int64_t i = 0; i < N; ++i) r.S[i] /= sum;
    return r;
}

}  // namespace

JacobianParts jacobian_analytic(const Tensor& h, const SMoELayer& layer, double delta_margin) {
    const SoftmaxScores sc = baseline_softmax_scores(h, layer);
    if (sc.margin < delta_margin) {
        throw Error::check("jacobian_analytic: point lies in a non-differentiable neighborhood "
                           "(top-2 margin " +
                           std::to_string(sc.margin) + " < " + std::to_string(delta_margin) + ")");
    }
    const int64_t d = h.dim(0);
    const int64_t N = layer.cfg.num_experts;
    const double Sk = sc.S[sc.k];

    std::vector<double> jffn, hffn;
    expert_jacobian(layer.experts[sc.k], h.values(), layer.act, jffn, hffn);

    std::vector<double> j1(d * d, 0.0);
    for (int64_t p = 0; p < d; ++p) {
        for (int64_t q = 0; q < d; ++q) {
            j1[p * d + q] = (p == q ? 1.0 : 0.0) + Sk * jffn[p * d + q];
        }
    }

    const auto& E = layer.router.E.values();
    std::vector<double> j2(d * d, 0.0);
    for (int64_t j = 0; j < N; ++j) {
        const double coeff = Sk * ((j == sc.k ? 1.0 : 0.0) - sc.S[j]);
        if (coeff == 0.0) continue;
        for (int64_t p = 0; p < d; ++p) {
            const double hp = coeff * hffn[p];
            for (int64_t q = 0; q < d; ++q) {
                j2[p * d + q] += hp * E[j * d + q];
            }
        }
    }

    JacobianParts parts;
    parts.j1 = Tensor::from({d, d}, std::move(j1));
    parts.j2 = Tensor::from({d, d}, std::move(j2));
    parts.selected = sc.k;
    parts.margin = sc.margin;
    return parts;
}

Tensor routing_grad_component(const Tensor& h, const SMoELayer& layer, const Tensor& upstream,
                              double delta_margin) {
    if (upstream.rank() != 1 || upstream.dim(0) != h.dim(0)) {
        throw Error::runtime("routing_grad_component: upstream must match h");
    }
    const JacobianParts parts = jacobian_analytic(h, layer, delta_margin);
    const int64_t d = h.dim(0);
    std::vector<double> out(d, 0.0);
    const auto& j2 = parts.j2.values();
    for (int64_t p = 0; p < d; ++p) {
        const double up = upstream.values()[p];
        if (up == 0.0) continue;
        for (int64_t q = 0; q < d; ++q) {
            out[q] += j2[p * d + q] * up;
        }
    }
    return Tensor::from({d}, std::move(out));
}

}  // namespace xmoe
