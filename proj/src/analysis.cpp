// SPDX-License-Identifier: Apache-2.0
#include "xmoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "xmoe/moe.hpp"
#include "xmoe/training.hpp"

namespace xmoe {

std::string to_string(LabelSemantics s) {
    return s == LabelSemantics::assigned_expert ? "assigned_expert" : "latent_cluster";
}

LabelSemantics label_semantics_from(const std::string& s) {
    if (s == "assigned_expert" || s == "expert") return LabelSemantics::assigned_expert;
    if (s == "latent_cluster" || s == "cluster") return LabelSemantics::latent_cluster;
    throw Error::config("unknown label semantics '" + s + "' (expert|cluster)");
}

Covariances covariances(const LabeledPoints& lp) {
    if (lp.points.rank() != 2) {
        throw Error::runtime("covariances: points must be [M x d]");
    }
    const int64_t M = lp.points.dim(0), d = lp.points.dim(1);
    if (M == 0) {
        throw Error::runtime("covariances: empty input");
    }
    if (static_cast<int64_t>(lp.labels.size()) != M) {
        throw Error::runtime("covariances: label count mismatch");
    }
    int64_t n_classes = 0;
    for (int64_t l : lp.labels) {
        if (l < 0) throw Error::runtime("covariances: negative label");
        n_classes = std::max(n_classes, l + 1);
    }
    std::vector<int64_t> counts(n_classes, 0);
    for (int64_t l : lp.labels) ++counts[l];
    int64_t nonempty = 0;
    for (int64_t c : counts) nonempty += c > 0 ? 1 : 0;
    if (nonempty < 2) {
        throw Error::runtime("covariances: need at least two nonempty classes");
    }

    const auto& x = lp.points.values();
    std::vector<double> mu(n_classes * d, 0.0), global(d, 0.0);
    for (int64_t i = 0; i < M; ++i) {
        const int64_t c = lp.labels[i];
        for (int64_t j = 0; j < d; ++j) {
            mu[c * d + j] += x[i * d + j];
            global[j] += x[i * d + j];
        }
    }
    for (int64_t c = 0; c < n_classes; ++c) {
        if (counts[c] == 0) continue;
        for (int64_t j = 0; j < d; ++j) mu[c * d + j] /= counts[c];
    }
    for (int64_t j = 0; j < d; ++j) global[j] /= M;

    std::vector<double> sw(d * d, 0.0), sb(d * d, 0.0);
    std::vector<double> diff(d);
    for (int64_t i = 0; i < M; ++i) {
        const int64_t c = lp.labels[i];
        for (int64_t j = 0; j < d; ++j) diff[j] = x[i * d + j] - mu[c * d + j];
        for (int64_t p = 0; p < d; ++p) {
            const double dp = diff[p];
            if (dp == 0.0) continue;
            for (int64_t q = 0; q < d; ++q) sw[p * d + q] += dp * diff[q];
        }
    }
    for (int64_t c = 0; c < n_classes; ++c) {
        if (counts[c] == 0) continue;
        for (int64_t j = 0; j < d; ++j) diff[j] = mu[c * d + j] - global[j];
        for (int64_t p = 0; p < d; ++p) {
            const double dp = static_cast<double>(counts[c]) * diff[p];
            if (dp == 0.0) continue;
            for (int64_t q = 0; q < d; ++q) sb[p * d + q] += dp * diff[q];
        }
    }
    for (double& v : sw) v /= M;
    for (double& v : sb) v /= M;
    return {Tensor::from({d, d}, std::move(sw)), Tensor::from({d, d}, std::move(sb))};
}

SymEig jacobi_eigh(const Tensor& S) {
    if (S.rank() != 2 || S.dim(0) != S.dim(1)) {
        throw Error::runtime("jacobi_eigh: square matrix required");
    }
    const int64_t n = S.dim(0);
    std::vector<double> a = S.values();
    std::vector<double> v(n * n, 0.0);
    for (int64_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

    double scale = 0.0;
    for (int64_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(a[i * n + i]));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) scale = std::max(scale, std::abs(a[i * n + j]));
    }
    const double stop = std::max(scale, 1.0) * 1e-15;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(a[p * n + q]));
        }
        if (off <= stop) break;
        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) <= stop * 1e-2) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double vkp = v[k * n + p], vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    SymEig out;
    out.values.resize(n);
    for (int64_t i = 0; i < n; ++i) out.values[i] = a[i * n + i];
    out.vectors = Tensor::from({n, n}, std::move(v));
    return out;
}

Tensor pseudo_inverse(const Tensor& S, double tol) {
    if (S.rank() != 2 || S.dim(0) != S.dim(1)) {
        throw Error::runtime("pseudo_inverse: square matrix required");
    }
    const int64_t n = S.dim(0);
    double asym = 0.0, scale = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            asym = std::max(asym, std::abs(S.at({i, j}) - S.at({j, i})));
            scale = std::max(scale, std::abs(S.at({i, j})));
        }
    }
    if (asym > 1e-10 * std::max(scale, 1.0)) {
        throw Error::runtime("pseudo_inverse: input is not symmetric");
    }
    SymEig eig = jacobi_eigh(S);
    double lmax = 0.0;
    for (double l : eig.values) lmax = std::max(lmax, std::abs(l));
    std::vector<double> inv_vals(n, 0.0);
    for (int64_t i = 0; i < n; ++i) {
        if (std::abs(eig.values[i]) > tol * lmax) {
            inv_vals[i] = 1.0 / eig.values[i];
        }
    }
    const auto& V = eig.vectors.values();
    std::vector<double> out(n * n, 0.0);
    for (int64_t k = 0; k < n; ++k) {
        if (inv_vals[k] == 0.0) continue;
        for (int64_t i = 0; i < n; ++i) {
            const double vik = V[i * n + k] * inv_vals[k];
            if (vik == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) {
                out[i * n + j] += vik * V[j * n + k];
            }
        }
    }
    return Tensor::from({n, n}, std::move(out));
}

CollapseReport rc_metric(const LabeledPoints& lp, double tol) {
    Covariances cov = covariances(lp);
    const int64_t d = cov.sigma_w.dim(0);

    CollapseReport rep;
    int64_t n_classes = 0;
    for (int64_t l : lp.labels) n_classes = std::max(n_classes, l + 1);
    rep.per_class_counts.assign(n_classes, 0);
    for (int64_t l : lp.labels) ++rep.per_class_counts[l];

    SymEig eig = jacobi_eigh(cov.sigma_b);
    double lmax = 0.0;
    for (double l : eig.values) lmax = std::max(lmax, std::abs(l));
    for (double l : eig.values) {
        rep.rank_sigma_b += std::abs(l) > tol * std::max(lmax, 0.0) && lmax > 0.0 ? 1 : 0;
    }
    if (rep.rank_sigma_b == 0) {
        rep.degenerate_sigma_b = true;  // identical class means
        rep.rc = 0.0;
        return rep;
    }
    Tensor pinv = pseudo_inverse(cov.sigma_b, tol);
    double trace = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            trace += cov.sigma_w.at({i, j}) * pinv.at({j, i});
        }
    }
    rep.rc = trace;
    return rep;
}

double rf_ratio(const Model& a, const Model& b, std::span<const int64_t> tokens, int64_t batch,
                int64_t seq_len) {
    if (model_config_digest(a.cfg) != model_config_digest(b.cfg)) {
        throw Error::runtime("rf_ratio: model configurations differ");
    }
    if (tokens.empty()) {
        throw Error::runtime("rf_ratio: empty token set");
    }
    NoGradGuard ng;
    EncodeResult ra = encode(tokens, batch, seq_len, a);
    EncodeResult rb = encode(tokens, batch, seq_len, b);
    int64_t changed = 0;
    for (size_t t = 0; t < ra.outcome.selected.size(); ++t) {
        changed += ra.outcome.selected[t] != rb.outcome.selected[t] ? 1 : 0;
    }
    return static_cast<double>(changed) / static_cast<double>(ra.outcome.selected.size());
}

ConsistencyReport inter_run_consistency(const std::vector<std::vector<double>>& loads) {
    const size_t m = loads.size();
    if (m < 2) {
        throw Error::runtime("inter_run_consistency: need at least two runs");
    }
    const size_t n = loads[0].size();
    for (size_t i = 0; i < m; ++i) {
        if (loads[i].size() != n) {
            throw Error::runtime("inter_run_consistency: load vector length mismatch at run " +
                                 std::to_string(i));
        }
        double mean = 0.0;
        for (double x : loads[i]) mean += x;
        mean /= n;
        double var = 0.0;
        for (double x : loads[i]) var += (x - mean) * (x - mean);
        if (var == 0.0) {
            throw Error::runtime("inter_run_consistency: undefined correlation, load vector of "
                                 "run " +
                                 std::to_string(i) + " is constant");
        }
    }

    auto pcc = [&](const std::vector<double>& x, const std::vector<double>& y) {
        double mx = 0.0, my = 0.0;
        for (size_t i = 0; i < n; ++i) {
            mx += x[i];
            my += y[i];
        }
        mx /= n;
        my /= n;
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (size_t i = 0; i < n; ++i) {
            sxy += (x[i] - mx) * (y[i] - my);
            sxx += (x[i] - mx) * (x[i] - mx);
            syy += (y[i] - my) * (y[i] - my);
        }
        return sxy / std::sqrt(sxx * syy);
    };

    ConsistencyReport rep;
    rep.pcc.assign(m, std::vector<double>(m, 1.0));
    double total = 0.0, offdiag = 0.0;
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < m; ++j) {
            const double r = i == j ? 1.0 : (j < i ? rep.pcc[j][i] : pcc(loads[i], loads[j]));
            rep.pcc[i][j] = r;
            total += r;
            if (i != j) offdiag += r;
        }
    }
    rep.ic = total / static_cast<double>(m * m);
    rep.ic_offdiag = m > 1 ? offdiag / static_cast<double>(m * (m - 1)) : 1.0;
    return rep;
}

JacobianReport verify_jacobian(const JacobianCheckConfig& cfg) {
    RouterConfig rc;
    rc.variant = RouterVariant::baseline;
    rc.gating = Gating::softmax;
    rc.num_experts = cfg.num_experts;
    Rng rng(cfg.seed);
    const int64_t d_ff = cfg.d_ff > 0 ? cfg.d_ff : 4 * cfg.hidden;
    Rng layer_rng = rng.child("layer");
    SMoELayer layer =
        SMoELayer::init(rc, cfg.hidden, d_ff, cfg.sublayers, Activation::gelu, layer_rng);

    JacobianReport rep;
    rep.tolerance = cfg.tolerance;
    Rng sample = rng.child("samples");
    int64_t draws = 0;
    const int64_t max_draws = cfg.trials * 1000;
    for (int64_t trial = 0; trial < cfg.trials; ++trial) {
        JacobianParts parts;
        Tensor h;
        for (;;) {
            if (++draws > max_draws) {
                throw Error::runtime("verify_jacobian: could not sample off-boundary points");
            }
            h = Tensor::randn({cfg.hidden}, sample);
            try {
                parts = jacobian_analytic(h, layer, cfg.sample_margin);
                break;
            } catch (const Error&) {
                continue;  // boundary sample, redraw
            }
        }
        NoGradGuard ng;
        double max_err = 0.0;
        for (int64_t q = 0; q < cfg.hidden; ++q) {
            std::vector<double> hp = h.values(), hm = h.values();
            hp[q] += cfg.fd_step;
            hm[q] -= cfg.fd_step;
            Tensor fp = smoe_forward(Tensor::from({1, cfg.hidden}, hp), layer).hidden;
            Tensor fm = smoe_forward(Tensor::from({1, cfg.hidden}, hm), layer).hidden;
            for (int64_t p = 0; p < cfg.hidden; ++p) {
                const double fd = (fp.values()[p] - fm.values()[p]) / (2.0 * cfg.fd_step);
                const double an = parts.j1.at({p, q}) + parts.j2.at({p, q});
                max_err = std::max(max_err, std::abs(fd - an));
            }
        }
        rep.trials.push_back({trial, parts.margin, max_err});
    }
    rep.pass = true;
    for (const JacobianTrial& t : rep.trials) {
        rep.pass = rep.pass && t.max_abs_err < cfg.tolerance;
    }
    return rep;
}

namespace {

// least-squares projection of y onto the row span of B [k x d]
std::vector<double> project_onto_rows(const Tensor& B, const std::vector<double>& y) {
    const int64_t k = B.dim(0), d = B.dim(1);
    std::vector<double> gram(k * k, 0.0);
    for (int64_t i = 0; i < k; ++i) {
        for (int64_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (int64_t c = 0; c < d; ++c) s += B.at({i, c}) * B.at({j, c});
            gram[i * k + j] = s;
        }
    }
    Tensor ginv = pseudo_inverse(Tensor::from({k, k}, std::move(gram)), 1e-12);
    std::vector<double> by(k, 0.0);
    for (int64_t i = 0; i < k; ++i) {
        for (int64_t c = 0; c < d; ++c) by[i] += B.at({i, c}) * y[c];
    }
    std::vector<double> coef(k, 0.0);
    for (int64_t i = 0; i < k; ++i) {
        for (int64_t j = 0; j < k; ++j) coef[i] += ginv.at({i, j}) * by[j];
    }
    std::vector<double> proj(d, 0.0);
    for (int64_t i = 0; i < k; ++i) {
        for (int64_t c = 0; c < d; ++c) proj[c] += coef[i] * B.at({i, c});
    }
    return proj;
}

double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// analytic routing-path gradient for the projected (hypersphere) router;
// lands in the column space of W by construction
std::vector<double> hypersphere_component(const Model& m, const std::vector<double>& h,
                                          const std::vector<double>& upstream) {
    const SMoELayer& layer = m.smoe;
    const RouterConfig& rc = layer.cfg;
    const int64_t d = static_cast<int64_t>(h.size());
    const int64_t de = layer.router.W.dim(1);
    const int64_t N = rc.num_experts;
    const auto& W = layer.router.W.values();
    const auto& E = layer.router.E.values();
    const double tau = layer.router.tau();
    const double eps = rc.eps_norm;

    std::vector<double> z(de, 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < de; ++j) z[j] += h[i] * W[i * de + j];
    }
    const double nz = vec_norm(z);
    const double denom = std::max(nz, eps);
    std::vector<double> zh(de);
    for (int64_t j = 0; j < de; ++j) zh[j] = z[j] / denom;

    std::vector<double> s(N, 0.0);
    for (int64_t i = 0; i < N; ++i) {
        double ne = 0.0;
        for (int64_t j = 0; j < de; ++j) ne += E[i * de + j] * E[i * de + j];
        const double ed = std::max(std::sqrt(ne), eps);
        for (int64_t j = 0; j < de; ++j) s[i] += zh[j] * E[i * de + j] / ed;
    }
    int64_t k = 0;
    for (int64_t i = 1; i < N; ++i) {
        if (s[i] > s[k]) k = i;
    }
    double mx = s[k] / tau, sum = 0.0;
    std::vector<double> S(N);
    for (int64_t i = 0; i < N; ++i) {
        S[i] = std::exp(s[i] / tau - mx);
        sum += S[i];
    }
    for (int64_t i = 0; i < N; ++i) S[i] /= sum;

    std::vector<double> hffn;
    {
        NoGradGuard ng;
        hffn = layer.experts[k].forward(Tensor::from({1, d}, h), layer.act).values();
    }
    double dot = 0.0;
    for (int64_t i = 0; i < d; ++i) dot += hffn[i] * upstream[i];

    // g = sum_j c_j (I - zh zh^T)/|z| e_j_hat, then component = W g
    std::vector<double> g(de, 0.0);
    for (int64_t j = 0; j < N; ++j) {
        const double c = S[k] * ((j == k ? 1.0 : 0.0) - S[j]) * dot / tau;
        if (c == 0.0) continue;
        double ne = 0.0;
        for (int64_t q = 0; q < de; ++q) ne += E[j * de + q] * E[j * de + q];
        const double ed = std::max(std::sqrt(ne), eps);
        for (int64_t q = 0; q < de; ++q) g[q] += c * E[j * de + q] / ed;
    }
    if (nz >= eps) {
        double zg = 0.0;
        for (int64_t q = 0; q < de; ++q) zg += zh[q] * g[q];
        for (int64_t q = 0; q < de; ++q) g[q] = (g[q] - zh[q] * zg) / nz;
    } else {
        for (int64_t q = 0; q < de; ++q) g[q] /= eps;
    }
    std::vector<double> comp(d, 0.0);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t q = 0; q < de; ++q) comp[i] += W[i * de + q] * g[q];
    }
    return comp;
}

}  // namespace

SpanReport span_residual(const Model& model, std::span<const int64_t> tokens, int64_t batch,
                         int64_t seq_len, uint64_t seed) {
    const RouterConfig& rc = model.smoe.cfg;
    const bool projected = rc.dim_reduction;
    if (!projected && (rc.l2_norm || rc.gating != Gating::softmax)) {
        throw Error::runtime(
            "span_residual: supported for the baseline router or the projected variant");
    }

    NoGradGuard ng;
    EncodeResult enc = encode(tokens, batch, seq_len, model);
    const int64_t T = enc.pre_smoe.dim(0);
    const int64_t d = enc.pre_smoe.dim(1);

    SpanReport rep;
    rep.extension = projected;
    rep.rank_bound = projected ? model.smoe.router.W.dim(1) : rc.num_experts;

    const Tensor basis = projected ? transpose(model.smoe.router.W) : model.smoe.router.E;

    Rng rng(seed);
    std::vector<std::vector<double>> components;
    for (int64_t t = 0; t < T; ++t) {
        std::vector<double> h(d), u(d);
        for (int64_t j = 0; j < d; ++j) h[j] = enc.pre_smoe.at({t, j});
        Rng ur = rng.child("upstream", static_cast<uint64_t>(t));
        for (double& x : u) x = ur.next_gauss();

        std::vector<double> comp;
        if (projected) {
            comp = hypersphere_component(model, h, u);
        } else {
            try {
                comp = routing_grad_component(Tensor::from({d}, h), model.smoe,
                                              Tensor::from({d}, u), 1e-9)
                           .values();
            } catch (const Error&) {
                ++rep.tokens_skipped;  // decision-boundary token
                continue;
            }
        }
        const double cn = vec_norm(comp);
        if (cn < 1e-14) {
            ++rep.tokens_skipped;
            continue;
        }
        const std::vector<double> proj = project_onto_rows(basis, comp);
        std::vector<double> resid(d);
        for (int64_t j = 0; j < d; ++j) resid[j] = comp[j] - proj[j];
        rep.max_residual = std::max(rep.max_residual, vec_norm(resid) / cn);
        components.push_back(std::move(comp));
        ++rep.tokens_used;
    }

    if (!components.empty()) {
        // numerical rank of the stacked components via eigenvalues of M^T M
        std::vector<double> gram(d * d, 0.0);
        for (const auto& c : components) {
            for (int64_t p = 0; p < d; ++p) {
                if (c[p] == 0.0) continue;
                for (int64_t q = 0; q < d; ++q) gram[p * d + q] += c[p] * c[q];
            }
        }
        SymEig eig = jacobi_eigh(Tensor::from({d, d}, std::move(gram)));
        double lmax = 0.0;
        for (double l : eig.values) lmax = std::max(lmax, std::abs(l));
        for (double l : eig.values) {
            rep.rank += lmax > 0.0 && std::abs(l) > 1e-10 * lmax ? 1 : 0;
        }
    }
    return rep;
}

int64_t export_embeddings(const Model& model, std::span<const int64_t> tokens, int64_t batch,
                          int64_t seq_len, const std::string& path) {
    NoGradGuard ng;
    EncodeResult enc = encode(tokens, batch, seq_len, model);
    const bool projected = enc.outcome.projected.defined();
    const Tensor& rep = projected ? enc.outcome.projected : enc.pre_smoe;
    const int64_t T = rep.dim(0), w = rep.dim(1);

    std::ofstream out(path);
    if (!out) throw Error::runtime("export_embeddings: cannot write '" + path + "'");
    out << "token_id,expert_id";
    for (int64_t j = 0; j < w; ++j) out << ",c" << j;
    out << "\n";
    char buf[64];
    for (int64_t t = 0; t < T; ++t) {
        out << tokens[t] << "," << enc.outcome.selected[t];
        for (int64_t j = 0; j < w; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.17g", rep.at({t, j}));
            out << buf;
        }
        out << "\n";
    }
    if (!out) throw Error::runtime("export_embeddings: write failed for '" + path + "'");
    return T;
}

}  // namespace xmoe
