// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "testing_util.hpp"
#include "xmoe/analysis.hpp"
#include "xmoe/data.hpp"

using namespace xmoe;

namespace {

ModelConfig analysis_model(RouterVariant variant, int64_t n_experts, int64_t d) {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.hidden = d;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_ff = 2 * d;
    cfg.max_seq_len = 16;
    cfg.smoe_position = 1;
    cfg.num_expert_sublayers = 1;
    cfg.router.variant = variant;
    cfg.router.num_experts = n_experts;
    return cfg;
}

std::vector<int64_t> random_tokens(int64_t count, int64_t vocab, uint64_t seed) {
    Rng rng(seed);
    std::vector<int64_t> out(count);
    for (auto& t : out) t = kFirstContentId + rng.next_below(vocab - kFirstContentId);
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("analysis");

TEST_CASE("covariances: degenerate and oracle cases") {
    // two classes, one point each: no within-class scatter
    LabeledPoints lp;
    lp.points = Tensor::from({2, 2}, {1, 2, -3, 4});
    lp.labels = {0, 1};
    Covariances cov = covariances(lp);
    for (double v : cov.sigma_w.values()) CHECK(v == 0.0);

    // all points identical: both covariances vanish
    LabeledPoints same;
    same.points = Tensor::from({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
    same.labels = {0, 0, 1, 1};
    Covariances cs = covariances(same);
    for (double v : cs.sigma_w.values()) CHECK(v == 0.0);
    for (double v : cs.sigma_b.values()) CHECK(v == 0.0);

    // random 3-class instance vs an independent double-loop evaluation
    Rng rng(600);
    const int64_t M = 30, d = 2;
    LabeledPoints r;
    r.points = Tensor::randn({M, d}, rng);
    for (int64_t i = 0; i < M; ++i) r.labels.push_back(rng.next_below(3));
    Covariances cr = covariances(r);

    std::vector<double> mu(3 * d, 0.0), g(d, 0.0);
    std::vector<int64_t> cnt(3, 0);
    for (int64_t i = 0; i < M; ++i) {
        ++cnt[r.labels[i]];
        for (int64_t j = 0; j < d; ++j) {
            mu[r.labels[i] * d + j] += r.points.at({i, j});
            g[j] += r.points.at({i, j});
        }
    }
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t j = 0; j < d; ++j) mu[c * d + j] /= cnt[c];
    }
    for (int64_t j = 0; j < d; ++j) g[j] /= M;
    std::vector<double> sw(d * d, 0.0), sb(d * d, 0.0);
    for (int64_t i = 0; i < M; ++i) {
        for (int64_t p = 0; p < d; ++p) {
            for (int64_t q = 0; q < d; ++q) {
                sw[p * d + q] += (r.points.at({i, p}) - mu[r.labels[i] * d + p]) *
                                 (r.points.at({i, q}) - mu[r.labels[i] * d + q]) / M;
            }
        }
    }
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t p = 0; p < d; ++p) {
            for (int64_t q = 0; q < d; ++q) {
                sb[p * d + q] += cnt[c] * (mu[c * d + p] - g[p]) * (mu[c * d + q] - g[q]) / M;
            }
        }
    }
    CHECK(testing::linf(cr.sigma_w.values(), sw) < 1e-12);
    CHECK(testing::linf(cr.sigma_b.values(), sb) < 1e-12);

    LabeledPoints single;
    single.points = Tensor::from({2, 2}, {1, 2, 3, 4});
    single.labels = {0, 0};
    CHECK_THROWS_AS(covariances(single), Error);
}

TEST_CASE("pseudo_inverse: analytic cases and Moore-Penrose conditions") {
    Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
    CHECK(testing::linf(pseudo_inverse(I).values(), {1, 0, 0, 1}) < 1e-12);

    Tensor d20 = Tensor::from({2, 2}, {2, 0, 0, 0});
    CHECK(testing::linf(pseudo_inverse(d20).values(), {0.5, 0, 0, 0}) < 1e-12);

    // random PSD with deliberate rank deficiency
    Rng rng(601);
    const int64_t n = 6, r = 4;
    Tensor B = Tensor::randn({n, r}, rng);
    Tensor S = matmul(B, transpose(B));
    Tensor P = pseudo_inverse(S);

    auto mm = [&](const Tensor& a, const Tensor& b) { return matmul(a, b); };
    Tensor SPS = mm(mm(S, P), S);
    Tensor PSP = mm(mm(P, S), P);
    Tensor SP = mm(S, P);
    Tensor PS = mm(P, S);
    CHECK(testing::linf(SPS.values(), S.values()) < 1e-8);
    CHECK(testing::linf(PSP.values(), P.values()) < 1e-8);
    CHECK(testing::linf(SP.values(), transpose(SP).values()) < 1e-8);
    CHECK(testing::linf(PS.values(), transpose(PS).values()) < 1e-8);

    Tensor asym = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK_THROWS_AS(pseudo_inverse(asym), Error);
}

TEST_CASE("rc metric: zero scatter, closed form, rotation invariance") {
    // points sitting exactly on their class means
    LabeledPoints flat;
    flat.points = Tensor::from({4, 2}, {1, 0, 1, 0, -1, 0, -1, 0});
    flat.labels = {0, 0, 1, 1};
    CHECK(rc_metric(flat).rc == 0.0);

    // two classes at (+-a, 0) with isotropic scatter sigma: RC = sigma^2/(2 a^2)
    const double a = 1.5, sigma = 0.3;
    auto build = [&](double theta) {
        LabeledPoints lp;
        std::vector<double> pts;
        const double offsets[4][2] = {{sigma, 0}, {-sigma, 0}, {0, sigma}, {0, -sigma}};
        for (int cls = 0; cls < 2; ++cls) {
            const double cx = cls == 0 ? a : -a;
            for (const auto& off : offsets) {
                const double x = cx + off[0], y = off[1];
                pts.push_back(std::cos(theta) * x - std::sin(theta) * y);
                pts.push_back(std::sin(theta) * x + std::cos(theta) * y);
                lp.labels.push_back(cls);
            }
        }
        lp.points = Tensor::from({8, 2}, std::move(pts));
        return lp;
    };
    CollapseReport rep = rc_metric(build(0.0));
    CHECK(std::abs(rep.rc - sigma * sigma / (2 * a * a)) < 1e-8);
    CHECK(rep.rank_sigma_b == 1);

    CollapseReport rot = rc_metric(build(0.7));
    CHECK(std::abs(rot.rc - rep.rc) < 1e-8);

    // identical class means but nonzero scatter: degenerate between-class
    LabeledPoints degen;
    degen.points = Tensor::from({4, 2}, {1, 0, -1, 0, 0, 1, 0, -1});
    degen.labels = {0, 0, 1, 1};
    CollapseReport dr = rc_metric(degen);
    CHECK(dr.degenerate_sigma_b);
    CHECK(dr.rc == 0.0);
}

TEST_CASE("rf ratio: identity, permutation oracle, bounds") {
    ModelConfig cfg = analysis_model(RouterVariant::baseline, 4, 8);
    Model a = Model::init(cfg, 70);
    auto tokens = random_tokens(8 * 16, cfg.vocab_size, 71);

    CHECK(rf_ratio(a, a, tokens, 8, 16) == 0.0);

    // permuting expert embedding rows relabels experts; the oracle counts
    // tokens whose selection moved under the permutation
    Model b = Model::init(cfg, 70);
    const std::vector<int64_t> perm{2, 0, 3, 1};
    {
        const auto& src = a.smoe.router.E.values();
        auto& dst = b.smoe.router.E.data();
        const int64_t d = cfg.hidden;
        for (int64_t i = 0; i < 4; ++i) {
            for (int64_t j = 0; j < d; ++j) dst[i * d + j] = src[perm[i] * d + j];
        }
    }
    NoGradGuard ng;
    EncodeResult enc = encode(tokens, 8, 16, a);
    int64_t moved = 0;
    std::vector<int64_t> inverse(4);
    for (int64_t i = 0; i < 4; ++i) inverse[perm[i]] = i;
    for (int64_t sel : enc.outcome.selected) moved += inverse[sel] != sel ? 1 : 0;

    const double ratio = rf_ratio(a, b, tokens, 8, 16);
    CHECK(ratio == doctest::Approx(double(moved) / double(enc.outcome.selected.size())));
    CHECK(ratio >= 0.0);
    CHECK(ratio <= 1.0);

    Model other = Model::init(analysis_model(RouterVariant::baseline, 2, 8), 70);
    CHECK_THROWS_AS(rf_ratio(a, other, tokens, 8, 16), Error);
}

TEST_CASE("inter-run consistency") {
    std::vector<double> base{10, 20, 5, 65};

    // twelve identical nonconstant loads: IC is exactly one
    std::vector<std::vector<double>> same(12, base);
    ConsistencyReport rep = inter_run_consistency(same);
    CHECK(rep.ic == 1.0);
    CHECK(rep.ic_offdiag == 1.0);

    // positive affine transforms correlate perfectly
    std::vector<double> affine(4);
    for (int i = 0; i < 4; ++i) affine[i] = 3.0 * base[i] + 7.0;
    ConsistencyReport ar = inter_run_consistency({base, affine});
    CHECK(std::abs(ar.ic - 1.0) <= 1e-12);

    // exactly anti-correlated pair: (1 + 1 - 1 - 1) / 4 = 0
    std::vector<double> anti(4);
    for (int i = 0; i < 4; ++i) anti[i] = -base[i];
    ConsistencyReport nr = inter_run_consistency({base, anti});
    CHECK(std::abs(nr.ic - 0.0) <= 1e-12);
    CHECK(std::abs(nr.ic_offdiag - (-1.0)) <= 1e-12);

    std::vector<double> flat{3, 3, 3, 3};
    CHECK_THROWS_WITH_AS(
        inter_run_consistency({base, flat}),
        "inter_run_consistency: undefined correlation, load vector of run 1 is constant", Error);
    CHECK_THROWS_AS(inter_run_consistency({base}), Error);
}

TEST_CASE("jacobian verification harness") {
    JacobianCheckConfig cfg;
    cfg.hidden = 6;
    cfg.num_experts = 3;
    cfg.trials = 20;
    cfg.seed = 2024;
    JacobianReport rep = verify_jacobian(cfg);
    CHECK(rep.pass);
    CHECK(rep.trials.size() == 20);
    for (const JacobianTrial& t : rep.trials) {
        CHECK(t.max_abs_err < 1e-5);
        CHECK(t.margin >= cfg.sample_margin);
    }
}

TEST_CASE("span residual: baseline components live in the expert span") {
    for (int64_t N : {2, 4}) {
        ModelConfig cfg = analysis_model(RouterVariant::baseline, N, 16);
        Model m = Model::init(cfg, 73);
        auto tokens = random_tokens(8 * 16, cfg.vocab_size, 74);
        SpanReport rep = span_residual(m, tokens, 8, 16);
        CHECK_FALSE(rep.extension);
        CHECK(rep.tokens_used > 0);
        CHECK(rep.max_residual < 1e-10);
        CHECK(rep.rank <= N);
        CHECK(rep.rank_bound == N);
    }
}

TEST_CASE("span residual: single expert components vanish") {
    ModelConfig cfg = analysis_model(RouterVariant::baseline, 1, 8);
    Model m = Model::init(cfg, 75);
    auto tokens = random_tokens(4 * 16, cfg.vocab_size, 76);
    SpanReport rep = span_residual(m, tokens, 4, 16);
    CHECK(rep.tokens_used == 0);
    CHECK(rep.tokens_skipped == 4 * 16);
}

TEST_CASE("span residual: projected variant stays inside col(W)") {
    ModelConfig cfg = analysis_model(RouterVariant::hypersphere, 8, 16);
    Model m = Model::init(cfg, 77);
    auto tokens = random_tokens(8 * 16, cfg.vocab_size, 78);
    SpanReport rep = span_residual(m, tokens, 8, 16);
    CHECK(rep.extension);
    CHECK(rep.tokens_used > 0);
    CHECK(rep.max_residual < 1e-10);
    CHECK(rep.rank <= rep.rank_bound);
    CHECK(rep.rank_bound == 4);  // d_e = N/2
}

TEST_CASE("embedding export round trip") {
    ModelConfig cfg = analysis_model(RouterVariant::hypersphere, 4, 8);
    Model m = Model::init(cfg, 79);
    auto tokens = random_tokens(4 * 16, cfg.vocab_size, 80);

    const std::string path = "export_test.csv";
    const int64_t rows = export_embeddings(m, tokens, 4, 16, path);
    CHECK(rows == 4 * 16);

    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "token_id,expert_id,c0,c1");

    // re-import: rows are unit norm and re-scoring by cosine against the
    // normalized expert embeddings reproduces the assignment
    const auto& E = m.smoe.router.E.values();
    const int64_t de = m.smoe.router.E.dim(1);
    std::string line;
    int64_t parsed = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');
        std::getline(ls, cell, ',');
        const int64_t expert = std::stoll(cell);
        std::vector<double> vec;
        while (std::getline(ls, cell, ',')) vec.push_back(std::stod(cell));
        REQUIRE(vec.size() == size_t(de));
        CHECK(std::abs(testing::l2norm(vec) - 1.0) < 1e-9);

        int64_t best = 0;
        double best_score = -2.0;
        for (int64_t e = 0; e < 4; ++e) {
            double dot = 0.0, nrm = 0.0;
            for (int64_t j = 0; j < de; ++j) {
                dot += vec[j] * E[e * de + j];
                nrm += E[e * de + j] * E[e * de + j];
            }
            const double score = dot / std::sqrt(nrm);
            if (score > best_score) {
                best_score = score;
                best = e;
            }
        }
        CHECK(best == expert);
        ++parsed;
    }
    CHECK(parsed == rows);
    std::remove(path.c_str());
}

TEST_SUITE_END();
