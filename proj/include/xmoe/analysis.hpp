// SPDX-License-Identifier: Apache-2.0
//
// Quantitative routing diagnostics:
//   RC  = Tr(Sigma_W * pinv(Sigma_B)), the within/between-class collapse
//         metric over routed token representations (smaller = more
//         collapsed);
//   RF  = fraction of a fixed token set whose selected expert changed
//         between two parameter snapshots;
//   IC  = mean pairwise Pearson correlation of per-expert load vectors
//         across runs;
// plus numerical verifiers for the two-term Jacobian decomposition and the
// expert-embedding span property of the routing-path gradient.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xmoe/model.hpp"
#include "xmoe/tensor.hpp"

namespace xmoe {

enum class LabelSemantics { assigned_expert, latent_cluster };
std::string to_string(LabelSemantics s);
LabelSemantics label_semantics_from(const std::string& s);

struct LabeledPoints {
    Tensor points;                  // [M x d]
    std::vector<int64_t> labels;    // class id per point, 0-based
    LabelSemantics semantics = LabelSemantics::assigned_expert;
};

struct Covariances {
    Tensor sigma_w;  // within-class
    Tensor sigma_b;  // between-class
};
Covariances covariances(const LabeledPoints& lp);

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
struct SymEig {
    std::vector<double> values;  // unordered
    Tensor vectors;              // columns are eigenvectors
};
SymEig jacobi_eigh(const Tensor& S);

// Moore-Penrose pseudo-inverse of a symmetric PSD matrix; eigenvalues at or
// below tol * lambda_max are treated as zero.
Tensor pseudo_inverse(const Tensor& S, double tol = 1e-10);

struct CollapseReport {
    double rc = 0.0;
    int64_t rank_sigma_b = 0;
    std::vector<int64_t> per_class_counts;
    bool degenerate_sigma_b = false;  // all class means equal: RC fixed to 0
};
CollapseReport rc_metric(const LabeledPoints& lp, double tol = 1e-10);

// Routing-fluctuation ratio between two parameter snapshots of the same
// architecture, evaluated in inference mode on a fixed token set.
double rf_ratio(const Model& a, const Model& b, std::span<const int64_t> tokens, int64_t batch,
                int64_t seq_len);

struct ConsistencyReport {
    std::vector<std::vector<double>> pcc;  // [m x m], diagonal included
    double ic = 0.0;          // mean over all m^2 entries
    double ic_offdiag = 0.0;  // mean excluding the diagonal (m >= 2)
};
ConsistencyReport inter_run_consistency(const std::vector<std::vector<double>>& loads);

struct JacobianCheckConfig {
    int64_t hidden = 6;
    int64_t num_experts = 3;
    int64_t d_ff = 0;  // 0 -> 4 * hidden
    int64_t sublayers = 3;
    int64_t trials = 20;
    double tolerance = 1e-5;
    double fd_step = 1e-5;
    double sample_margin = 1e-3;  // fd_step must stay well below this
    uint64_t seed = 1;
};

struct JacobianTrial {
    int64_t trial = 0;
    double margin = 0.0;
    double max_abs_err = 0.0;
};

struct JacobianReport {
    std::vector<JacobianTrial> trials;
    double tolerance = 0.0;
    bool pass = false;
};

// Samples off-boundary points for a random baseline+softmax layer and
// compares J1 + J2 against the finite-difference Jacobian of the forward
// map; boundary samples are rejected and redrawn.
JacobianReport verify_jacobian(const JacobianCheckConfig& cfg);

struct SpanReport {
    double max_residual = 0.0;   // max over tokens of ||residual|| / ||component||
    int64_t rank = 0;            // numerical rank of the stacked components
    int64_t rank_bound = 0;      // N for baseline, d_e for the projected variant
    int64_t tokens_used = 0;
    int64_t tokens_skipped = 0;  // zero-gradient-component tokens
    bool extension = false;      // projected (hypersphere) basis, not the
                                 // setting the decomposition is derived in
};

// Projects per-token routing-path gradient components onto the expert
// embedding span (baseline) or the projection column space (hypersphere).
SpanReport span_residual(const Model& model, std::span<const int64_t> tokens, int64_t batch,
                         int64_t seq_len, uint64_t seed = 1);

// CSV rows: token_id, expert_id, then the routed representation (pre-SMoE
// hidden state for the baseline router, normalized projection otherwise).
int64_t export_embeddings(const Model& model, std::span<const int64_t> tokens, int64_t batch,
                          int64_t seq_len, const std::string& path);

}  // namespace xmoe
