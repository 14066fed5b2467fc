// SPDX-License-Identifier: Apache-2.0
//
// Small pre-norm Transformer encoder with one SMoE layer inserted between
// two blocks, plus the weight-tied masked-token prediction head.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmoe/moe.hpp"
#include "xmoe/routing.hpp"
#include "xmoe/tensor.hpp"

namespace xmoe {

struct ModelConfig {
    int64_t vocab_size = 256;
    int64_t hidden = 64;
    int64_t layers = 4;
    int64_t heads = 4;
    int64_t d_ff = 256;
    int64_t max_seq_len = 64;
    int64_t smoe_position = 2;  // SMoE runs after this many blocks
    int64_t num_expert_sublayers = 3;
    Activation activation = Activation::gelu;
    double layer_norm_eps = 1e-5;
    RouterConfig router;

    void validate() const;
};

struct TransformerBlock {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

struct Model {
    ModelConfig cfg;  // router resolved
    Tensor tok_emb;   // [V x d], also the output projection (tied)
    Tensor pos_emb;   // [max_seq_len x d]
    std::vector<TransformerBlock> blocks;
    SMoELayer smoe;
    Tensor final_ln_g, final_ln_b;

    static Model init(const ModelConfig& cfg, uint64_t seed);

    // fixed, documented ordering; every learnable tensor appears exactly once
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    // the subset frozen during fine-tuning: router + expert networks
    std::vector<std::pair<std::string, Tensor>> routing_parameters() const;
    int64_t parameter_count() const;
};

struct EncodeOptions {
    bool train = false;          // enables dropout
    double dropout_rate = 0.0;   // backbone dropout; the SMoE layer stays dry
    Rng dropout_rng{0};
    bool frozen_routing = false;
};

struct EncodeResult {
    Tensor hidden;       // [B*T x d], post final layer norm
    RoutingOutcome outcome;
    Tensor pre_smoe;     // [B*T x d], the representations fed into routing
};

EncodeResult encode(std::span<const int64_t> tokens, int64_t batch, int64_t seq_len,
                    const Model& m, const EncodeOptions& opt = {});

// hidden x tok_emb^T
Tensor mlm_logits(const Tensor& hidden, const Model& m);

}  // namespace xmoe
