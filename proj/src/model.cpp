// SPDX-License-Identifier: Apache-2.0
#include "xmoe/model.hpp"

#include <cmath>

#include "xmoe/data.hpp"

namespace xmoe {

void ModelConfig::validate() const {
    if (vocab_size < 3) throw Error::config("model: vocab_size must be >= 3");
    if (hidden < 1 || layers < 0 || heads < 1 || d_ff < 1 || max_seq_len < 1) {
        throw Error::config("model: dimensions must be positive");
    }
    if (hidden % heads != 0) {
        throw Error::config("model: hidden (" + std::to_string(hidden) +
                            ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
    if (smoe_position < 0 || smoe_position > layers) {
        throw Error::config("model: smoe_position must lie in [0, layers]");
    }
    if (num_expert_sublayers < 1) {
        throw Error::config("model: num_expert_sublayers must be >= 1");
    }
    if (layer_norm_eps <= 0.0) {
        throw Error::config("model: layer_norm_eps must be positive");
    }
}

namespace {

Tensor ones(int64_t n) { return Tensor::constant({n}, 1.0).set_requires_grad(true); }

Tensor linear_weight(int64_t in, int64_t out, Rng& rng) {
    return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(double(in))).set_requires_grad(true);
}

}  // namespace

Model Model::init(const ModelConfig& cfg_in, uint64_t seed) {
    ModelConfig cfg = cfg_in;
    cfg.router = cfg.router.resolved();
    cfg.validate();

    Model m;
    m.cfg = cfg;
    Rng root(seed);
    Rng emb = root.child("tok_emb");
    m.tok_emb = Tensor::randn({cfg.vocab_size, cfg.hidden}, emb, 0.02).set_requires_grad(true);
    Rng pos = root.child("pos_emb");
    m.pos_emb = Tensor::randn({cfg.max_seq_len, cfg.hidden}, pos, 0.02).set_requires_grad(true);

    const int64_t d = cfg.hidden;
    for (int64_t b = 0; b < cfg.layers; ++b) {
        Rng br = root.child("block", b);
        TransformerBlock blk;
        blk.ln1_g = ones(d);
        blk.ln1_b = Tensor::zeros({d}, true);
        Rng q = br.child("wq"), k = br.child("wk"), v = br.child("wv"), o = br.child("wo");
        blk.wq = linear_weight(d, d, q);
        blk.bq = Tensor::zeros({d}, true);
        blk.wk = linear_weight(d, d, k);
        blk.bk = Tensor::zeros({d}, true);
        blk.wv = linear_weight(d, d, v);
        blk.bv = Tensor::zeros({d}, true);
        blk.wo = linear_weight(d, d, o);
        blk.bo = Tensor::zeros({d}, true);
        blk.ln2_g = ones(d);
        blk.ln2_b = Tensor::zeros({d}, true);
        Rng f1 = br.child("w1"), f2 = br.child("w2");
        blk.w1 = linear_weight(d, cfg.d_ff, f1);
        blk.b1 = Tensor::zeros({cfg.d_ff}, true);
        blk.w2 = linear_weight(cfg.d_ff, d, f2);
        blk.b2 = Tensor::zeros({d}, true);
        m.blocks.push_back(std::move(blk));
    }

    Rng sr = root.child("smoe");
    m.smoe = SMoELayer::init(cfg.router, d, cfg.d_ff, cfg.num_expert_sublayers, cfg.activation,
                             sr);

    m.final_ln_g = ones(d);
    m.final_ln_b = Tensor::zeros({d}, true);
    return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        const TransformerBlock& blk = blocks[b];
        out.emplace_back(p + "ln1_g", blk.ln1_g);
        out.emplace_back(p + "ln1_b", blk.ln1_b);
        out.emplace_back(p + "wq", blk.wq);
        out.emplace_back(p + "bq", blk.bq);
        out.emplace_back(p + "wk", blk.wk);
        out.emplace_back(p + "bk", blk.bk);
        out.emplace_back(p + "wv", blk.wv);
        out.emplace_back(p + "bv", blk.bv);
        out.emplace_back(p + "wo", blk.wo);
        out.emplace_back(p + "bo", blk.bo);
        out.emplace_back(p + "ln2_g", blk.ln2_g);
        out.emplace_back(p + "ln2_b", blk.ln2_b);
        out.emplace_back(p + "w1", blk.w1);
        out.emplace_back(p + "b1", blk.b1);
        out.emplace_back(p + "w2", blk.w2);
        out.emplace_back(p + "b2", blk.b2);
    }
    for (const auto& [name, t] : routing_parameters()) {
        out.emplace_back(name, t);
    }
    out.emplace_back("final_ln_g", final_ln_g);
    out.emplace_back("final_ln_b", final_ln_b);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Model::routing_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("router.E", smoe.router.E);
    if (smoe.router.W.defined()) {
        out.emplace_back("router.W", smoe.router.W);
    }
    out.emplace_back("router.log_tau", smoe.router.log_tau);
    for (size_t e = 0; e < smoe.experts.size(); ++e) {
        for (size_t s = 0; s < smoe.experts[e].subs.size(); ++s) {
            const std::string p =
                "expert" + std::to_string(e) + ".sub" + std::to_string(s) + ".";
            const auto& sub = smoe.experts[e].subs[s];
            out.emplace_back(p + "w1", sub.w1);
            out.emplace_back(p + "b1", sub.b1);
            out.emplace_back(p + "w2", sub.w2);
            out.emplace_back(p + "b2", sub.b2);
        }
    }
    return out;
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
}

namespace {

Tensor attention(const Tensor& x, const TransformerBlock& blk, int64_t batch, int64_t seq_len,
                 int64_t heads, const std::vector<Tensor>& key_masks) {
    const int64_t d = x.dim(1);
    const int64_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));

    Tensor q = add_bias(matmul(x, blk.wq), blk.bq);
    Tensor k = add_bias(matmul(x, blk.wk), blk.bk);
    Tensor v = add_bias(matmul(x, blk.wv), blk.bv);

    std::vector<Tensor> seq_outs;
    seq_outs.reserve(batch);
    for (int64_t b = 0; b < batch; ++b) {
        Tensor qb = slice_rows(q, b * seq_len, seq_len);
        Tensor kb = slice_rows(k, b * seq_len, seq_len);
        Tensor vb = slice_rows(v, b * seq_len, seq_len);
        std::vector<Tensor> head_outs;
        head_outs.reserve(heads);
        for (int64_t h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(qb, h * dh, dh);
            Tensor kh = slice_cols(kb, h * dh, dh);
            Tensor vh = slice_cols(vb, h * dh, dh);
            Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
            if (key_masks[b].defined()) {
                scores = add_bias(scores, key_masks[b]);
            }
            head_outs.push_back(matmul(softmax(scores, 1), vh));
        }
        seq_outs.push_back(concat_cols(head_outs));
    }
    Tensor ctx = batch == 1 ? seq_outs[0] : concat_rows(seq_outs);
    return add_bias(matmul(ctx, blk.wo), blk.bo);
}

}  // namespace

EncodeResult encode(std::span<const int64_t> tokens, int64_t batch, int64_t seq_len,
                    const Model& m, const EncodeOptions& opt) {
    const ModelConfig& cfg = m.cfg;
    if (static_cast<int64_t>(tokens.size()) != batch * seq_len) {
        throw Error::runtime("encode: token count does not match batch x seq_len");
    }
    if (seq_len > cfg.max_seq_len) {
        throw Error::runtime("encode: sequence length " + std::to_string(seq_len) +
                             " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    for (int64_t t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw Error::runtime("encode: token id " + std::to_string(t) + " out of range");
        }
    }

    // additive key masks hide padding positions from attention
    std::vector<Tensor> key_masks(batch);
    for (int64_t b = 0; b < batch; ++b) {
        bool any_pad = false;
        std::vector<double> mask(seq_len, 0.0);
        for (int64_t t = 0; t < seq_len; ++t) {
            if (tokens[b * seq_len + t] == kPadId) {
                mask[t] = -1e9;
                any_pad = true;
            }
        }
        if (any_pad) key_masks[b] = Tensor::from({seq_len}, std::move(mask));
    }

    const bool use_dropout = opt.train && opt.dropout_rate > 0.0;
    auto maybe_dropout = [&](const Tensor& t, const char* site, int64_t index) {
        if (!use_dropout) return t;
        Rng r = opt.dropout_rng.child(site, index);
        return dropout(t, opt.dropout_rate, r);
    };

    Tensor x = embedding_lookup(m.tok_emb, tokens);
    x = add_rows_tiled(x, slice_rows(m.pos_emb, 0, seq_len));
    x = maybe_dropout(x, "emb", 0);

    EncodeResult result;
    bool smoe_ran = false;
    auto run_smoe = [&]() {
        result.pre_smoe = x;
        SMoEForward sf = smoe_forward(x, m.smoe, opt.frozen_routing);
        x = sf.hidden;  // the SMoE layer itself runs without dropout
        result.outcome = std::move(sf.outcome);
        smoe_ran = true;
    };

    for (int64_t b = 0; b < cfg.layers; ++b) {
        if (b == cfg.smoe_position) run_smoe();
        const TransformerBlock& blk = m.blocks[b];
        Tensor h = layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.layer_norm_eps);
        Tensor attn = attention(h, blk, batch, seq_len, cfg.heads, key_masks);
        x = add(x, maybe_dropout(attn, "attn", b));
        Tensor h2 = layer_norm(x, blk.ln2_g, blk.ln2_b, cfg.layer_norm_eps);
        Tensor up = add_bias(matmul(h2, blk.w1), blk.b1);
        Tensor act = cfg.activation == Activation::gelu ? gelu(up) : relu(up);
        Tensor down = add_bias(matmul(act, blk.w2), blk.b2);
        x = add(x, maybe_dropout(down, "ffn", b));
    }
    if (!smoe_ran) run_smoe();  // smoe_position == layers (or degenerate L == 0)

    result.hidden = layer_norm(x, m.final_ln_g, m.final_ln_b, cfg.layer_norm_eps);
    return result;
}

Tensor mlm_logits(const Tensor& hidden, const Model& m) {
    if (hidden.rank() != 2 || hidden.dim(1) != m.cfg.hidden) {
        throw Error::runtime("mlm_logits: hidden must be [rows x " +
                             std::to_string(m.cfg.hidden) + "]");
    }
    return matmul(hidden, transpose(m.tok_emb));
}

}  // namespace xmoe
