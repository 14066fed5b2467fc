// SPDX-License-Identifier: Apache-2.0
#include "xmoe/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace xmoe {

void TrainConfig::validate() const {
    if (steps < 0 || batch_size < 1) {
        throw Error::config("train: steps must be >= 0 and batch_size >= 1");
    }
    if (warmup_steps < 0 || warmup_steps > steps) {
        throw Error::config("train: warmup_steps must lie in [0, steps]");
    }
    if (schedule != "linear_decay") {
        throw Error::config("train: unknown schedule '" + schedule + "'");
    }
    if (lr_max < 0 || adam_eps <= 0 || weight_decay < 0 || alpha < 0 || grad_clip < 0) {
        throw Error::config("train: rates must be non-negative (adam_eps positive)");
    }
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
        throw Error::config("train: adam betas must lie in [0, 1)");
    }
    if (!(dropout_rate >= 0 && dropout_rate < 1)) {
        throw Error::config("train: dropout_rate must lie in [0, 1)");
    }
    if (!(mask_rate > 0 && mask_rate < 1)) {
        throw Error::config("train: mask_rate must lie in (0, 1)");
    }
    if (checkpoint_every < 1) {
        throw Error::config("train: checkpoint_every must be >= 1");
    }
}

uint64_t model_config_digest(const ModelConfig& cfg) {
    const RouterConfig r = cfg.router.resolved();
    std::ostringstream s;
    s << "V=" << cfg.vocab_size << ";d=" << cfg.hidden << ";L=" << cfg.layers
      << ";A=" << cfg.heads << ";ff=" << cfg.d_ff << ";T=" << cfg.max_seq_len
      << ";pos=" << cfg.smoe_position << ";subs=" << cfg.num_expert_sublayers
      << ";act=" << to_string(cfg.activation) << ";ln_eps=" << cfg.layer_norm_eps
      << ";variant=" << to_string(r.variant) << ";gating=" << to_string(r.gating)
      << ";N=" << r.num_experts << ";de=" << r.routing_dim << ";tau=" << r.tau_init
      << ";tau0=" << r.tau0 << ";eps=" << r.eps_norm << ";proj=" << r.dim_reduction
      << ";norm=" << r.l2_norm;
    return fnv1a64(s.str());
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw Error::runtime("lr_at: negative step");
    if (step >= cfg.steps) return 0.0;
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    return cfg.lr_max * static_cast<double>(cfg.steps - step) /
           static_cast<double>(cfg.steps - cfg.warmup_steps);
}

namespace {

std::vector<double>* find_or_create(std::vector<std::pair<std::string, std::vector<double>>>& v,
                                    const std::string& name, size_t n) {
    for (auto& [k, buf] : v) {
        if (k == name) {
            if (buf.size() != n) {
                throw Error::runtime("adam: moment size mismatch for '" + name + "'");
            }
            return &buf;
        }
    }
    v.emplace_back(name, std::vector<double>(n, 0.0));
    return &v.back().second;
}

}  // namespace

void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
               double lr, const TrainConfig& cfg) {
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (const auto& [name, param] : params) {
        Tensor p = param;
        const size_t n = p.values().size();
        std::vector<double>* m = find_or_create(state.m, name, n);
        std::vector<double>* v = find_or_create(state.v, name, n);
        const std::vector<double> grad =
            p.has_grad() ? p.grad() : std::vector<double>(n, 0.0);
        std::vector<double>& pv = p.data();
        for (size_t i = 0; i < n; ++i) {
            const double g = grad[i];
            (*m)[i] = cfg.adam_beta1 * (*m)[i] + (1.0 - cfg.adam_beta1) * g;
            (*v)[i] = cfg.adam_beta2 * (*v)[i] + (1.0 - cfg.adam_beta2) * g * g;
            const double mhat = (*m)[i] / bc1;
            const double vhat = (*v)[i] / bc2;
            pv[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                           cfg.weight_decay * pv[i]);
        }
    }
}

// ---- train log ----

void TrainLog::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error::runtime("TrainLog: cannot write '" + path + "'");
    out << "step,task_loss,balance_loss,total_loss,tau,lr";
    for (int64_t i = 0; i < num_experts; ++i) out << ",load_" << i;
    out << "\n";
    char buf[512];
    for (const StepRecord& r : records) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g",
                      static_cast<long long>(r.step), r.task_loss, r.balance_loss, r.total_loss,
                      r.tau, r.lr);
        out << buf;
        for (int64_t l : r.loads) out << "," << l;
        out << "\n";
    }
}

TrainLog TrainLog::read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error::config("TrainLog: cannot read '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw Error::runtime("TrainLog: empty file '" + path + "'");
    int64_t n_loads = 0;
    {
        std::istringstream hs(line);
        std::string col;
        std::vector<std::string> cols;
        while (std::getline(hs, col, ',')) cols.push_back(col);
        const std::vector<std::string> fixed{"step",       "task_loss", "balance_loss",
                                             "total_loss", "tau",       "lr"};
        if (cols.size() < fixed.size()) {
            throw Error::runtime("TrainLog: bad header in '" + path + "'");
        }
        for (size_t i = 0; i < fixed.size(); ++i) {
            if (cols[i] != fixed[i]) {
                throw Error::runtime("TrainLog: unexpected column '" + cols[i] + "' in '" +
                                     path + "'");
            }
        }
        n_loads = static_cast<int64_t>(cols.size() - fixed.size());
    }
    TrainLog log;
    log.num_experts = n_loads;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        StepRecord r;
        auto next = [&]() {
            if (!std::getline(ls, cell, ',')) {
                throw Error::runtime("TrainLog: truncated row in '" + path + "'");
            }
            return cell;
        };
        r.step = std::stoll(next());
        r.task_loss = std::stod(next());
        r.balance_loss = std::stod(next());
        r.total_loss = std::stod(next());
        r.tau = std::stod(next());
        r.lr = std::stod(next());
        for (int64_t i = 0; i < n_loads; ++i) r.loads.push_back(std::stoll(next()));
        log.records.push_back(std::move(r));
    }
    return log;
}

// ---- checkpoint wire format ----
// magic "XMOE" | u32 version | u64 step | u32 record count | records...
// record: u32 name_len | name | u8 dtype (0 f64, 1 u64) | u8 rank |
//         u64 dims[rank] | payload (little endian)

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<uint8_t>& out, double d) {
    put_u64(out, std::bit_cast<uint64_t>(d));
}

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) {
            throw Error::runtime("checkpoint: truncated file");
        }
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

void put_record_header(std::vector<uint8_t>& out, const std::string& name, uint8_t dtype,
                       const Shape& dims) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(dtype);
    out.push_back(static_cast<uint8_t>(dims.size()));
    for (int64_t d : dims) put_u64(out, static_cast<uint64_t>(d));
}

constexpr uint8_t kDtypeF64 = 0;
constexpr uint8_t kDtypeU64 = 1;
constexpr uint32_t kVersion = 1;

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& cp) {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'X', 'M', 'O', 'E'});
    put_u32(out, cp.version);
    put_u64(out, cp.step);

    const uint32_t n_records = static_cast<uint32_t>(
        cp.params.size() + cp.adam_m.size() + cp.adam_v.size() + 4);
    put_u32(out, n_records);

    for (const auto& [name, t] : cp.params) {
        put_record_header(out, "param/" + name, kDtypeF64, t.shape());
        for (double v : t.values()) put_f64(out, v);
    }
    for (const auto& [name, buf] : cp.adam_m) {
        put_record_header(out, "adam/m/" + name, kDtypeF64,
                          Shape{static_cast<int64_t>(buf.size())});
        for (double v : buf) put_f64(out, v);
    }
    for (const auto& [name, buf] : cp.adam_v) {
        put_record_header(out, "adam/v/" + name, kDtypeF64,
                          Shape{static_cast<int64_t>(buf.size())});
        for (double v : buf) put_f64(out, v);
    }
    auto put_meta = [&](const std::string& name, uint64_t v) {
        put_record_header(out, name, kDtypeU64, Shape{});
        put_u64(out, v);
    };
    put_meta("meta/adam_t", cp.adam_t);
    put_meta("meta/seed", cp.seed);
    put_meta("meta/model_digest", cp.model_digest);
    put_meta("meta/run_digest", cp.run_digest);
    return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& cp) {
    const std::vector<uint8_t> bytes = serialize_checkpoint(cp);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error::runtime("save_checkpoint: cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error::runtime("save_checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error::config("load_checkpoint: cannot read '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    Reader r{bytes};
    if (r.str(4) != "XMOE") {
        throw Error::runtime("load_checkpoint: bad magic in '" + path + "'");
    }
    Checkpoint cp;
    cp.version = r.u32();
    if (cp.version != kVersion) {
        throw Error::runtime("load_checkpoint: unsupported version " +
                             std::to_string(cp.version));
    }
    cp.step = r.u64();
    const uint32_t n_records = r.u32();
    for (uint32_t i = 0; i < n_records; ++i) {
        const uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        const uint8_t dtype = r.u8();
        const uint8_t rank = r.u8();
        Shape dims(rank);
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            dims[d] = static_cast<int64_t>(r.u64());
            numel *= dims[d];
        }
        if (dtype == kDtypeF64) {
            std::vector<double> vals(numel);
            for (int64_t j = 0; j < numel; ++j) vals[j] = r.f64();
            if (name.rfind("param/", 0) == 0) {
                cp.params.emplace_back(name.substr(6), Tensor::from(dims, std::move(vals)));
            } else if (name.rfind("adam/m/", 0) == 0) {
                cp.adam_m.emplace_back(name.substr(7), std::move(vals));
            } else if (name.rfind("adam/v/", 0) == 0) {
                cp.adam_v.emplace_back(name.substr(7), std::move(vals));
            } else {
                throw Error::runtime("load_checkpoint: unknown record '" + name + "'");
            }
        } else if (dtype == kDtypeU64) {
            if (numel != 1) {
                throw Error::runtime("load_checkpoint: meta record '" + name +
                                     "' must hold one value");
            }
            const uint64_t v = r.u64();
            if (name == "meta/adam_t") cp.adam_t = v;
            else if (name == "meta/seed") cp.seed = v;
            else if (name == "meta/model_digest") cp.model_digest = v;
            else if (name == "meta/run_digest") cp.run_digest = v;
            else throw Error::runtime("load_checkpoint: unknown meta record '" + name + "'");
        } else {
            throw Error::runtime("load_checkpoint: unknown dtype tag " + std::to_string(dtype));
        }
    }
    if (r.pos != bytes.size()) {
        throw Error::runtime("load_checkpoint: trailing bytes in '" + path + "'");
    }
    return cp;
}

void apply_checkpoint(Model& model, const Checkpoint& cp) {
    if (cp.model_digest != model_config_digest(model.cfg)) {
        throw Error::runtime("apply_checkpoint: model config digest mismatch");
    }
    std::unordered_map<std::string, Tensor> by_name;
    for (const auto& [name, t] : model.named_parameters()) by_name.emplace(name, t);
    if (by_name.size() != cp.params.size()) {
        throw Error::runtime("apply_checkpoint: parameter count mismatch");
    }
    for (const auto& [name, t] : cp.params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw Error::runtime("apply_checkpoint: unknown parameter '" + name + "'");
        }
        if (it->second.shape() != t.shape()) {
            throw Error::runtime("apply_checkpoint: shape mismatch for '" + name + "'");
        }
        it->second.data() = t.values();
    }
}

// ---- trainer ----

Trainer::Trainer(Model& model, const Corpus& corpus, const TrainConfig& cfg, uint64_t run_digest)
    : model_(model),
      corpus_(corpus),
      cfg_(cfg),
      run_digest_(run_digest),
      base_(cfg.seed) {
    cfg_.validate();
    if (corpus_.sequences.empty()) {
        throw Error::runtime("trainer: empty corpus");
    }
    if (corpus_.seq_len > model_.cfg.max_seq_len) {
        throw Error::runtime("trainer: corpus seq_len exceeds model max_seq_len");
    }
    if (corpus_.vocab_size > model_.cfg.vocab_size) {
        throw Error::runtime("trainer: corpus vocab exceeds model vocab");
    }
    model_digest_ = model_config_digest(model_.cfg);
    split_ = split_validation(static_cast<int64_t>(corpus_.sequences.size()), base_);

    const auto routing = model_.routing_parameters();
    auto is_routing = [&](const std::string& name) {
        for (const auto& [rn, rt] : routing) {
            if (rn == name) return true;
        }
        return false;
    };
    for (const auto& [name, t] : model_.named_parameters()) {
        if (cfg_.freeze_routing && is_routing(name)) {
            frozen_.emplace_back(name, t);
            frozen_snapshot_.push_back(t.values());
        } else if (t.requires_grad()) {
            trainable_.emplace_back(name, t);
        }
    }
}

void Trainer::check_frozen(int64_t s) const {
    for (size_t i = 0; i < frozen_.size(); ++i) {
        if (frozen_[i].second.values() != frozen_snapshot_[i]) {
            throw Error::runtime("finetune step " + std::to_string(s) + ": frozen tensor '" +
                                 frozen_[i].first + "' was mutated");
        }
    }
}

StepRecord Trainer::step(int64_t s) {
    const double lr = lr_at(s, cfg_);

    // draw batch sequence indices from the training split
    Rng br = base_.child("batch", static_cast<uint64_t>(s));
    const int64_t n_train = static_cast<int64_t>(split_.train.size());
    std::vector<int64_t> seqs(cfg_.batch_size);
    for (auto& idx : seqs) idx = split_.train[br.next_below(n_train)];

    Rng mr = base_.child("mask", static_cast<uint64_t>(s));
    MaskedBatch mb = mask_tokens(corpus_, seqs, mr, cfg_.mask_rate);

    EncodeOptions opt;
    opt.train = true;
    opt.dropout_rate = cfg_.dropout_rate;
    opt.dropout_rng = base_.child("dropout", static_cast<uint64_t>(s));
    opt.frozen_routing = cfg_.freeze_routing;

    StepRecord rec;
    try {
        EncodeResult enc = encode(mb.input_ids, mb.batch, mb.seq_len, model_, opt);
        Tensor task = cross_entropy(mlm_logits(enc.hidden, model_), mb.target_ids,
                                    mb.mask_flags);
        BalanceConfig bc;
        bc.alpha = cfg_.alpha;
        bc.tau0 = model_.cfg.router.tau0;
        LossBreakdown lb = combine_losses(task, enc.outcome.scores, enc.outcome.selected, bc);
        if (!std::isfinite(lb.total.value())) {
            throw Error::runtime("non-finite loss");
        }

        backward(lb.total);

        if (cfg_.grad_clip > 0.0) {
            double sq = 0.0;
            for (auto& [name, p] : trainable_) {
                if (!p.has_grad()) continue;
                for (double g : p.grad()) sq += g * g;
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) {
                const double scale = cfg_.grad_clip / norm;
                for (auto& [name, p] : trainable_) {
                    if (!p.has_grad()) continue;
                    for (double& g : p.mutable_grad()) g *= scale;
                }
            }
        }

        adam_step(trainable_, adam_, lr, cfg_);
        for (auto& [name, p] : trainable_) p.zero_grad();

        rec.step = s;
        rec.task_loss = lb.task_loss.value();
        rec.balance_loss = lb.balance_loss.value();
        rec.total_loss = lb.total.value();
        rec.tau = model_.smoe.router.tau();
        rec.lr = lr;
        rec.loads = lb.per_expert_load;
    } catch (const Error& e) {
        throw Error(e.kind(), "training step " + std::to_string(s) + " aborted: " + e.what());
    }

    if (cfg_.freeze_routing) check_frozen(s);
    return rec;
}

TrainLog Trainer::run(int64_t from_step, int64_t to_step, const CheckpointSink& sink) {
    TrainLog log;
    log.num_experts = model_.cfg.router.resolved().num_experts;
    for (int64_t s = from_step + 1; s <= to_step; ++s) {
        log.records.push_back(step(s));
        if (sink && (s % cfg_.checkpoint_every == 0 || s == to_step)) {
            sink(make_checkpoint(s));
        }
    }
    return log;
}

Checkpoint Trainer::make_checkpoint(int64_t step) const {
    Checkpoint cp;
    cp.step = static_cast<uint64_t>(step);
    cp.seed = cfg_.seed;
    cp.model_digest = model_digest_;
    cp.run_digest = run_digest_;
    cp.adam_t = static_cast<uint64_t>(adam_.t);
    for (const auto& [name, t] : model_.named_parameters()) {
        cp.params.emplace_back(name, t.detach());
    }
    cp.adam_m = adam_.m;
    cp.adam_v = adam_.v;
    return cp;
}

void Trainer::restore(const Checkpoint& cp) {
    if (cp.model_digest != model_digest_) {
        throw Error::runtime("restore: checkpoint model digest mismatch");
    }
    std::unordered_map<std::string, Tensor> by_name;
    for (const auto& [name, t] : model_.named_parameters()) by_name.emplace(name, t);
    if (by_name.size() != cp.params.size()) {
        throw Error::runtime("restore: parameter count mismatch");
    }
    for (const auto& [name, t] : cp.params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw Error::runtime("restore: unknown parameter '" + name + "'");
        }
        if (it->second.shape() != t.shape()) {
            throw Error::runtime("restore: shape mismatch for '" + name + "'");
        }
        it->second.data() = t.values();
    }
    adam_.m = cp.adam_m;
    adam_.v = cp.adam_v;
    adam_.t = static_cast<int64_t>(cp.adam_t);
    for (size_t i = 0; i < frozen_.size(); ++i) {
        frozen_snapshot_[i] = frozen_[i].second.values();
    }
}

double Trainer::eval_task_loss(std::span<const int64_t> seq_indices) const {
    if (seq_indices.empty()) {
        throw Error::runtime("eval_task_loss: no sequences");
    }
    NoGradGuard ng;
    double total = 0.0;
    int64_t masked = 0;
    for (size_t off = 0; off < seq_indices.size(); off += cfg_.batch_size) {
        const size_t n = std::min<size_t>(cfg_.batch_size, seq_indices.size() - off);
        std::vector<int64_t> chunk(seq_indices.begin() + off, seq_indices.begin() + off + n);
        Rng mr = base_.child("eval_mask");  // fixed masks: evals are comparable
        MaskedBatch mb = mask_tokens(corpus_, chunk, mr, cfg_.mask_rate);
        EncodeOptions opt;  // inference mode: no dropout
        EncodeResult enc = encode(mb.input_ids, mb.batch, mb.seq_len, model_, opt);
        Tensor task = cross_entropy(mlm_logits(enc.hidden, model_), mb.target_ids,
                                    mb.mask_flags);
        int64_t m = 0;
        for (uint8_t f : mb.mask_flags) m += f;
        total += task.value() * static_cast<double>(m);
        masked += m;
    }
    return total / static_cast<double>(masked);
}

TrainLog pretrain(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  const CheckpointSink& sink) {
    TrainConfig c = cfg;
    c.freeze_routing = false;
    Trainer trainer(model, corpus, c);
    return trainer.run(0, c.steps, sink);
}

TrainLog finetune_frozen(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                         const CheckpointSink& sink) {
    TrainConfig c = cfg;
    c.freeze_routing = true;
    Trainer trainer(model, corpus, c);
    return trainer.run(0, c.steps, sink);
}

}  // namespace xmoe
