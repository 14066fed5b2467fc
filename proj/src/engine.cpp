// SPDX-License-Identifier: Apache-2.0
#include "xmoe/engine.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace xmoe {

const char* const kEngineVersion = "0.1.0";

namespace {

std::string hex64(uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
    return buf;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw Error::runtime("cannot create directory '" + dir + "': " + ec.message());
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error::runtime("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error::runtime("write failed for '" + path + "'");
}

void write_run_json(const std::string& out_dir, const std::string& command,
                    const RunConfig& cfg, const std::vector<std::string>& outputs,
                    const json& summary) {
    json j;
    j["command"] = command;
    j["version"] = kEngineVersion;
    j["seed"] = cfg.train.seed;
    j["config_digest"] = hex64(cfg.digest());
    j["model_digest"] = hex64(model_config_digest(cfg.model));
    j["config"] = cfg.canonical();
    j["outputs"] = outputs;
    j["summary"] = summary;
    write_text(out_dir + "/run.json", j.dump(2) + "\n");
}

std::string checkpoint_path(const std::string& out_dir, int64_t step) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "/checkpoints/step_%06lld.ckpt",
                  static_cast<long long>(step));
    return out_dir + buf;
}

std::string csv_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_token_corpus(const std::string& path, const Corpus& corpus) {
    std::ostringstream out;
    out << "xmoe-tokens vocab=" << corpus.vocab_size << " seq_len=" << corpus.seq_len << "\n";
    for (size_t s = 0; s < corpus.sequences.size(); ++s) {
        out << corpus.cluster_labels[s];
        for (int32_t t : corpus.sequences[s]) out << " " << t;
        out << "\n";
    }
    write_text(path, out.str());
}

Corpus load_token_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error::config("cannot read token corpus '" + path + "'");
    std::string header;
    if (!std::getline(in, header)) {
        throw Error::config("empty token corpus '" + path + "'");
    }
    Corpus c;
    {
        std::istringstream hs(header);
        std::string magic, vk, tk;
        hs >> magic >> vk >> tk;
        if (magic != "xmoe-tokens" || vk.rfind("vocab=", 0) != 0 ||
            tk.rfind("seq_len=", 0) != 0) {
            throw Error::config("'" + path + "' is not a token corpus (bad header)");
        }
        c.vocab_size = std::stoll(vk.substr(6));
        c.seq_len = std::stoll(tk.substr(8));
    }
    std::string line;
    int64_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        int64_t label;
        if (!(ls >> label)) {
            throw Error::config(path + ":" + std::to_string(line_no) + ": bad cluster label");
        }
        std::vector<int32_t> seq;
        int64_t tok;
        while (ls >> tok) {
            if (tok < 0 || tok >= c.vocab_size) {
                throw Error::config(path + ":" + std::to_string(line_no) +
                                    ": token id out of range");
            }
            seq.push_back(static_cast<int32_t>(tok));
        }
        if (static_cast<int64_t>(seq.size()) != c.seq_len) {
            throw Error::config(path + ":" + std::to_string(line_no) +
                                ": sequence length mismatch");
        }
        c.sequences.push_back(std::move(seq));
        c.cluster_labels.push_back(static_cast<int32_t>(label));
    }
    if (c.sequences.empty()) {
        throw Error::config("token corpus '" + path + "' holds no sequences");
    }
    return c;
}

Corpus build_corpus(const RunConfig& cfg) {
    if (cfg.corpus_path.empty()) {
        return gen_synthetic(cfg.data);
    }
    // sniff: token corpora carry a magic header, anything else is raw text
    {
        std::ifstream in(cfg.corpus_path);
        if (!in) throw Error::config("cannot read corpus '" + cfg.corpus_path + "'");
        std::string head;
        std::getline(in, head);
        if (head.rfind("xmoe-tokens", 0) == 0) {
            return load_token_corpus(cfg.corpus_path);
        }
    }
    return load_text_corpus(cfg.corpus_path, cfg.tokenize, cfg.data.seq_len,
                            cfg.data.vocab_size);
}

EvalSet make_eval_set(const Corpus& corpus, const RunConfig& cfg) {
    // must mirror the trainer's split derivation exactly
    SplitIndices split =
        split_validation(static_cast<int64_t>(corpus.sequences.size()), Rng(cfg.train.seed));
    const std::vector<int64_t>& pool = split.val.empty() ? split.train : split.val;
    const int64_t T = corpus.seq_len;
    const int64_t want = (cfg.analysis.eval_tokens + T - 1) / T;
    const int64_t n = std::min<int64_t>(want, static_cast<int64_t>(pool.size()));
    if (n == 0) {
        throw Error::runtime("make_eval_set: corpus has no sequences to evaluate");
    }
    EvalSet ev;
    ev.batch = n;
    ev.seq_len = T;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t si = pool[i];
        for (int32_t t : corpus.sequences[si]) {
            ev.tokens.push_back(t);
            ev.cluster_labels.push_back(corpus.cluster_labels[si]);
        }
    }
    return ev;
}

void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    Corpus corpus = build_corpus(cfg);
    const std::string corpus_file = out_dir + "/corpus.tokens";
    save_token_corpus(corpus_file, corpus);

    json summary;
    summary["sequences"] = corpus.sequences.size();
    summary["seq_len"] = corpus.seq_len;
    summary["vocab_size"] = corpus.vocab_size;
    write_run_json(out_dir, "gen-data", cfg, {"corpus.tokens"}, summary);
}

namespace {

struct PhaseResult {
    TrainLog log;
    std::vector<std::string> checkpoint_files;
    int64_t final_step = 0;
    double val_loss_before = 0.0;
    double val_loss_after = 0.0;
};

PhaseResult run_training_phase(const RunConfig& cfg, const Corpus& corpus, Model& model,
                               const std::string& out_dir) {
    ensure_dir(out_dir + "/checkpoints");
    Trainer trainer(model, corpus, cfg.train, cfg.digest());

    PhaseResult res;
    const auto& eval_pool = trainer.split().val.empty() ? trainer.split().train
                                                        : trainer.split().val;
    res.val_loss_before = trainer.eval_task_loss(eval_pool);
    res.log = trainer.run(0, cfg.train.steps, [&](const Checkpoint& cp) {
        const std::string path = checkpoint_path(out_dir, static_cast<int64_t>(cp.step));
        save_checkpoint(path, cp);
        res.checkpoint_files.push_back(path);
        res.final_step = static_cast<int64_t>(cp.step);
    });
    res.val_loss_after = trainer.eval_task_loss(eval_pool);
    res.log.write_csv(out_dir + "/train_log.csv");
    return res;
}

json phase_summary(const PhaseResult& res) {
    json s;
    s["steps"] = res.log.records.size();
    s["initial_val_task_loss"] = res.val_loss_before;
    s["final_val_task_loss"] = res.val_loss_after;
    if (!res.log.records.empty()) {
        const StepRecord& last = res.log.records.back();
        s["final_task_loss"] = last.task_loss;
        s["final_balance_loss"] = last.balance_loss;
        s["final_tau"] = last.tau;
    }
    s["checkpoints"] = res.checkpoint_files.size();
    return s;
}

}  // namespace

void cmd_pretrain(const RunConfig& cfg, const std::string& out_dir) {
    Corpus corpus = build_corpus(cfg);
    Model model = Model::init(cfg.model, cfg.train.seed);
    TrainConfig tc = cfg.train;
    tc.freeze_routing = false;
    RunConfig run_cfg = cfg;
    run_cfg.train = tc;
    PhaseResult res = run_training_phase(run_cfg, corpus, model, out_dir);
    write_run_json(out_dir, "pretrain", run_cfg, {"train_log.csv", "checkpoints/"},
                   phase_summary(res));
}

void cmd_finetune(const RunConfig& cfg, const std::string& checkpoint_path_in,
                  const std::string& out_dir) {
    Corpus corpus = build_corpus(cfg);
    Model model = Model::init(cfg.model, cfg.train.seed);
    Checkpoint cp = load_checkpoint(checkpoint_path_in);
    apply_checkpoint(model, cp);

    RunConfig run_cfg = cfg;
    // routing is frozen during fine-tuning unless the config says otherwise
    if (!cfg.was_set("train.freeze_routing")) {
        run_cfg.train.freeze_routing = true;
    }
    PhaseResult res = run_training_phase(run_cfg, corpus, model, out_dir);
    json summary = phase_summary(res);
    summary["from_checkpoint"] = checkpoint_path_in;
    summary["frozen_routing"] = run_cfg.train.freeze_routing;
    write_run_json(out_dir, "finetune", run_cfg, {"train_log.csv", "checkpoints/"}, summary);
}

namespace {

std::vector<Checkpoint> load_sorted_checkpoints(const std::vector<std::string>& inputs,
                                                size_t min_count, const std::string& kind) {
    if (inputs.size() < min_count) {
        throw Error::config("analyze " + kind + ": needs at least " +
                            std::to_string(min_count) + " checkpoint file(s)");
    }
    std::vector<Checkpoint> cps;
    cps.reserve(inputs.size());
    for (const std::string& path : inputs) {
        cps.push_back(load_checkpoint(path));
    }
    std::sort(cps.begin(), cps.end(),
              [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });
    return cps;
}

void analyze_rc(const RunConfig& cfg, const std::vector<std::string>& inputs,
                const std::string& out_dir) {
    const std::vector<Checkpoint> cps = load_sorted_checkpoints(inputs, 1, "rc");
    Corpus corpus = build_corpus(cfg);
    EvalSet ev = make_eval_set(corpus, cfg);
    Model model = Model::init(cfg.model, cfg.train.seed);

    std::ostringstream csv;
    csv << "step,rc,rank_sigma_b,points,degenerate\n";
    json series = json::array();
    for (const Checkpoint& cp : cps) {
        apply_checkpoint(model, cp);
        NoGradGuard ng;
        EncodeResult enc = encode(ev.tokens, ev.batch, ev.seq_len, model);
        LabeledPoints lp;
        lp.points = enc.pre_smoe;
        lp.semantics = cfg.analysis.labels;
        if (cfg.analysis.labels == LabelSemantics::assigned_expert) {
            lp.labels = enc.outcome.selected;
        } else {
            for (int64_t l : ev.cluster_labels) {
                if (l < 0) {
                    throw Error::config(
                        "analyze rc: latent_cluster labels need a synthetic corpus");
                }
                lp.labels.push_back(l);
            }
        }
        CollapseReport rep = rc_metric(lp, cfg.analysis.rc_tol);
        csv << cp.step << "," << csv_real(rep.rc) << "," << rep.rank_sigma_b << ","
            << ev.tokens.size() << "," << (rep.degenerate_sigma_b ? 1 : 0) << "\n";
        series.push_back({{"step", cp.step}, {"rc", rep.rc}});
    }
    write_text(out_dir + "/rc.csv", csv.str());
    json summary;
    summary["metric"] = "rc";
    summary["labels"] = to_string(cfg.analysis.labels);
    summary["series"] = series;
    write_run_json(out_dir, "analyze-rc", cfg, {"rc.csv"}, summary);
}

void analyze_rf(const RunConfig& cfg, const std::vector<std::string>& inputs,
                const std::string& out_dir) {
    const std::vector<Checkpoint> cps = load_sorted_checkpoints(inputs, 2, "rf");
    Corpus corpus = build_corpus(cfg);
    EvalSet ev = make_eval_set(corpus, cfg);
    Model model_a = Model::init(cfg.model, cfg.train.seed);
    Model model_b = Model::init(cfg.model, cfg.train.seed);

    std::ostringstream csv;
    csv << "step_a,step_b,rf_ratio\n";
    json series = json::array();
    double sum = 0.0;
    for (size_t i = 0; i + 1 < cps.size(); ++i) {
        apply_checkpoint(model_a, cps[i]);
        apply_checkpoint(model_b, cps[i + 1]);
        const double rf = rf_ratio(model_a, model_b, ev.tokens, ev.batch, ev.seq_len);
        csv << cps[i].step << "," << cps[i + 1].step << "," << csv_real(rf) << "\n";
        series.push_back({{"step_a", cps[i].step}, {"step_b", cps[i + 1].step}, {"rf", rf}});
        sum += rf;
    }
    write_text(out_dir + "/rf.csv", csv.str());
    json summary;
    summary["metric"] = "rf";
    summary["mean_rf"] = sum / static_cast<double>(cps.size() - 1);
    summary["series"] = series;
    write_run_json(out_dir, "analyze-rf", cfg, {"rf.csv"}, summary);
}

void analyze_ic(const RunConfig& cfg, const std::vector<std::string>& inputs,
                const std::string& out_dir) {
    if (inputs.size() < 2) {
        throw Error::config("analyze ic: needs at least 2 train_log.csv files");
    }
    std::vector<TrainLog> logs;
    for (const std::string& path : inputs) logs.push_back(TrainLog::read_csv(path));
    const int64_t N = logs[0].num_experts;
    int64_t min_steps = static_cast<int64_t>(logs[0].records.size());
    for (size_t i = 0; i < logs.size(); ++i) {
        if (logs[i].num_experts != N) {
            throw Error::config("analyze ic: expert count differs in '" + inputs[i] + "'");
        }
        min_steps = std::min<int64_t>(min_steps, logs[i].records.size());
    }
    const int64_t window = cfg.analysis.ic_window;
    const int64_t n_windows = min_steps / window;
    if (n_windows == 0) {
        throw Error::config("analyze ic: logs are shorter than one window (" +
                            std::to_string(window) + " steps)");
    }

    std::ostringstream csv;
    csv << "window,step_lo,step_hi,ic,ic_offdiag\n";
    json series = json::array();
    for (int64_t w = 0; w < n_windows; ++w) {
        std::vector<std::vector<double>> loads;
        for (const TrainLog& log : logs) {
            std::vector<double> acc(N, 0.0);
            for (int64_t s = w * window; s < (w + 1) * window; ++s) {
                for (int64_t e = 0; e < N; ++e) {
                    acc[e] += static_cast<double>(log.records[s].loads[e]);
                }
            }
            loads.push_back(std::move(acc));
        }
        ConsistencyReport rep = inter_run_consistency(loads);
        const int64_t lo = logs[0].records[w * window].step;
        const int64_t hi = logs[0].records[(w + 1) * window - 1].step;
        csv << w << "," << lo << "," << hi << "," << csv_real(rep.ic) << ","
            << csv_real(rep.ic_offdiag) << "\n";
        series.push_back({{"window", w}, {"ic", rep.ic}, {"ic_offdiag", rep.ic_offdiag}});
    }
    write_text(out_dir + "/ic.csv", csv.str());
    json summary;
    summary["metric"] = "ic";
    summary["runs"] = inputs.size();
    summary["window"] = window;
    summary["series"] = series;
    write_run_json(out_dir, "analyze-ic", cfg, {"ic.csv"}, summary);
}

void analyze_jacobian(const RunConfig& cfg, const std::string& out_dir) {
    JacobianCheckConfig jc;
    jc.hidden = cfg.analysis.jacobian_hidden;
    jc.num_experts = cfg.analysis.jacobian_experts;
    jc.trials = cfg.analysis.jacobian_trials;
    jc.tolerance = cfg.analysis.jacobian_tolerance;
    jc.sublayers = cfg.model.num_expert_sublayers;
    jc.seed = cfg.train.seed;
    JacobianReport rep = verify_jacobian(jc);

    std::ostringstream csv;
    csv << "trial,margin,max_abs_err\n";
    double worst = 0.0;
    for (const JacobianTrial& t : rep.trials) {
        csv << t.trial << "," << csv_real(t.margin) << "," << csv_real(t.max_abs_err) << "\n";
        worst = std::max(worst, t.max_abs_err);
    }
    write_text(out_dir + "/jacobian.csv", csv.str());
    json summary;
    summary["metric"] = "jacobian";
    summary["trials"] = rep.trials.size();
    summary["tolerance"] = rep.tolerance;
    summary["max_abs_err"] = worst;
    summary["pass"] = rep.pass;
    write_run_json(out_dir, "analyze-jacobian", cfg, {"jacobian.csv"}, summary);
    if (!rep.pass) {
        throw Error::check("jacobian verification failed: max error " + csv_real(worst) +
                           " at tolerance " + csv_real(rep.tolerance));
    }
}

void analyze_span(const RunConfig& cfg, const std::vector<std::string>& inputs,
                  const std::string& out_dir) {
    Corpus corpus = build_corpus(cfg);
    EvalSet ev = make_eval_set(corpus, cfg);
    Model model = Model::init(cfg.model, cfg.train.seed);
    if (!inputs.empty()) {
        apply_checkpoint(model, load_checkpoint(inputs[0]));
    }
    SpanReport rep = span_residual(model, ev.tokens, ev.batch, ev.seq_len, cfg.train.seed);

    std::ostringstream csv;
    csv << "tokens_used,tokens_skipped,max_residual,rank,rank_bound,extension\n";
    csv << rep.tokens_used << "," << rep.tokens_skipped << "," << csv_real(rep.max_residual)
        << "," << rep.rank << "," << rep.rank_bound << "," << (rep.extension ? 1 : 0) << "\n";
    write_text(out_dir + "/span.csv", csv.str());

    const bool pass = rep.max_residual < cfg.analysis.span_tolerance &&
                      rep.rank <= rep.rank_bound;
    json summary;
    summary["metric"] = "span";
    summary["max_residual"] = rep.max_residual;
    summary["rank"] = rep.rank;
    summary["rank_bound"] = rep.rank_bound;
    summary["extension"] = rep.extension;
    summary["pass"] = pass;
    write_run_json(out_dir, "analyze-span", cfg, {"span.csv"}, summary);
    if (!rep.extension && !pass) {
        throw Error::check("span check failed: residual " + csv_real(rep.max_residual) +
                           ", rank " + std::to_string(rep.rank) + " bound " +
                           std::to_string(rep.rank_bound));
    }
}

void analyze_export(const RunConfig& cfg, const std::vector<std::string>& inputs,
                    const std::string& out_dir) {
    Corpus corpus = build_corpus(cfg);
    EvalSet ev = make_eval_set(corpus, cfg);
    Model model = Model::init(cfg.model, cfg.train.seed);
    if (!inputs.empty()) {
        apply_checkpoint(model, load_checkpoint(inputs[0]));
    }
    const int64_t rows =
        export_embeddings(model, ev.tokens, ev.batch, ev.seq_len, out_dir + "/export.csv");
    json summary;
    summary["metric"] = "export";
    summary["rows"] = rows;
    write_run_json(out_dir, "analyze-export", cfg, {"export.csv"}, summary);
}

}  // namespace

void cmd_analyze(const RunConfig& cfg, const std::string& kind,
                 const std::vector<std::string>& inputs, const std::string& out_dir) {
    ensure_dir(out_dir);
    if (kind == "rc") return analyze_rc(cfg, inputs, out_dir);
    if (kind == "rf") return analyze_rf(cfg, inputs, out_dir);
    if (kind == "ic") return analyze_ic(cfg, inputs, out_dir);
    if (kind == "jacobian") return analyze_jacobian(cfg, out_dir);
    if (kind == "span") return analyze_span(cfg, inputs, out_dir);
    if (kind == "export") return analyze_export(cfg, inputs, out_dir);
    throw Error::config("unknown analysis kind '" + kind +
                        "' (rc|rf|ic|jacobian|span|export)");
}

namespace {

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        if (c == '/' || c == ':' || c == ' ') c = '-';
    }
    return out;
}

int64_t parse_routing_dim(const std::string& value, int64_t n_experts) {
    // accepts plain integers and the N-relative forms N/4, N/2, N, 2N, 4N
    if (value == "N") return n_experts;
    if (value == "N/2") return std::max<int64_t>(1, n_experts / 2);
    if (value == "N/4") return std::max<int64_t>(1, n_experts / 4);
    if (value == "2N") return 2 * n_experts;
    if (value == "4N") return 4 * n_experts;
    try {
        size_t used = 0;
        const int64_t v = std::stoll(value, &used);
        if (used != value.size() || v < 1) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw Error::config("ablate routing_dim: bad value '" + value + "'");
    }
}

struct AblationCell {
    RunConfig cfg;
    bool run_finetune = false;
    bool finetune_frozen_flag = true;
};

AblationCell ablation_config(const RunConfig& base, const std::string& axis,
                             const std::string& value) {
    AblationCell cell;
    cell.cfg = base;
    if (axis == "routing_dim") {
        cell.cfg.model.router.routing_dim =
            parse_routing_dim(value, base.model.router.num_experts);
    } else if (axis == "alpha") {
        try {
            cell.cfg.train.alpha = std::stod(value);
        } catch (const std::exception&) {
            throw Error::config("ablate alpha: bad value '" + value + "'");
        }
        if (cell.cfg.train.alpha < 0) {
            throw Error::config("ablate alpha: must be non-negative");
        }
    } else if (axis == "variant") {
        cell.cfg.model.router.variant = router_variant_from(value);
        cell.cfg.model.router.dim_reduction = true;  // re-derived by resolve()
        cell.cfg.model.router.l2_norm = true;
        cell.cfg.model.router.tau_init = 0.0;
        cell.cfg.model.router.tau0 = 0.0;
    } else if (axis == "gating") {
        cell.cfg.model.router.gating = gating_from(value);
        cell.cfg.model.router.tau_init = 0.0;
        cell.cfg.model.router.tau0 = 0.0;
    } else if (axis == "components") {
        // dim_reduction:l2_norm:frozen, each on|off
        std::istringstream vs(value);
        std::string a, b, c;
        if (!std::getline(vs, a, ':') || !std::getline(vs, b, ':') || !std::getline(vs, c)) {
            throw Error::config("ablate components: expected dimred:l2:frozen, got '" + value +
                                "'");
        }
        auto flag = [&](const std::string& v) {
            if (v == "on") return true;
            if (v == "off") return false;
            throw Error::config("ablate components: flags are on|off, got '" + v + "'");
        };
        cell.cfg.model.router.variant = RouterVariant::hypersphere;
        cell.cfg.model.router.dim_reduction = flag(a);
        cell.cfg.model.router.l2_norm = flag(b);
        cell.run_finetune = true;
        cell.finetune_frozen_flag = flag(c);
    } else {
        throw Error::config("unknown ablation axis '" + axis +
                            "' (routing_dim|alpha|variant|gating|components)");
    }
    cell.cfg.model.router = cell.cfg.model.router.resolved();
    cell.cfg.finalize();
    return cell;
}

}  // namespace

void cmd_ablate(const RunConfig& cfg, const std::string& axis,
                const std::vector<std::string>& values, const std::string& out_dir) {
    if (values.empty()) {
        throw Error::config("ablate: no values given");
    }
    ensure_dir(out_dir);

    std::ostringstream csv;
    csv << "value,final_task_loss,final_rc,mean_rf\n";
    json runs = json::array();
    for (const std::string& value : values) {
        AblationCell cell = ablation_config(cfg, axis, value);
        const std::string run_dir = out_dir + "/" + axis + "=" + sanitize(value);
        ensure_dir(run_dir);

        Corpus corpus = build_corpus(cell.cfg);
        Model model = Model::init(cell.cfg.model, cell.cfg.train.seed);
        RunConfig phase_cfg = cell.cfg;
        phase_cfg.train.freeze_routing = false;
        PhaseResult pre = run_training_phase(phase_cfg, corpus, model, run_dir);
        write_run_json(run_dir, "pretrain", phase_cfg, {"train_log.csv", "checkpoints/"},
                       phase_summary(pre));

        PhaseResult* final_phase = &pre;
        PhaseResult ft;
        if (cell.run_finetune) {
            RunConfig ft_cfg = cell.cfg;
            ft_cfg.train.freeze_routing = cell.finetune_frozen_flag;
            ft_cfg.train.seed = cell.cfg.train.seed + 1;  // fresh data order downstream
            const std::string ft_dir = run_dir + "/finetune";
            ensure_dir(ft_dir);
            ft = run_training_phase(ft_cfg, corpus, model, ft_dir);
            json fs_summary = phase_summary(ft);
            fs_summary["frozen_routing"] = cell.finetune_frozen_flag;
            write_run_json(ft_dir, "finetune", ft_cfg, {"train_log.csv", "checkpoints/"},
                           fs_summary);
            final_phase = &ft;
        }

        // final-checkpoint RC with expert labels, mean RF over checkpoint pairs
        EvalSet ev = make_eval_set(corpus, cell.cfg);
        double final_rc = 0.0;
        {
            NoGradGuard ng;
            EncodeResult enc = encode(ev.tokens, ev.batch, ev.seq_len, model);
            LabeledPoints lp;
            lp.points = enc.pre_smoe;
            lp.labels = enc.outcome.selected;
            final_rc = rc_metric(lp).rc;
        }
        double mean_rf = 0.0;
        if (final_phase->checkpoint_files.size() >= 2) {
            Model ma = Model::init(cell.cfg.model, cell.cfg.train.seed);
            Model mb = Model::init(cell.cfg.model, cell.cfg.train.seed);
            int64_t pairs = 0;
            for (size_t i = 0; i + 1 < final_phase->checkpoint_files.size(); ++i) {
                apply_checkpoint(ma, load_checkpoint(final_phase->checkpoint_files[i]));
                apply_checkpoint(mb, load_checkpoint(final_phase->checkpoint_files[i + 1]));
                mean_rf += rf_ratio(ma, mb, ev.tokens, ev.batch, ev.seq_len);
                ++pairs;
            }
            mean_rf /= static_cast<double>(pairs);
        }

        csv << value << "," << csv_real(final_phase->val_loss_after) << ","
            << csv_real(final_rc) << "," << csv_real(mean_rf) << "\n";
        runs.push_back({{"value", value},
                        {"final_task_loss", final_phase->val_loss_after},
                        {"final_rc", final_rc},
                        {"mean_rf", mean_rf},
                        {"dir", run_dir}});
    }
    write_text(out_dir + "/comparison.csv", csv.str());
    json summary;
    summary["axis"] = axis;
    summary["runs"] = runs;
    write_run_json(out_dir, "ablate", cfg, {"comparison.csv"}, summary);
}

}  // namespace xmoe
