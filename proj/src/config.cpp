// SPDX-License-Identifier: Apache-2.0
#include "xmoe/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace xmoe {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const int64_t x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw Error::config("key '" + key + "': '" + v + "' is not an integer");
    }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const uint64_t x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw Error::config("key '" + key + "': '" + v + "' is not an unsigned integer");
    }
}

double parse_real(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw Error::config("key '" + key + "': '" + v + "' is not a number");
    }
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw Error::config("key '" + key + "': '" + v + "' is not a boolean");
}

std::string fmt_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

using Setter = std::function<void(RunConfig&, const std::string& value, const std::string& key)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
    Setter set;
    Getter get;
};

// one table drives parsing, overrides and the canonical dump
const std::map<std::string, Field>& field_table() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        auto add = [&](const std::string& key, Setter s, Getter g) {
            t[key] = {std::move(s), std::move(g)};
        };

#define XMOE_INT_FIELD(key, expr)                                                      \
    add(key,                                                                           \
        [](RunConfig& c, const std::string& v, const std::string& k) {                 \
            c.expr = parse_int(v, k);                                                  \
        },                                                                             \
        [](const RunConfig& c) { return std::to_string(c.expr); })
#define XMOE_U64_FIELD(key, expr)                                                      \
    add(key,                                                                           \
        [](RunConfig& c, const std::string& v, const std::string& k) {                 \
            c.expr = parse_u64(v, k);                                                  \
        },                                                                             \
        [](const RunConfig& c) { return std::to_string(c.expr); })
#define XMOE_REAL_FIELD(key, expr)                                                     \
    add(key,                                                                           \
        [](RunConfig& c, const std::string& v, const std::string& k) {                 \
            c.expr = parse_real(v, k);                                                 \
        },                                                                             \
        [](const RunConfig& c) { return fmt_real(c.expr); })
#define XMOE_BOOL_FIELD(key, expr)                                                     \
    add(key,                                                                           \
        [](RunConfig& c, const std::string& v, const std::string& k) {                 \
            c.expr = parse_bool(v, k);                                                 \
        },                                                                             \
        [](const RunConfig& c) { return c.expr ? "true" : "false"; })

        XMOE_INT_FIELD("model.vocab_size", model.vocab_size);
        XMOE_INT_FIELD("model.hidden", model.hidden);
        XMOE_INT_FIELD("model.layers", model.layers);
        XMOE_INT_FIELD("model.heads", model.heads);
        XMOE_INT_FIELD("model.d_ff", model.d_ff);
        XMOE_INT_FIELD("model.max_seq_len", model.max_seq_len);
        XMOE_INT_FIELD("model.smoe_position", model.smoe_position);
        XMOE_INT_FIELD("model.num_expert_sublayers", model.num_expert_sublayers);
        add("model.activation",
            [](RunConfig& c, const std::string& v, const std::string&) {
                c.model.activation = activation_from(v);
            },
            [](const RunConfig& c) { return to_string(c.model.activation); });

        add("router.variant",
            [](RunConfig& c, const std::string& v, const std::string&) {
                c.model.router.variant = router_variant_from(v);
            },
            [](const RunConfig& c) { return to_string(c.model.router.variant); });
        add("router.gating",
            [](RunConfig& c, const std::string& v, const std::string&) {
                c.model.router.gating = gating_from(v);
            },
            [](const RunConfig& c) { return to_string(c.model.router.gating); });
        XMOE_INT_FIELD("router.num_experts", model.router.num_experts);
        XMOE_INT_FIELD("router.routing_dim", model.router.routing_dim);
        XMOE_REAL_FIELD("router.tau_init", model.router.tau_init);
        XMOE_REAL_FIELD("router.tau0", model.router.tau0);
        XMOE_REAL_FIELD("router.eps_norm", model.router.eps_norm);
        XMOE_BOOL_FIELD("router.dim_reduction", model.router.dim_reduction);
        XMOE_BOOL_FIELD("router.l2_norm", model.router.l2_norm);

        XMOE_INT_FIELD("train.steps", train.steps);
        XMOE_INT_FIELD("train.batch_size", train.batch_size);
        XMOE_REAL_FIELD("train.lr_max", train.lr_max);
        XMOE_INT_FIELD("train.warmup_steps", train.warmup_steps);
        add("train.schedule",
            [](RunConfig& c, const std::string& v, const std::string& k) {
                if (v != "linear_decay") {
                    throw Error::config("key '" + k + "': unknown schedule '" + v + "'");
                }
                c.train.schedule = v;
            },
            [](const RunConfig& c) { return c.train.schedule; });
        XMOE_REAL_FIELD("train.adam_beta1", train.adam_beta1);
        XMOE_REAL_FIELD("train.adam_beta2", train.adam_beta2);
        XMOE_REAL_FIELD("train.adam_eps", train.adam_eps);
        XMOE_REAL_FIELD("train.weight_decay", train.weight_decay);
        XMOE_REAL_FIELD("train.alpha", train.alpha);
        XMOE_U64_FIELD("train.seed", train.seed);
        XMOE_INT_FIELD("train.checkpoint_every", train.checkpoint_every);
        XMOE_BOOL_FIELD("train.freeze_routing", train.freeze_routing);
        XMOE_REAL_FIELD("train.dropout_rate", train.dropout_rate);
        XMOE_REAL_FIELD("train.grad_clip", train.grad_clip);
        XMOE_REAL_FIELD("train.mask_rate", train.mask_rate);

        XMOE_INT_FIELD("data.vocab_size", data.vocab_size);
        XMOE_INT_FIELD("data.num_clusters", data.num_clusters);
        XMOE_INT_FIELD("data.tokens_per_cluster", data.tokens_per_cluster);
        XMOE_INT_FIELD("data.sequences", data.sequences);
        XMOE_INT_FIELD("data.seq_len", data.seq_len);
        XMOE_REAL_FIELD("data.cluster_purity", data.cluster_purity);
        XMOE_U64_FIELD("data.seed", data.seed);
        add("data.corpus_path",
            [](RunConfig& c, const std::string& v, const std::string&) { c.corpus_path = v; },
            [](const RunConfig& c) { return c.corpus_path; });
        add("data.tokenize",
            [](RunConfig& c, const std::string& v, const std::string&) {
                c.tokenize = tokenize_mode_from(v);
            },
            [](const RunConfig& c) { return to_string(c.tokenize); });

        add("analysis.labels",
            [](RunConfig& c, const std::string& v, const std::string&) {
                c.analysis.labels = label_semantics_from(v);
            },
            [](const RunConfig& c) { return to_string(c.analysis.labels); });
        XMOE_INT_FIELD("analysis.eval_tokens", analysis.eval_tokens);
        XMOE_INT_FIELD("analysis.ic_window", analysis.ic_window);
        XMOE_INT_FIELD("analysis.jacobian_trials", analysis.jacobian_trials);
        XMOE_INT_FIELD("analysis.jacobian_hidden", analysis.jacobian_hidden);
        XMOE_INT_FIELD("analysis.jacobian_experts", analysis.jacobian_experts);
        XMOE_REAL_FIELD("analysis.jacobian_tolerance", analysis.jacobian_tolerance);
        XMOE_REAL_FIELD("analysis.span_tolerance", analysis.span_tolerance);
        XMOE_REAL_FIELD("analysis.rc_tol", analysis.rc_tol);

#undef XMOE_INT_FIELD
#undef XMOE_U64_FIELD
#undef XMOE_REAL_FIELD
#undef XMOE_BOOL_FIELD
        return t;
    }();
    return table;
}

}  // namespace

void RunConfig::finalize() {
    if (const char* env_seed = std::getenv("XMOE_SEED")) {
        train.seed = parse_u64(env_seed, "XMOE_SEED");
        explicit_keys.insert("train.seed");
    }
    model.router = model.router.resolved();
    model.validate();
    train.validate();
    if (corpus_path.empty()) {
        data.validate();
        if (data.vocab_size > model.vocab_size) {
            throw Error::config("data.vocab_size exceeds model.vocab_size");
        }
        if (data.seq_len > model.max_seq_len) {
            throw Error::config("data.seq_len exceeds model.max_seq_len");
        }
    }
    if (analysis.eval_tokens < 1 || analysis.ic_window < 1 || analysis.jacobian_trials < 1) {
        throw Error::config("analysis: counts must be positive");
    }
}

std::string RunConfig::canonical() const {
    std::ostringstream out;
    for (const auto& [key, field] : field_table()) {
        out << key << "=" << field.get(*this) << "\n";
    }
    return out.str();
}

uint64_t RunConfig::digest() const {
    return fnv1a64(canonical());
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string at = origin + ":" + std::to_string(line_no);
        std::string s = trim(line);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']') {
                throw Error::config(at + ": malformed section header '" + s + "'");
            }
            section = trim(s.substr(1, s.size() - 2));
            bool known = false;
            for (const char* name : {"model", "router", "train", "data", "analysis"}) {
                known = known || section == name;
            }
            if (!known) {
                throw Error::config(at + ": unknown section '[" + section + "]'");
            }
            continue;
        }
        const size_t eq = s.find('=');
        if (eq == std::string::npos) {
            throw Error::config(at + ": expected 'key = value', got '" + s + "'");
        }
        if (section.empty()) {
            throw Error::config(at + ": key outside of any section");
        }
        const std::string key = section + "." + trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        auto it = field_table().find(key);
        if (it == field_table().end()) {
            throw Error::config(at + ": unknown key '" + key + "'");
        }
        try {
            it->second.set(cfg, value, key);
        } catch (const Error& e) {
            throw Error::config(at + ": " + e.what());
        }
        cfg.explicit_keys.insert(key);
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error::config("cannot read config file '" + path + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
    auto it = field_table().find(dotted_key);
    if (it == field_table().end()) {
        throw Error::config("unknown config key '" + dotted_key + "'");
    }
    it->second.set(cfg, value, dotted_key);
    cfg.explicit_keys.insert(dotted_key);
}

}  // namespace xmoe
