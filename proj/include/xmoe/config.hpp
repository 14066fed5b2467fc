// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: an INI-style file with [model], [router], [train],
// [data] and [analysis] sections. Every key has a default, so an empty file
// is a valid configuration; unknown sections or keys are hard errors with
// line numbers. The canonical dump fixes one ordering of every key, which
// makes config digests stable.
#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "xmoe/analysis.hpp"
#include "xmoe/data.hpp"
#include "xmoe/model.hpp"
#include "xmoe/training.hpp"

namespace xmoe {

struct AnalysisConfig {
    LabelSemantics labels = LabelSemantics::assigned_expert;
    int64_t eval_tokens = 4096;
    int64_t ic_window = 100;
    int64_t jacobian_trials = 20;
    int64_t jacobian_hidden = 6;
    int64_t jacobian_experts = 3;
    double jacobian_tolerance = 1e-5;
    double span_tolerance = 1e-10;
    double rc_tol = 1e-10;  // pinv eigenvalue cutoff for the RC metric
};

struct RunConfig {
    ModelConfig model;  // includes the router section
    TrainConfig train;
    SyntheticCorpusSpec data;
    std::string corpus_path;           // when set, load text instead of synthesizing
    TokenizeMode tokenize = TokenizeMode::byte;
    AnalysisConfig analysis;
    std::set<std::string> explicit_keys;  // "section.key" entries that were set

    // Resolves defaults, applies the XMOE_SEED environment override and
    // validates cross-field constraints.
    void finalize();

    bool was_set(const std::string& dotted_key) const {
        return explicit_keys.count(dotted_key) > 0;
    }

    std::string canonical() const;  // deterministic full key=value dump
    uint64_t digest() const;        // fnv1a64 of the canonical dump
};

RunConfig parse_config_text(const std::string& text, const std::string& origin);
RunConfig parse_config_file(const std::string& path);

// "section.key=value" override, applied after file parsing (flags win)
void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

}  // namespace xmoe
