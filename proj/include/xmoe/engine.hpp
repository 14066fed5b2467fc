// SPDX-License-Identifier: Apache-2.0
//
// Command layer: everything the CLI (or any embedder) can ask for. Each
// command materializes its outputs as CSV/JSON files in an output directory
// together with a run.json provenance record that pins the resolved
// configuration, its digest and the seed. Outputs carry no timestamps, so a
// rerun with the same configuration is byte-identical.
#pragma once

#include <string>
#include <vector>

#include "xmoe/config.hpp"

namespace xmoe {

extern const char* const kEngineVersion;

// resolves the corpus named by the config: synthetic spec, raw text file,
// or a token corpus produced by gen_data
Corpus build_corpus(const RunConfig& cfg);

// token-corpus file format: header "xmoe-tokens vocab=<V> seq_len=<T>",
// then one sequence per line as "<cluster_label> <id> <id> ..."
void save_token_corpus(const std::string& path, const Corpus& corpus);
Corpus load_token_corpus(const std::string& path);

struct EvalSet {
    std::vector<int64_t> tokens;          // batch * seq_len, flattened
    std::vector<int64_t> cluster_labels;  // per token, -1 when unknown
    int64_t batch = 0;
    int64_t seq_len = 0;
};

// fixed evaluation token set: the leading validation sequences, frozen by
// the run seed at corpus-split time
EvalSet make_eval_set(const Corpus& corpus, const RunConfig& cfg);

void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir);
void cmd_pretrain(const RunConfig& cfg, const std::string& out_dir);
void cmd_finetune(const RunConfig& cfg, const std::string& checkpoint_path,
                  const std::string& out_dir);

// kinds: rc, rf, ic, jacobian, span, export. Throws Error(check) when a
// verification kind fails its tolerance.
void cmd_analyze(const RunConfig& cfg, const std::string& kind,
                 const std::vector<std::string>& inputs, const std::string& out_dir);

// axes: routing_dim, alpha, variant, gating, components
// ("components" values are dim_reduction:l2_norm:frozen triples, e.g. on:off:on)
void cmd_ablate(const RunConfig& cfg, const std::string& axis,
                const std::vector<std::string>& values, const std::string& out_dir);

}  // namespace xmoe
