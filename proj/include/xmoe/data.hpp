// SPDX-License-Identifier: Apache-2.0
//
// Deterministic toy corpora and masked-token batches. Synthetic sequences
// carry a latent cluster each, so routing has structure to discover at desk
// scale; text corpora come in byte or whitespace tokenizations.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xmoe/common.hpp"
#include "xmoe/rng.hpp"

namespace xmoe {

// reserved token ids; content ids start at kFirstContentId
inline constexpr int64_t kPadId = 0;
inline constexpr int64_t kMaskId = 1;
inline constexpr int64_t kUnkId = 2;  // whitespace mode only
inline constexpr int64_t kFirstContentId = 2;

struct SyntheticCorpusSpec {
    int64_t vocab_size = 256;
    int64_t num_clusters = 8;
    int64_t tokens_per_cluster = 24;
    int64_t sequences = 512;
    int64_t seq_len = 64;
    double cluster_purity = 0.9;
    uint64_t seed = 1;

    void validate() const;
};

struct Corpus {
    std::vector<std::vector<int32_t>> sequences;  // all of length seq_len
    std::vector<int32_t> cluster_labels;          // -1 when unknown (text corpora)
    int64_t vocab_size = 0;
    int64_t seq_len = 0;
};

Corpus gen_synthetic(const SyntheticCorpusSpec& spec);

enum class TokenizeMode { byte, whitespace };
std::string to_string(TokenizeMode m);
TokenizeMode tokenize_mode_from(const std::string& s);

// byte mode: token = byte + 2 (ids 0/1 are reserved), vocab 258;
// whitespace mode: frequency-capped vocabulary, unknown words -> kUnkId.
// Sequences are seq_len-length chunks; the tail chunk is padded with kPadId.
Corpus load_text_corpus(const std::string& path, TokenizeMode mode, int64_t seq_len,
                        int64_t max_vocab = 4096);

// inverse of byte-mode tokenization; skips reserved ids
std::vector<uint8_t> detokenize_bytes(const Corpus& corpus);

struct MaskedBatch {
    std::vector<int64_t> input_ids;    // [B*T] row-major
    std::vector<int64_t> target_ids;   // original token at every position
    std::vector<uint8_t> mask_flags;   // 1 where the loss is supervised
    std::vector<int64_t> original_ids; // unmodified inputs, for token identity
    int64_t batch = 0;
    int64_t seq_len = 0;
};

// BERT-style masking: each maskable (non-reserved) position is selected with
// mask_rate; selected positions become kMaskId with p=0.8, a random content
// token with p=0.1 and stay unchanged with p=0.1. A sequence that ends up
// with zero selections is re-rolled; after 64 fruitless attempts one
// position is forced, which also covers the mask_rate -> 0 limit.
MaskedBatch mask_tokens(const Corpus& corpus, std::span<const int64_t> seq_indices, Rng& rng,
                        double mask_rate = 0.15);

struct SplitIndices {
    std::vector<int64_t> train;
    std::vector<int64_t> val;
};

// fixed 5% validation split by seeded shuffle
SplitIndices split_validation(int64_t num_sequences, const Rng& base, double fraction = 0.05);

}  // namespace xmoe
