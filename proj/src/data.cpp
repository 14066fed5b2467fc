// SPDX-License-Identifier: Apache-2.0
#include "xmoe/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace xmoe {

void SyntheticCorpusSpec::validate() const {
    if (vocab_size < kFirstContentId + 1) {
        throw Error::config("synthetic corpus: vocab_size must leave room for content tokens");
    }
    if (num_clusters < 1 || tokens_per_cluster < 1) {
        throw Error::config("synthetic corpus: clusters and tokens_per_cluster must be >= 1");
    }
    if (num_clusters * tokens_per_cluster > vocab_size - kFirstContentId) {
        throw Error::config("synthetic corpus: cluster blocks exceed the non-reserved vocab");
    }
    if (sequences < 1 || seq_len < 1) {
        throw Error::config("synthetic corpus: sequences and seq_len must be >= 1");
    }
    if (!(cluster_purity > 0.0 && cluster_purity <= 1.0)) {
        throw Error::config("synthetic corpus: cluster_purity must be in (0, 1]");
    }
}

Corpus gen_synthetic(const SyntheticCorpusSpec& spec) {
    spec.validate();
    Rng root(spec.seed);
    Corpus c;
    c.vocab_size = spec.vocab_size;
    c.seq_len = spec.seq_len;
    c.sequences.reserve(spec.sequences);
    c.cluster_labels.reserve(spec.sequences);
    const int64_t content = spec.vocab_size - kFirstContentId;
    for (int64_t s = 0; s < spec.sequences; ++s) {
        Rng r = root.child("seq", s);
        const int64_t cluster = r.next_below(spec.num_clusters);
        std::vector<int32_t> seq(spec.seq_len);
        for (int64_t t = 0; t < spec.seq_len; ++t) {
            int64_t tok;
            if (r.next_double() < spec.cluster_purity) {
                tok = kFirstContentId + cluster * spec.tokens_per_cluster +
                      r.next_below(spec.tokens_per_cluster);
            } else {
                tok = kFirstContentId + r.next_below(content);
            }
            seq[t] = static_cast<int32_t>(tok);
        }
        c.sequences.push_back(std::move(seq));
        c.cluster_labels.push_back(static_cast<int32_t>(cluster));
    }
    return c;
}

std::string to_string(TokenizeMode m) {
    return m == TokenizeMode::byte ? "byte" : "whitespace";
}

TokenizeMode tokenize_mode_from(const std::string& s) {
    if (s == "byte") return TokenizeMode::byte;
    if (s == "whitespace") return TokenizeMode::whitespace;
    throw Error::config("unknown tokenization '" + s + "' (byte|whitespace)");
}

namespace {

Corpus chunk_tokens(std::vector<int32_t> tokens, int64_t seq_len, int64_t vocab) {
    Corpus c;
    c.vocab_size = vocab;
    c.seq_len = seq_len;
    for (size_t off = 0; off < tokens.size(); off += seq_len) {
        std::vector<int32_t> seq(seq_len, static_cast<int32_t>(kPadId));
        const size_t n = std::min<size_t>(seq_len, tokens.size() - off);
        std::copy(tokens.begin() + off, tokens.begin() + off + n, seq.begin());
        c.sequences.push_back(std::move(seq));
        c.cluster_labels.push_back(-1);
    }
    return c;
}

}  // namespace

Corpus load_text_corpus(const std::string& path, TokenizeMode mode, int64_t seq_len,
                        int64_t max_vocab) {
    if (seq_len < 1) throw Error::config("load_text_corpus: seq_len must be >= 1");
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error::config("load_text_corpus: cannot read '" + path + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    if (text.empty()) {
        throw Error::config("load_text_corpus: empty corpus '" + path + "'");
    }

    if (mode == TokenizeMode::byte) {
        std::vector<int32_t> toks;
        toks.reserve(text.size());
        for (unsigned char ch : text) {
            toks.push_back(static_cast<int32_t>(ch) + kFirstContentId);
        }
        return chunk_tokens(std::move(toks), seq_len, 256 + kFirstContentId);
    }

    // whitespace mode: frequency-capped vocabulary, deterministic ordering
    std::vector<std::string> words;
    std::istringstream ws(text);
    std::string w;
    while (ws >> w) words.push_back(w);
    if (words.empty()) {
        throw Error::config("load_text_corpus: no whitespace tokens in '" + path + "'");
    }
    std::map<std::string, int64_t> freq;
    for (const auto& word : words) ++freq[word];
    std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const int64_t keep = std::min<int64_t>(static_cast<int64_t>(ranked.size()),
                                           std::max<int64_t>(1, max_vocab - kUnkId - 1));
    std::map<std::string, int32_t> ids;
    for (int64_t i = 0; i < keep; ++i) {
        ids[ranked[i].first] = static_cast<int32_t>(kUnkId + 1 + i);
    }
    std::vector<int32_t> toks;
    toks.reserve(words.size());
    for (const auto& word : words) {
        auto it = ids.find(word);
        toks.push_back(it != ids.end() ? it->second : static_cast<int32_t>(kUnkId));
    }
    return chunk_tokens(std::move(toks), seq_len, kUnkId + 1 + keep);
}

std::vector<uint8_t> detokenize_bytes(const Corpus& corpus) {
    std::vector<uint8_t> out;
    for (const auto& seq : corpus.sequences) {
        for (int32_t t : seq) {
            if (t >= kFirstContentId) {
                out.push_back(static_cast<uint8_t>(t - kFirstContentId));
            }
        }
    }
    return out;
}

MaskedBatch mask_tokens(const Corpus& corpus, std::span<const int64_t> seq_indices, Rng& rng,
                        double mask_rate) {
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) {
        throw Error::config("mask_tokens: mask_rate must be in (0, 1)");
    }
    const int64_t T = corpus.seq_len;
    const int64_t B = static_cast<int64_t>(seq_indices.size());
    if (B == 0) {
        throw Error::runtime("mask_tokens: empty batch");
    }
    MaskedBatch mb;
    mb.batch = B;
    mb.seq_len = T;
    mb.input_ids.resize(B * T);
    mb.target_ids.resize(B * T);
    mb.mask_flags.assign(B * T, 0);
    mb.original_ids.resize(B * T);

    const int64_t content = corpus.vocab_size - kFirstContentId;
    for (int64_t b = 0; b < B; ++b) {
        const int64_t si = seq_indices[b];
        if (si < 0 || si >= static_cast<int64_t>(corpus.sequences.size())) {
            throw Error::runtime("mask_tokens: sequence index out of range");
        }
        const auto& seq = corpus.sequences[si];
        std::vector<int64_t> maskable;
        for (int64_t t = 0; t < T; ++t) {
            mb.original_ids[b * T + t] = seq[t];
            mb.target_ids[b * T + t] = seq[t];
            mb.input_ids[b * T + t] = seq[t];
            if (seq[t] >= kFirstContentId) maskable.push_back(t);
        }
        if (maskable.empty()) {
            throw Error::runtime("mask_tokens: no maskable positions in sequence " +
                                 std::to_string(si));
        }

        Rng sr = rng.child("mask.seq", static_cast<uint64_t>(b));
        std::vector<int64_t> chosen;
        for (int attempt = 0; attempt < 64 && chosen.empty(); ++attempt) {
            Rng ar = sr.child("attempt", attempt);
            for (int64_t t : maskable) {
                if (ar.next_double() < mask_rate) chosen.push_back(t);
            }
        }
        if (chosen.empty()) {
            // re-roll floor: force a single position
            chosen.push_back(maskable[sr.child("force").next_below(
                static_cast<int64_t>(maskable.size()))]);
        }

        Rng rr = sr.child("replace");
        for (int64_t t : chosen) {
            mb.mask_flags[b * T + t] = 1;
            const double u = rr.next_double();
            if (u < 0.8) {
                mb.input_ids[b * T + t] = kMaskId;
            } else if (u < 0.9) {
                mb.input_ids[b * T + t] = kFirstContentId + rr.next_below(content);
            }
            // else: keep the original token
        }
    }
    return mb;
}

SplitIndices split_validation(int64_t num_sequences, const Rng& base, double fraction) {
    if (num_sequences < 1) {
        throw Error::runtime("split_validation: no sequences");
    }
    std::vector<int64_t> order(num_sequences);
    for (int64_t i = 0; i < num_sequences; ++i) order[i] = i;
    Rng r = base.child("split");
    for (int64_t i = num_sequences - 1; i > 0; --i) {
        const int64_t j = r.next_below(i + 1);
        std::swap(order[i], order[j]);
    }
    SplitIndices out;
    int64_t n_val = static_cast<int64_t>(fraction * static_cast<double>(num_sequences));
    if (num_sequences >= 2 && n_val == 0) n_val = 1;
    out.val.assign(order.begin(), order.begin() + n_val);
    out.train.assign(order.begin() + n_val, order.end());
    return out;
}

}  // namespace xmoe
