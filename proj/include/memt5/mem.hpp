#pragma once

#include <vector>

#include "memt5/chunking.hpp"
#include "memt5/model_core.hpp"

// Chunked-input machinery: memory-slot prefixes, the MemAttention mask and
// kernel, the chunk selector, and the without-selector (WS) cross-attention.

namespace memt5 {

template <typename S>
struct EncoderOutput {
    Tensor<S> chunk_states;  // [batch, n, chunk_len, d_model]
    Tensor<S> memory;        // [batch, n, M, d_model]; undefined when M == 0
    int n_chunks = 0;
    int chunk_len = 0;
    int mem_tokens = 0;

    Tensor<S> memory_all_chunks() const {  // [batch, n*M, d_model]
        return reshape(memory, {memory.dim(0), int64_t(n_chunks) * mem_tokens, memory.dim(3)});
    }
    Tensor<S> tokens_flat() const {  // [batch, n*chunk_len, d_model]
        return reshape(chunk_states, {chunk_states.dim(0), int64_t(n_chunks) * chunk_len, chunk_states.dim(3)});
    }
};

// Prefix each chunk's token embeddings with the learned memory embeddings
// (identical initial values in every chunk). M = 0 degenerates to the
// plain embeddings.
template <typename S>
Tensor<S> prefix_memory(const Tensor<S>& embedded, const Tensor<S>& mem_init) {
    if (!mem_init.defined() || mem_init.numel() == 0 || mem_init.dim(0) == 0) return embedded;
    int64_t b = embedded.dim(0), n = embedded.dim(1);
    int64_t m = mem_init.dim(0);
    std::vector<int> idx(size_t(b * n * m));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(int64_t(i) % m);
    Tensor<S> tiled = embedding_lookup(mem_init, idx, {b, n, m});
    std::vector<Tensor<S>> parts{tiled, embedded};
    return concat(parts, 2);
}

// Attention pattern over the augmented per-chunk layout [M memory rows |
// chunk_len token rows] * n chunks:
//   - token queries see their own chunk's real tokens and their own slot;
//   - memory queries see their own chunk's real tokens and every memory
//     row of every chunk (the global exchange channel);
//   - nothing else; padding keys are masked everywhere.
// `real` is the per-example pad mask [batch, n, chunk_len]; pass empty for
// an unpadded (batch-independent) mask.
inline Mask build_mem_attention_mask(int n, int chunk_len, int m, const std::vector<uint8_t>& real = {},
                                     int batch = 1) {
    int64_t span = m + chunk_len;
    int64_t t = int64_t(n) * span;
    int b = real.empty() ? 1 : batch;
    Mask mask;
    mask.shape = {b, 1, t, t};  // head axis broadcasts
    mask.v.assign(size_t(b * t * t), 0);
    for (int bi = 0; bi < b; ++bi) {
        uint8_t* mv = mask.v.data() + int64_t(bi) * t * t;
        for (int64_t q = 0; q < t; ++q) {
            int cq = int(q / span);
            bool q_mem = (q % span) < m;
            for (int64_t k = 0; k < t; ++k) {
                int ck = int(k / span);
                int64_t pk = k % span;
                bool k_mem = pk < m;
                bool ok;
                if (k_mem) {
                    ok = q_mem ? true : (cq == ck);
                } else {
                    bool k_real = real.empty() ||
                                  real[size_t((int64_t(bi) * n + ck) * chunk_len + (pk - m))] != 0;
                    ok = (cq == ck) && k_real;
                }
                if (ok) mv[q * t + k] = 1;
            }
        }
    }
    return mask;
}

// MemAttention: a separate query projection for memory rows, shared keys
// and values for all rows, then ordinary masked multi-head attention.
template <typename S>
Tensor<S> mem_attention(const Tensor<S>& x, const AttentionParams<S>& p, const Mask& mask,
                        const Tensor<S>* pos_bias, const std::vector<uint8_t>& row_is_memory) {
    if (!p.wq_mem) throw ConfigError("mem_attention: W^Q_mem is not configured");
    int64_t b = x.dim(0), t = x.dim(1);
    if (int64_t(row_is_memory.size()) != t) throw ShapeError("mem_attention: row flags do not match sequence");

    Tensor<S> q_tok = matmul(x, *p.wq);
    Tensor<S> q_mem = matmul(x, *p.wq_mem);
    std::vector<S> sel(size_t(t));
    for (int64_t i = 0; i < t; ++i) sel[size_t(i)] = row_is_memory[size_t(i)] ? S(1) : S(0);
    Tensor<S> sel_t = Tensor<S>::from_data({1, t, 1}, sel);
    std::vector<S> inv(sel);
    for (auto& v : inv) v = S(1) - v;
    Tensor<S> inv_t = Tensor<S>::from_data({1, t, 1}, inv);
    Tensor<S> q_in = add(mul(q_mem, sel_t), mul(q_tok, inv_t));

    Tensor<S> q = split_heads(q_in, p.heads);
    Tensor<S> k = split_heads(matmul(x, *p.wk), p.heads);
    Tensor<S> v = split_heads(matmul(x, *p.wv), p.heads);
    Tensor<S> scores = matmul(q, transpose_last2(k));
    if (pos_bias) scores = add(scores, *pos_bias);
    Tensor<S> probs = masked_softmax(scores, mask);
    Tensor<S> ctx = merge_heads(matmul(probs, v));
    (void)b;
    return matmul(ctx, *p.wo);
}

// Two-level soft attention replacing encoder output as the decoder's
// cross-attention source. Level 1 scores each chunk by log-sum-exp of the
// query against that chunk's memory keys, softmaxed over chunks; level 2 is
// token attention within each chunk; the products are renormalized over all
// real tokens. Reduces exactly to plain cross-attention at n = 1.
template <typename S>
Tensor<S> selector_cross_attention(const Tensor<S>& dec_states, const EncoderOutput<S>& enc,
                                   const std::vector<uint8_t>& real, const AttentionParams<S>& p) {
    int64_t b = dec_states.dim(0), tq = dec_states.dim(1);
    int64_t n = enc.n_chunks, len = enc.chunk_len, m = enc.mem_tokens;
    if (m < 1) throw ConfigError("selector_cross_attention: requires mem_tokens >= 1");

    Tensor<S> q = split_heads(matmul(dec_states, *p.wq), p.heads);

    // level 1: chunk scores from memory keys
    Tensor<S> mem_k = split_heads(matmul(enc.memory_all_chunks(), *p.wk), p.heads);  // [b,h,n*m,dk]
    Tensor<S> chunk_scores =
        reshape(logsumexp_last(reshape(matmul(q, transpose_last2(mem_k)), {b, p.heads, tq, n, m})),
                {b, p.heads, tq, n});

    // chunks with no real token are excluded from the chunk softmax
    std::vector<uint8_t> chunk_has_real(size_t(b * n), 0);
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t c = 0; c < n; ++c)
            for (int64_t t = 0; t < len; ++t)
                if (real[size_t((bi * n + c) * len + t)]) {
                    chunk_has_real[size_t(bi * n + c)] = 1;
                    break;
                }
    Mask chunk_mask;
    chunk_mask.shape = {b, 1, 1, n};
    chunk_mask.v = chunk_has_real;
    Tensor<S> w = masked_softmax(chunk_scores, chunk_mask);  // [b,h,tq,n]

    // level 2: token attention within each chunk; fully padded chunks get a
    // dummy key that the zero chunk weight annihilates exactly
    Tensor<S> tok_k = split_heads(matmul(enc.tokens_flat(), *p.wk), p.heads);  // [b,h,n*len,dk]
    Tensor<S> tok_scores = reshape(matmul(q, transpose_last2(tok_k)), {b, p.heads, tq, n, len});
    Mask tok_mask;
    tok_mask.shape = {b, 1, 1, n, len};
    tok_mask.v = real;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t c = 0; c < n; ++c)
            if (!chunk_has_real[size_t(bi * n + c)]) tok_mask.v[size_t((bi * n + c) * len)] = 1;
    Tensor<S> a = masked_softmax(tok_scores, tok_mask);  // [b,h,tq,n,len]

    Tensor<S> weights = mul(a, reshape(w, {b, p.heads, tq, n, 1}));
    Tensor<S> flat = reshape(weights, {b, p.heads, tq, n * len});
    Tensor<S> norm = div(flat, sum_last(flat));

    Tensor<S> v = split_heads(matmul(enc.tokens_flat(), *p.wv), p.heads);  // [b,h,n*len,dk]
    Tensor<S> ctx = merge_heads(matmul(norm, v));
    return matmul(ctx, *p.wo);
}

// Without-selector cross-attention: keys/values are exactly the n*M
// concatenated memory states; chunk token states are invisible here, so the
// cost is independent of chunk_len.
template <typename S>
Tensor<S> ws_cross_attention(const Tensor<S>& dec_states, const EncoderOutput<S>& enc,
                             const AttentionParams<S>& p) {
    if (enc.mem_tokens < 1)
        throw ConfigError("ws_cross_attention: mem_tokens == 0 leaves the decoder without context");
    Tensor<S> kv = enc.memory_all_chunks();
    Mask all = Mask::all_true({1, 1, kv.dim(1)});
    return attention(dec_states, kv, kv, p, all, nullptr);
}

}  // namespace memt5
