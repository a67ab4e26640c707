#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "memt5/config.hpp"
#include "memt5/ops.hpp"

// Shared T5 building blocks: relative-position bucketing, multi-head
// attention (scores = QK^T + bias, no 1/sqrt(d_k) scaling), and the
// pre-norm residual encoder/decoder sub-blocks.

namespace memt5 {

inline constexpr double kLnEps = 1e-6;

// T5 bucketing of the query-minus-key offset. Exact buckets for small
// offsets, logarithmic up to max_distance, clamped beyond; bidirectional
// mode splits the range by sign.
inline int relative_position_bucket(int rel_pos, bool bidirectional, int num_buckets, int max_distance) {
    int bucket = 0;
    int n = rel_pos;
    if (bidirectional) {
        num_buckets /= 2;
        if (n < 0) {
            bucket += num_buckets;
            n = -n;
        }
    } else {
        n = std::max(n, 0);
    }
    int max_exact = num_buckets / 2;
    if (n < max_exact) return bucket + n;
    int large = max_exact + int(std::log(double(n) / max_exact) / std::log(double(max_distance) / max_exact) *
                                (num_buckets - max_exact));
    return bucket + std::min(large, num_buckets - 1);
}

template <typename S>
struct AttentionParams {
    const Tensor<S>* wq = nullptr;      // query projection for ordinary rows
    const Tensor<S>* wq_mem = nullptr;  // query projection for memory rows (MemAttention only)
    const Tensor<S>* wk = nullptr;
    const Tensor<S>* wv = nullptr;
    const Tensor<S>* wo = nullptr;
    int heads = 1;
};

template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, int heads) {
    int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x) {
    int64_t b = x.dim(0), h = x.dim(1), t = x.dim(2), dk = x.dim(3);
    return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * dk});
}

// Multi-head attention with an optional additive position bias [h, tq, tk].
// `mask` broadcasts against the score shape [batch, h, tq, tk].
template <typename S>
Tensor<S> attention(const Tensor<S>& q_in, const Tensor<S>& k_in, const Tensor<S>& v_in,
                    const AttentionParams<S>& p, const Mask& mask, const Tensor<S>* pos_bias = nullptr) {
    Tensor<S> q = split_heads(matmul(q_in, *p.wq), p.heads);
    Tensor<S> k = split_heads(matmul(k_in, *p.wk), p.heads);
    Tensor<S> v = split_heads(matmul(v_in, *p.wv), p.heads);
    Tensor<S> scores = matmul(q, transpose_last2(k));
    if (pos_bias) scores = add(scores, *pos_bias);
    Tensor<S> probs = masked_softmax(scores, mask);
    Tensor<S> ctx = merge_heads(matmul(probs, v));
    return matmul(ctx, *p.wo);
}

// x + Dropout(sublayer(LN(x))) with T5's RMS norm.
template <typename S>
struct FeedForwardParams {
    const Tensor<S>* w1;
    const Tensor<S>* w2;
};

template <typename S>
Tensor<S> feed_forward(const Tensor<S>& x, const FeedForwardParams<S>& p, double drop, bool training,
                       RngStream* rng) {
    return matmul(dropout(relu(matmul(x, *p.w1)), drop, training, rng), *p.w2);
}

inline Mask causal_mask(int64_t t) {
    Mask m;
    m.shape = {1, t, t};
    m.v.assign(size_t(t * t), 0);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j <= i; ++j) m.v[size_t(i * t + j)] = 1;
    return m;
}

// Learned bias tensor [heads, tq, tk] gathered from a bucket table
// [(num_buckets + 1), heads]; bucket indices are computed by `bucket_fn`.
template <typename S, typename BucketFn>
Tensor<S> gather_position_bias(const Tensor<S>& table, int heads, int64_t tq, int64_t tk, BucketFn bucket_fn) {
    std::vector<int> idx(size_t(tq * tk));
    for (int64_t i = 0; i < tq; ++i)
        for (int64_t j = 0; j < tk; ++j) idx[size_t(i * tk + j)] = bucket_fn(int(i), int(j));
    Tensor<S> rows = embedding_lookup(table, idx, {tq, tk});
    return permute(rows, {2, 0, 1});
}

}  // namespace memt5
