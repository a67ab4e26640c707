#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memt5/error.hpp"

namespace memt5 {

// Token ids reshaped to (batch, n_chunks, chunk_len); padding only ever sits
// at the tail of the final chunk of each example.
struct ChunkedBatch {
    int batch = 0;
    int n_chunks = 0;
    int chunk_len = 0;
    std::vector<int> ids;        // [batch, n_chunks, chunk_len]
    std::vector<uint8_t> real;   // 1 = actual token, 0 = padding

    int64_t seq_len() const { return int64_t(n_chunks) * chunk_len; }

    int id_at(int b, int c, int p) const {
        return ids[size_t((int64_t(b) * n_chunks + c) * chunk_len + p)];
    }
    bool real_at(int b, int c, int p) const {
        return real[size_t((int64_t(b) * n_chunks + c) * chunk_len + p)] != 0;
    }
};

// Row-major fill of one sequence into n_chunks x chunk_len, padded with
// pad_id. Overlong input is an error unless the caller opts into truncation.
inline ChunkedBatch chunk_input(const std::vector<int>& ids, int chunk_len, int n_chunks, int pad_id,
                                bool allow_truncate = false) {
    if (chunk_len < 1 || n_chunks < 1) throw ConfigError("chunk_input: chunk_len and n_chunks must be positive");
    int64_t capacity = int64_t(chunk_len) * n_chunks;
    if (int64_t(ids.size()) > capacity && !allow_truncate)
        throw DataError("chunk_input: input of " + std::to_string(ids.size()) + " tokens exceeds capacity " +
                        std::to_string(capacity) + " (pass truncate to allow)");
    ChunkedBatch out;
    out.batch = 1;
    out.n_chunks = n_chunks;
    out.chunk_len = chunk_len;
    out.ids.assign(size_t(capacity), pad_id);
    out.real.assign(size_t(capacity), 0);
    size_t n = std::min(size_t(capacity), ids.size());
    for (size_t i = 0; i < n; ++i) {
        out.ids[i] = ids[i];
        out.real[i] = 1;
    }
    return out;
}

inline ChunkedBatch stack_chunked(const std::vector<ChunkedBatch>& rows) {
    if (rows.empty()) throw DataError("stack_chunked: empty batch");
    ChunkedBatch out;
    out.batch = 0;
    out.n_chunks = rows[0].n_chunks;
    out.chunk_len = rows[0].chunk_len;
    for (const auto& r : rows) {
        if (r.n_chunks != out.n_chunks || r.chunk_len != out.chunk_len)
            throw ShapeError("stack_chunked: inconsistent chunk geometry");
        out.batch += r.batch;
        out.ids.insert(out.ids.end(), r.ids.begin(), r.ids.end());
        out.real.insert(out.real.end(), r.real.begin(), r.real.end());
    }
    return out;
}

}  // namespace memt5
