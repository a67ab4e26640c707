#pragma once

#include <string>

#include "memt5/error.hpp"

namespace memt5 {

// Baseline is plain T5. Mem adds chunked input with memory slots and the
// chunk selector. MemWS drops the selector (decoder cross-attends to the
// concatenated memory states). MemWSWMA additionally uses a single shared
// query projection in the encoder instead of MemAttention.
enum class Variant { Baseline, Mem, MemWS, MemWSWMA };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Baseline: return "baseline";
        case Variant::Mem: return "mem";
        case Variant::MemWS: return "mem_ws";
        case Variant::MemWSWMA: return "mem_ws_wma";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "baseline") return Variant::Baseline;
    if (s == "mem") return Variant::Mem;
    if (s == "mem_ws") return Variant::MemWS;
    if (s == "mem_ws_wma") return Variant::MemWSWMA;
    throw ConfigError("unknown variant '" + s + "' (baseline|mem|mem_ws|mem_ws_wma)");
}

struct ModelConfig {
    int d_model = 512;
    int heads = 8;
    int d_k = 64;
    int d_ff = 2048;
    int num_layers = 2;
    int vocab_size = 32000;
    double dropout = 0.1;
    Variant variant = Variant::Baseline;
    int n_chunks = 1;
    int chunk_len = 512;
    int mem_tokens = 0;  // per-chunk memory slot size M
    int relpos_buckets = 32;
    int relpos_max_distance = 128;
    bool tie_embeddings = false;

    int source_len() const { return n_chunks * chunk_len; }
    bool uses_memory() const { return variant != Variant::Baseline; }
    // separate W^Q for memory rows (MemAttention); WMA shares one W^Q
    bool separate_mem_query() const { return variant == Variant::Mem || variant == Variant::MemWS; }

    void validate() const {
        if (d_model != heads * d_k)
            throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal heads*d_k (" +
                              std::to_string(heads * d_k) + ")");
        if (variant == Variant::Baseline && (n_chunks != 1 || mem_tokens != 0))
            throw ConfigError("baseline variant requires n_chunks=1 and mem_tokens=0");
        if (variant != Variant::Baseline && mem_tokens < 1)
            throw ConfigError(variant_name(variant) + " variant requires mem_tokens >= 1");
        if (n_chunks < 1 || chunk_len < 1) throw ConfigError("n_chunks and chunk_len must be positive");
        if (num_layers < 1 || vocab_size < 1) throw ConfigError("num_layers and vocab_size must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
        if (relpos_buckets < 2) throw ConfigError("relpos_buckets must be >= 2");
    }
};

}  // namespace memt5
