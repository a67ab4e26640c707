#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace memt5 {

// Byte-level BPE vocabulary with T5-style control tokens.
//
// Layout: 0 = <pad>, 1 = </s>, 2 = <unk>, then the byte alphabet seen in the
// training corpus, then merged tokens in creation order, and the 100
// sentinels at the very top of the id range (<extra_id_k> = size-1-k).
//
// Whitespace normalization rule (documented, idempotent): runs of whitespace
// collapse to one space and the ends are trimmed; a word carries its
// preceding space. Training picks merges by pair frequency with ties broken
// by lexicographically smaller pair; encoding greedily merges the adjacent
// pair whose concatenation has the lowest token id. Both are deterministic.
class Vocab {
  public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;
    static constexpr int kNumSentinels = 100;
    static constexpr int kNumReserved = 103;

    int size() const { return int(id_to_token_.size()); }
    int sentinel_id(int k) const;  // id of <extra_id_k>
    bool is_reserved(int id) const;
    const std::string& token(int id) const;
    int find(const std::string& tok) const;  // -1 when absent

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

    // Deterministic BPE training over raw text. Throws DataError when the
    // corpus is empty or cannot support vocab_size (reporting what it can).
    static Vocab train_from_text(const std::string& corpus, int vocab_size);
    static Vocab train_from_files(const std::vector<std::string>& paths, int vocab_size);

    static std::string normalize_ws(const std::string& text);

    // First merged token (after the byte alphabet), in creation order.
    std::vector<std::string> merge_tokens() const;

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
    int alphabet_end_ = 0;  // ids [kNumReserved-100... see build()] — first id after the byte alphabet

    void build_index();
    std::vector<int> encode_word(const std::string& word) const;
    friend struct VocabBuilder;
};

}  // namespace memt5
