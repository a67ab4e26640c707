#include "memt5/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include "memt5/error.hpp"

namespace memt5 {

namespace {

const char* kPadTok = "<pad>";
const char* kEosTok = "</s>";
const char* kUnkTok = "<unk>";

std::string sentinel_token(int k) { return "<extra_id_" + std::to_string(k) + ">"; }

bool is_ws(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Matches a reserved literal at text[pos]; returns its length or 0.
size_t match_special(const std::string& text, size_t pos, std::string* tok) {
    if (text[pos] != '<') return 0;
    for (const char* lit : {kPadTok, kEosTok, kUnkTok}) {
        size_t n = std::strlen(lit);
        if (text.compare(pos, n, lit) == 0) {
            *tok = lit;
            return n;
        }
    }
    const std::string prefix = "<extra_id_";
    if (text.compare(pos, prefix.size(), prefix) == 0) {
        size_t i = pos + prefix.size(), start = i;
        while (i < text.size() && std::isdigit(uint8_t(text[i]))) ++i;
        if (i > start && i - start <= 2 && i < text.size() && text[i] == '>') {
            int k = std::stoi(text.substr(start, i - start));
            if (k < 100) {
                *tok = text.substr(pos, i + 1 - pos);
                return i + 1 - pos;
            }
        }
    }
    return 0;
}

std::string escape_token(const std::string& t) {
    std::string out;
    for (unsigned char c : t) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (c < 0x21 || c == 0x7f || c >= 0x80) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\x%02x", c);
                    out += buf;
                } else {
                    out += char(c);
                }
        }
    }
    return out;
}

std::string unescape_token(const std::string& t, int line_no) {
    std::string out;
    for (size_t i = 0; i < t.size(); ++i) {
        if (t[i] != '\\') {
            out += t[i];
            continue;
        }
        if (i + 1 >= t.size()) throw DataError("vocab file: dangling escape on line " + std::to_string(line_no));
        char c = t[++i];
        switch (c) {
            case '\\': out += '\\'; break;
            case 'n': out += '\n'; break;
            case 'r': out += '\r'; break;
            case 't': out += '\t'; break;
            case 'x': {
                if (i + 2 >= t.size()) throw DataError("vocab file: bad \\x escape on line " + std::to_string(line_no));
                int v = std::stoi(t.substr(i + 1, 2), nullptr, 16);
                out += char(v);
                i += 2;
                break;
            }
            default: throw DataError("vocab file: unknown escape on line " + std::to_string(line_no));
        }
    }
    return out;
}

// Split normalized segment text into words; each non-initial word carries
// its preceding space, and a dangling final space becomes its own word.
std::vector<std::string> split_words(const std::string& seg) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : seg) {
        if (c == ' ') {
            if (!cur.empty() && cur != " ") words.push_back(cur);
            cur = " ";
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

// Collapse whitespace runs; trim ends only where asked (segments adjacent to
// reserved literals keep their boundary space).
std::string collapse_ws(const std::string& s, bool trim_front, bool trim_back) {
    std::string out;
    bool in_ws = false;
    for (char c : s) {
        if (is_ws(c)) {
            in_ws = true;
        } else {
            if (in_ws && !(out.empty() && trim_front)) out += ' ';
            in_ws = false;
            out += c;
        }
    }
    if (in_ws && !trim_back && !(out.empty() && trim_front)) out += ' ';
    return out;
}

struct Piece {
    bool special = false;
    int special_id = -1;
    std::string text;
};

}  // namespace

std::string Vocab::normalize_ws(const std::string& text) { return collapse_ws(text, true, true); }

int Vocab::sentinel_id(int k) const {
    if (k < 0 || k >= kNumSentinels) throw Error("sentinel index out of range: " + std::to_string(k));
    return size() - 1 - k;
}

bool Vocab::is_reserved(int id) const {
    return id < kNumReserved - kNumSentinels || id >= size() - kNumSentinels;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) throw DataError("token id out of range: " + std::to_string(id));
    return id_to_token_[size_t(id)];
}

int Vocab::find(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? -1 : it->second;
}

void Vocab::build_index() {
    token_to_id_.clear();
    for (int i = 0; i < size(); ++i) {
        if (!token_to_id_.emplace(id_to_token_[size_t(i)], i).second)
            throw DataError("vocab: duplicate token '" + escape_token(id_to_token_[size_t(i)]) + "'");
    }
}

std::vector<int> Vocab::encode_word(const std::string& word) const {
    // symbols start as single bytes; unknown bytes become <unk>
    struct Sym {
        std::string s;
        int id;
    };
    std::vector<Sym> syms;
    for (char c : word) {
        std::string b(1, c);
        syms.push_back({b, find(b)});
    }
    int sentinel_floor = size() - kNumSentinels;
    while (syms.size() > 1) {
        int best_id = -1, best_pos = -1;
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
            if (syms[i].id < 0 || syms[i + 1].id < 0) continue;
            int id = find(syms[i].s + syms[i + 1].s);
            // reserved tokens are never produced by merges
            if (id < kNumReserved - kNumSentinels || id >= sentinel_floor) continue;
            if (id >= 0 && (best_id < 0 || id < best_id)) {
                best_id = id;
                best_pos = int(i);
            }
        }
        if (best_id < 0) break;
        syms[size_t(best_pos)].s += syms[size_t(best_pos) + 1].s;
        syms[size_t(best_pos)].id = best_id;
        syms.erase(syms.begin() + best_pos + 1);
    }
    std::vector<int> out;
    for (const auto& s : syms) out.push_back(s.id < 0 ? kUnk : s.id);
    return out;
}

std::vector<int> Vocab::encode(const std::string& text) const {
    // split around reserved literals first
    std::vector<Piece> pieces;
    std::string cur;
    for (size_t i = 0; i < text.size();) {
        std::string tok;
        size_t n = match_special(text, i, &tok);
        if (n) {
            if (!cur.empty()) pieces.push_back({false, -1, cur});
            cur.clear();
            int id = find(tok);
            pieces.push_back({true, id, tok});
            i += n;
        } else {
            cur += text[i++];
        }
    }
    if (!cur.empty()) pieces.push_back({false, -1, cur});

    std::vector<int> ids;
    for (size_t p = 0; p < pieces.size(); ++p) {
        if (pieces[p].special) {
            ids.push_back(pieces[p].special_id);
            continue;
        }
        std::string seg = collapse_ws(pieces[p].text, p == 0, p + 1 == pieces.size());
        for (const auto& w : split_words(seg)) {
            auto wi = encode_word(w);
            ids.insert(ids.end(), wi.begin(), wi.end());
        }
    }
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) out += token(id);
    return out;
}

void Vocab::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write vocab file: " + path);
    f << "memt5-vocab v1 " << size() << "\n";
    for (const auto& t : id_to_token_) f << escape_token(t) << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read vocab file: " + path);
    std::string header;
    std::getline(f, header);
    std::istringstream hs(header);
    std::string magic, version;
    int n = 0;
    hs >> magic >> version >> n;
    if (magic != "memt5-vocab" || version != "v1" || n <= 0)
        throw DataError("bad vocab file header in " + path);
    Vocab v;
    std::string line;
    int line_no = 1;
    while (int(v.id_to_token_.size()) < n && std::getline(f, line)) {
        ++line_no;
        v.id_to_token_.push_back(unescape_token(line, line_no));
    }
    if (int(v.id_to_token_.size()) != n)
        throw DataError("vocab file truncated: expected " + std::to_string(n) + " tokens in " + path);
    if (v.id_to_token_[0] != kPadTok || v.id_to_token_[1] != kEosTok || v.id_to_token_[2] != kUnkTok)
        throw DataError("vocab file: reserved tokens out of place in " + path);
    for (int k = 0; k < kNumSentinels; ++k)
        if (v.id_to_token_[size_t(n - 1 - k)] != sentinel_token(k))
            throw DataError("vocab file: sentinel tokens out of place in " + path);
    v.build_index();
    return v;
}

// ---------------------------------------------------------------------------
// Training

namespace {

using SymSeq = std::vector<int>;  // indices into the growing token table

struct PairKey {
    int a, b;
    bool operator==(const PairKey& o) const { return a == o.a && b == o.b; }
};
struct PairHash {
    size_t operator()(const PairKey& k) const { return size_t(k.a) * 1000003u + size_t(k.b); }
};

struct HeapEntry {
    int64_t count;
    std::string left, right;
    PairKey key;
};
struct HeapLess {
    // max-heap on count; ties prefer the lexicographically smaller pair
    bool operator()(const HeapEntry& x, const HeapEntry& y) const {
        if (x.count != y.count) return x.count < y.count;
        if (x.left != y.left) return x.left > y.left;
        return x.right > y.right;
    }
};

}  // namespace

Vocab Vocab::train_from_text(const std::string& corpus, int vocab_size) {
    if (vocab_size <= kNumReserved)
        throw DataError("vocab_size must exceed the " + std::to_string(kNumReserved) + " reserved tokens");

    // word frequency table; reserved literals are dropped from the stream
    std::unordered_map<std::string, int64_t> word_count;
    {
        std::string cur;
        size_t i = 0;
        std::vector<std::string> segments;
        while (i < corpus.size()) {
            std::string tok;
            size_t n = match_special(corpus, i, &tok);
            if (n) {
                if (!cur.empty()) segments.push_back(cur);
                cur.clear();
                i += n;
            } else {
                cur += corpus[i++];
            }
        }
        if (!cur.empty()) segments.push_back(cur);
        for (auto& seg : segments)
            for (const auto& w : split_words(normalize_ws(seg)))
                if (!w.empty()) ++word_count[w];
    }
    if (word_count.empty()) throw DataError("tokenizer training corpus is empty");

    // deterministic word order
    std::vector<std::pair<std::string, int64_t>> words(word_count.begin(), word_count.end());
    std::sort(words.begin(), words.end());

    // byte alphabet
    std::set<unsigned char> alpha_set;
    for (const auto& [w, c] : words)
        for (unsigned char b : w) alpha_set.insert(b);

    std::vector<std::string> table;  // training token table: alphabet then merges
    std::unordered_map<std::string, int> table_idx;
    for (unsigned char b : alpha_set) {
        table.emplace_back(1, char(b));
        table_idx[table.back()] = int(table.size()) - 1;
    }
    int64_t needed_base = kNumReserved + int64_t(table.size());
    if (needed_base > vocab_size)
        throw DataError("corpus alphabet needs vocab_size >= " + std::to_string(needed_base) + ", got " +
                        std::to_string(vocab_size));
    int merges_target = vocab_size - int(needed_base);

    std::vector<SymSeq> seqs(words.size());
    for (size_t i = 0; i < words.size(); ++i)
        for (char c : words[i].first) seqs[i].push_back(table_idx[std::string(1, c)]);

    std::unordered_map<PairKey, int64_t, PairHash> pair_count;
    std::unordered_map<PairKey, std::set<int>, PairHash> pair_words;
    auto count_word_pairs = [&](int wi, int64_t sign) {
        const auto& s = seqs[size_t(wi)];
        int64_t c = words[size_t(wi)].second * sign;
        for (size_t i = 0; i + 1 < s.size(); ++i) {
            PairKey k{s[i], s[i + 1]};
            pair_count[k] += c;
            if (sign > 0) pair_words[k].insert(wi);
        }
    };
    for (size_t i = 0; i < words.size(); ++i) count_word_pairs(int(i), +1);

    std::priority_queue<HeapEntry, std::vector<HeapEntry>, HeapLess> heap;
    for (const auto& [k, c] : pair_count)
        if (c > 0) heap.push({c, table[size_t(k.a)], table[size_t(k.b)], k});

    int merges_done = 0;
    std::set<std::string> reserved;
    reserved.insert(kPadTok);
    reserved.insert(kEosTok);
    reserved.insert(kUnkTok);
    for (int k = 0; k < kNumSentinels; ++k) reserved.insert(sentinel_token(k));

    while (merges_done < merges_target) {
        PairKey best{-1, -1};
        int64_t best_count = 0;
        while (!heap.empty()) {
            HeapEntry e = heap.top();
            heap.pop();
            auto it = pair_count.find(e.key);
            if (it == pair_count.end() || it->second != e.count || it->second <= 0) continue;  // stale
            best = e.key;
            best_count = e.count;
            break;
        }
        if (best.a < 0) break;  // no pairs left

        std::string merged = table[size_t(best.a)] + table[size_t(best.b)];
        if (reserved.count(merged) || table_idx.count(merged)) {
            // never mint a reserved literal or duplicate; drop this pair
            pair_count.erase(best);
            pair_words.erase(best);
            continue;
        }
        int new_id = int(table.size());
        table.push_back(merged);
        table_idx[merged] = new_id;

        auto affected_it = pair_words.find(best);
        std::vector<int> affected(affected_it->second.begin(), affected_it->second.end());
        for (int wi : affected) {
            auto& s = seqs[size_t(wi)];
            bool contains = false;
            for (size_t i = 0; i + 1 < s.size(); ++i)
                if (s[i] == best.a && s[i + 1] == best.b) {
                    contains = true;
                    break;
                }
            if (!contains) continue;
            count_word_pairs(wi, -1);
            SymSeq out;
            out.reserve(s.size());
            for (size_t i = 0; i < s.size();) {
                if (i + 1 < s.size() && s[i] == best.a && s[i + 1] == best.b) {
                    out.push_back(new_id);
                    i += 2;
                } else {
                    out.push_back(s[i]);
                    ++i;
                }
            }
            s = std::move(out);
            count_word_pairs(wi, +1);
            // refresh heap entries for this word's pairs
            for (size_t i = 0; i + 1 < s.size(); ++i) {
                PairKey k{s[i], s[i + 1]};
                auto pc = pair_count.find(k);
                if (pc != pair_count.end() && pc->second > 0)
                    heap.push({pc->second, table[size_t(k.a)], table[size_t(k.b)], k});
            }
        }
        pair_count.erase(best);
        pair_words.erase(best);
        ++merges_done;
    }

    if (merges_done < merges_target) {
        int achievable = int(needed_base) + merges_done;
        throw DataError("corpus too small to reach vocab size " + std::to_string(vocab_size) +
                        "; achievable size is " + std::to_string(achievable));
    }

    Vocab v;
    v.id_to_token_.reserve(size_t(vocab_size));
    v.id_to_token_.push_back(kPadTok);
    v.id_to_token_.push_back(kEosTok);
    v.id_to_token_.push_back(kUnkTok);
    for (const auto& t : table) v.id_to_token_.push_back(t);
    for (int k = kNumSentinels - 1; k >= 0; --k) v.id_to_token_.push_back(sentinel_token(k));
    v.alphabet_end_ = 3 + int(alpha_set.size());
    v.build_index();
    return v;
}

Vocab Vocab::train_from_files(const std::vector<std::string>& paths, int vocab_size) {
    std::string all;
    for (const auto& p : paths) {
        std::ifstream f(p, std::ios::binary);
        if (!f) throw DataError("cannot read corpus file: " + p);
        std::stringstream ss;
        ss << f.rdbuf();
        all += ss.str();
        all += '\n';
    }
    return train_from_text(all, vocab_size);
}

std::vector<std::string> Vocab::merge_tokens() const {
    // merges live between the alphabet and the sentinels; alphabet tokens are
    // the single-byte entries right after the three control tokens
    std::vector<std::string> out;
    int i = 3;
    while (i < size() - kNumSentinels && id_to_token_[size_t(i)].size() == 1) ++i;
    for (; i < size() - kNumSentinels; ++i) out.push_back(id_to_token_[size_t(i)]);
    return out;
}

}  // namespace memt5
