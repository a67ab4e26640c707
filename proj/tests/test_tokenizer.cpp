#include "memt5/tokenizer.hpp"

#include <cstdio>
#include <random>

#include "doctest.h"
#include "memt5/error.hpp"

using namespace memt5;

TEST_CASE("bpe merges the most frequent pair first") {
    // "aa" occurs 6 times, the space-a pair once
    auto v = Vocab::train_from_text("aaaa aaaa", 103 + 2 + 2);
    auto merges = v.merge_tokens();
    REQUIRE(merges.size() == 2);
    CHECK(merges[0] == "aa");
    CHECK(merges[1] == "aaaa");
}

TEST_CASE("empty corpus is rejected") {
    CHECK_THROWS_AS(Vocab::train_from_text("", 200), DataError);
    CHECK_THROWS_AS(Vocab::train_from_text("   \n\t ", 200), DataError);
}

TEST_CASE("reserved tokens always present at fixed positions") {
    auto v = Vocab::train_from_text("the quick brown fox jumps over the lazy dog", 140);
    CHECK(v.size() == 140);
    CHECK(v.token(Vocab::kPad) == "<pad>");
    CHECK(v.token(Vocab::kEos) == "</s>");
    CHECK(v.token(Vocab::kUnk) == "<unk>");
    for (int k = 0; k < 100; ++k) {
        CHECK(v.sentinel_id(k) == v.size() - 1 - k);
        CHECK(v.token(v.sentinel_id(k)) == "<extra_id_" + std::to_string(k) + ">");
    }
}

TEST_CASE("too-small corpus reports achievable size") {
    try {
        Vocab::train_from_text("ab ab", 500);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        std::string msg = e.what();
        CHECK(msg.find("achievable size") != std::string::npos);
    }
}

TEST_CASE("encode/decode basics") {
    auto v = Vocab::train_from_text("hello world hello world hello", 118);
    CHECK(v.encode("").empty());
    CHECK(v.decode(v.encode("hello world")) == "hello world");

    // sentinel literal maps to its reserved id
    auto ids = v.encode("<extra_id_0>");
    REQUIRE(ids.size() == 1);
    CHECK(ids[0] == v.sentinel_id(0));

    auto mixed = v.encode("hello <extra_id_5> world");
    CHECK(v.decode(mixed) == "hello <extra_id_5> world");

    CHECK_THROWS_AS(v.decode({v.size()}), DataError);
    CHECK_THROWS_AS(v.decode({-1}), DataError);
}

TEST_CASE("unknown bytes map to unk") {
    auto v = Vocab::train_from_text("abc abc abc", 110);
    auto ids = v.encode("xyz");
    for (int id : ids) CHECK(id == Vocab::kUnk);
}

TEST_CASE("roundtrip on random ascii modulo whitespace normalization") {
    auto v = Vocab::train_from_text(
        "the quick brown fox jumps over the lazy dog again and again with words like "
        "alpha beta gamma delta epsilon zeta eta theta iota kappa . , ! ? with .,!? mixed in",
        150);
    std::mt19937_64 eng(99);
    const std::string chars = "abcdefghij klmnop  qrstuvwxyz .,!?";
    for (int trial = 0; trial < 30; ++trial) {
        std::string s;
        int len = int(eng() % 40);
        for (int i = 0; i < len; ++i) s += chars[eng() % chars.size()];
        std::string norm = Vocab::normalize_ws(s);
        CHECK(Vocab::normalize_ws(norm) == norm);  // idempotent rule
        CHECK(v.decode(v.encode(s)) == norm);
    }
}

TEST_CASE("training is deterministic") {
    std::string corpus =
        "some repeated words make some pairs more frequent than other pairs in some corpus";
    auto v1 = Vocab::train_from_text(corpus, 140);
    auto v2 = Vocab::train_from_text(corpus, 140);
    REQUIRE(v1.size() == v2.size());
    for (int i = 0; i < v1.size(); ++i) CHECK(v1.token(i) == v2.token(i));
}

TEST_CASE("vocab file roundtrip preserves everything") {
    auto v = Vocab::train_from_text("spaces\tand\nnewlines and bytes \x01\x02 here", 140);
    std::string path = "/tmp/memt5_vocab_test.txt";
    v.save(path);
    auto w = Vocab::load(path);
    REQUIRE(w.size() == v.size());
    for (int i = 0; i < v.size(); ++i) CHECK(w.token(i) == v.token(i));
    // encoding behaves identically after reload
    std::string sample = "spaces and bytes";
    CHECK(w.encode(sample) == v.encode(sample));
    std::remove(path.c_str());
}

TEST_CASE("vocab load rejects a corrupt file") {
    std::string path = "/tmp/memt5_vocab_bad.txt";
    {
        FILE* f = fopen(path.c_str(), "w");
        fputs("memt5-vocab v1 9999\n<pad>\n</s>\n<unk>\n", f);
        fclose(f);
    }
    CHECK_THROWS_AS(Vocab::load(path), DataError);
    std::remove(path.c_str());
}
