#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "mlmp/bpe.hpp"
#include "testutil.hpp"

using namespace mlmp;

namespace {

std::vector<Document> one_doc(std::vector<std::string> sentences) {
  Document d;
  d.id = 0;
  d.sentences = std::move(sentences);
  return {d};
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("first merge on aaabdaaabac is (a,a)") {
  const auto vocab = train_bpe(one_doc({"aaabdaaabac"}), 256 + 5 + 3);
  REQUIRE(!vocab.merges.empty());
  CHECK(vocab.expansions[vocab.merges[0].first] == "a");
  CHECK(vocab.expansions[vocab.merges[0].second] == "a");
  // cross-checked against the recount-every-merge oracle
  const auto oracle = testutil::oracle_train_bpe(one_doc({"aaabdaaabac"}), 256 + 5 + 3);
  REQUIRE(oracle.merges.size() == vocab.merges.size());
  for (size_t i = 0; i < oracle.merges.size(); ++i) CHECK(oracle.merges[i] == vocab.merges[i]);
}

TEST_CASE("empty corpus trains to base plus specials with zero merges") {
  const auto vocab = train_bpe({}, 300);
  CHECK(vocab.merges.empty());
  CHECK(vocab.size() == 256 + kNumSpecials);
  CHECK(vocab.text_count() == 256);
}

TEST_CASE("repeated word merges to a single token") {
  const auto vocab = train_bpe(one_doc({"abab abab", "abab abab"}), 256 + 5 + 8);
  const auto ids = encode(vocab, "abab");
  CHECK(ids.size() == 1);
  CHECK(vocab.expansions[ids[0]] == "abab");
}

TEST_CASE("target size below minimum is an argument error") {
  CHECK_THROWS_AS(train_bpe({}, 260), std::invalid_argument);
}

TEST_CASE("trainer matches the brute-force oracle on random corpora") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed + 100);
    const auto docs = testutil::random_corpus(rng, 4, 6, 8);
    const auto vocab = train_bpe(docs, 256 + 5 + 40);
    const auto oracle = testutil::oracle_train_bpe(docs, 256 + 5 + 40);
    REQUIRE(vocab.merges.size() == oracle.merges.size());
    for (size_t i = 0; i < vocab.merges.size(); ++i) {
      INFO("seed " << seed << " merge " << i);
      CHECK(vocab.merges[i] == oracle.merges[i]);
    }
  }
}

TEST_CASE("encode of empty text is empty") {
  const auto vocab = Vocab::bytes_only();
  CHECK(encode(vocab, "").empty());
}

TEST_CASE("with zero merges every byte is its own token") {
  const auto vocab = Vocab::bytes_only();
  const auto ids = encode(vocab, "hi");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == static_cast<uint32_t>('h'));
  CHECK(ids[1] == static_cast<uint32_t>('i'));
}

TEST_CASE("decode(encode(x)) == x on arbitrary byte strings") {
  const auto docs = one_doc({"the quick brown fox jumps over the lazy dog",
                             "pack my box with five dozen liquor jugs"});
  const auto vocab = train_bpe(docs, 256 + 5 + 30);
  Rng rng(7);
  for (int iter = 0; iter < 200; ++iter) {
    const auto text = testutil::random_bytes(rng, rng.below(300));
    const auto ids = encode(vocab, text);
    for (uint32_t id : ids) CHECK(!vocab.is_special(id));
    CHECK(decode(vocab, ids) == text);
  }
}

TEST_CASE("token count is non-increasing as merges are appended") {
  const std::string text = "interesting tokenization interests interested parties";
  const auto full = train_bpe(one_doc({text, text}), 256 + 5 + 30);
  size_t prev = encode(Vocab::bytes_only(), text).size();
  for (size_t upto = 1; upto <= full.merges.size(); ++upto) {
    Vocab partial = Vocab::bytes_only();
    for (size_t r = 0; r < upto; ++r) {
      const auto [l, rgt] = full.merges[r];
      partial.ranks.emplace(Vocab::pair_key(l, rgt), static_cast<uint32_t>(r));
      partial.merges.emplace_back(l, rgt);
      partial.expansions.push_back(partial.expansions[l] + partial.expansions[rgt]);
    }
    const size_t count = encode(partial, text).size();
    CHECK(count <= prev);
    prev = count;
  }
}

TEST_CASE("decode renders specials as literal markers") {
  const auto vocab = Vocab::bytes_only();
  CHECK(decode(vocab, std::vector<uint32_t>{vocab.mask_id()}) == "[MASK]");
  CHECK(decode(vocab, std::vector<uint32_t>{vocab.cls(), vocab.sep(), vocab.eos(),
                                            vocab.pad()}) == "[CLS][SEP][EOS][PAD]");
  CHECK(decode(vocab, std::vector<uint32_t>{}).empty());
}

TEST_CASE("decode of an unknown id names the id") {
  const auto vocab = Vocab::bytes_only();
  try {
    decode(vocab, std::vector<uint32_t>{99999});
    FAIL("expected data_error");
  } catch (const data_error& e) {
    CHECK(std::string(e.what()).find("99999") != std::string::npos);
  }
}

TEST_CASE("pre-split attaches one preceding space to the following word") {
  auto words = pre_split("a bb  cc");
  REQUIRE(words.size() == 4);
  CHECK(words[0] == "a");
  CHECK(words[1] == " bb");
  CHECK(words[2] == " ");
  CHECK(words[3] == " cc");
  // concatenation restores the input
  std::string joined;
  for (auto w : pre_split("  tab\there \n mixed")) joined += std::string(w);
  CHECK(joined == "  tab\there \n mixed");
}

TEST_CASE("vocab file round-trips structurally") {
  Rng rng(9);
  const auto docs = testutil::random_corpus(rng, 6, 6, 10);
  const auto vocab = train_bpe(docs, 256 + 5 + 64);
  const auto path = temp_path("mlmp_vocab_roundtrip.bbpe");
  save_vocab(vocab, path);
  const auto loaded = load_vocab(path);
  CHECK(loaded.size() == vocab.size());
  REQUIRE(loaded.merges.size() == vocab.merges.size());
  for (size_t i = 0; i < vocab.merges.size(); ++i) CHECK(loaded.merges[i] == vocab.merges[i]);
  CHECK(loaded.expansions == vocab.expansions);
  std::remove(path.c_str());
}

TEST_CASE("duplicate merge line is a parse error with a line number") {
  const auto path = temp_path("mlmp_vocab_dup.bbpe");
  testutil::write_file(path,
                       "bbpe v1 263\na b\na b\nspecials\n[CLS] 258\n[SEP] 259\n[EOS] 260\n"
                       "[MASK] 261\n[PAD] 262\n");
  try {
    load_vocab(path);
    FAIL("expected data_error");
  } catch (const data_error& e) {
    const std::string what = e.what();
    CHECK(what.find("line 3") != std::string::npos);
    CHECK(what.find("duplicate") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("missing specials section is a parse error") {
  const auto path = temp_path("mlmp_vocab_nospecials.bbpe");
  testutil::write_file(path, "bbpe v1 262\na b\n");
  CHECK_THROWS_AS(load_vocab(path), data_error);
  std::remove(path.c_str());
}

TEST_CASE("special ids sit above all text ids") {
  const auto vocab = train_bpe(one_doc({"some words to merge merge merge"}), 256 + 5 + 10);
  CHECK(vocab.cls() == vocab.text_count());
  CHECK(vocab.pad() == vocab.size() - 1);
  CHECK(vocab.is_special(vocab.mask_id()));
  CHECK(!vocab.is_special(vocab.text_count() - 1));
  // ranks dense 0..merges-1
  for (size_t r = 0; r < vocab.merges.size(); ++r) {
    const auto [l, rgt] = vocab.merges[r];
    REQUIRE(vocab.ranks.at(Vocab::pair_key(l, rgt)) == r);
  }
}
