#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <set>

#include "mlmp/packing.hpp"
#include "testutil.hpp"

using namespace mlmp;

namespace {

Vocab fixture_vocab() {
  Rng rng(555);
  const auto docs = testutil::random_corpus(rng, 10, 8, 10);
  return train_bpe(docs, 256 + 5 + 48);
}

// Independent greedy re-implementation of FULL-SENTENCES packing that only
// counts instances: append sentence lengths, +1 for a SEP at document
// changes, close at body budget T-2 with the same split-or-carry rule.
size_t oracle_full_sentence_count(const std::vector<TokenizedDocument>& docs, uint32_t T) {
  const size_t budget = T - 2;
  size_t count = 0, fill = 0;
  uint64_t last_doc = UINT64_MAX;
  for (const auto& doc : docs) {
    for (const auto& sent : doc.sentences) {
      size_t rest = sent.size();
      while (rest > 0) {
        const size_t sep = (fill > 0 && last_doc != doc.doc_id) ? 1 : 0;
        if (fill + sep >= budget) {
          ++count;
          fill = 0;
          continue;
        }
        const size_t space = budget - fill - sep;
        if (rest <= space) {
          fill += sep + rest;
          rest = 0;
          last_doc = doc.doc_id;
        } else if (fill > 0 && fill >= static_cast<size_t>(T) - 8) {
          ++count;
          fill = 0;
        } else {
          ++count;
          rest -= space;
          fill = 0;
          last_doc = doc.doc_id;
        }
      }
    }
  }
  if (fill > 0) ++count;
  return count;
}

uint64_t count_text_tokens(const std::vector<TokenizedDocument>& docs) {
  uint64_t n = 0;
  for (const auto& d : docs)
    for (const auto& s : d.sentences) n += s.size();
  return n;
}

}  // namespace

TEST_CASE("single-document corpus forces positive labels and counts it") {
  const auto vocab = fixture_vocab();
  std::vector<Document> docs(1);
  docs[0].id = 0;
  for (int i = 0; i < 12; ++i) docs[0].sentences.push_back("bali keto muri");
  const auto tok = tokenize_docs(docs, vocab);
  Rng rng(3);
  const auto res = pack_segment_pair(tok, vocab, 64, rng);
  REQUIRE(!res.instances.empty());
  for (const auto& inst : res.instances) {
    REQUIRE(inst.nsp_label.has_value());
    CHECK(*inst.nsp_label == true);
  }
  CHECK(res.stats.forced_positive > 0);
}

TEST_CASE("segment-pair instances respect the layout invariants") {
  const auto vocab = fixture_vocab();
  Rng corpus_rng(11);
  const auto docs = testutil::random_corpus(corpus_rng, 10, 10, 10);
  const auto tok = tokenize_docs(docs, vocab);
  Rng rng(5);
  const uint32_t T = 48;
  const auto res = pack_segment_pair(tok, vocab, T, rng);
  REQUIRE(!res.instances.empty());
  for (const auto& inst : res.instances) {
    CHECK(inst.length() <= T);
    REQUIRE(inst.tokens.front() == vocab.cls());
    REQUIRE(inst.tokens.back() == vocab.eos());
    size_t seps = 0;
    for (uint32_t t : inst.tokens) seps += t == vocab.sep();
    CHECK(seps == 1);  // exactly one SEP in pair formats
    // segment ids constant 0 through the SEP, 1 after
    bool after_sep = false;
    for (size_t i = 0; i < inst.tokens.size(); ++i) {
      CHECK(inst.segment_ids[i] == (after_sep ? 1 : 0));
      if (inst.tokens[i] == vocab.sep()) after_sep = true;
    }
    REQUIRE(inst.nsp_label.has_value());
  }
}

TEST_CASE("NSP positive fraction converges to one half") {
  const auto vocab = fixture_vocab();
  Rng corpus_rng(21);
  const auto docs = testutil::random_corpus(corpus_rng, 40, 12, 8);
  const auto tok = tokenize_docs(docs, vocab);

  for (int variant = 0; variant < 2; ++variant) {
    uint64_t positives = 0, total = 0;
    for (uint64_t seed = 0; total < 10000; ++seed) {
      Rng rng(seed * 977 + variant);
      const auto res = variant == 0 ? pack_segment_pair(tok, vocab, 48, rng)
                                    : pack_sentence_pair(tok, vocab, 48, rng);
      for (const auto& inst : res.instances) {
        positives += *inst.nsp_label;
        ++total;
      }
    }
    const double fraction = static_cast<double>(positives) / total;
    INFO((variant == 0 ? "segment-pair" : "sentence-pair") << " fraction " << fraction);
    CHECK(fraction > 0.48);
    CHECK(fraction < 0.52);
  }
}

TEST_CASE("sentence-pair positives are adjacent sentences") {
  const auto vocab = fixture_vocab();
  std::vector<Document> docs(2);
  docs[0].id = 0;
  docs[0].sentences = {"bali keto", "muri vexa", "dopi lura"};
  docs[1].id = 1;
  docs[1].sentences = {"zanu fipo", "gremo hati"};
  const auto tok = tokenize_docs(docs, vocab);

  for (uint64_t seed = 0; seed < 64; ++seed) {
    Rng rng(seed);
    const auto res = pack_sentence_pair(tok, vocab, 64, rng);
    // doc 0 has candidates (s1,s2) and (s2,s3); doc 1 has one: always 3 pairs
    CHECK(res.instances.size() == 3);
    for (const auto& inst : res.instances)
      if (*inst.nsp_label) REQUIRE(inst.doc_ids.size() == 1);
  }
}

TEST_CASE("sentence-pair runs shorter than segment-pair on the same corpus") {
  const auto vocab = fixture_vocab();
  Rng corpus_rng(31);
  const auto docs = testutil::random_corpus(corpus_rng, 30, 10, 10);
  const auto tok = tokenize_docs(docs, vocab);
  Rng r1(1), r2(1);
  const auto seg = pack_segment_pair(tok, vocab, 64, r1);
  const auto sen = pack_sentence_pair(tok, vocab, 64, r2);
  auto mean_len = [](const PackResult& r) {
    double sum = 0;
    for (const auto& inst : r.instances) sum += inst.length();
    return sum / static_cast<double>(r.instances.size());
  };
  CHECK(mean_len(sen) < mean_len(seg));
}

TEST_CASE("full-sentences: interior SEP at document changes, no NSP label") {
  const auto vocab = fixture_vocab();
  std::vector<Document> docs(2);
  docs[0].id = 0;
  docs[0].sentences = {"bali keto"};
  docs[1].id = 1;
  docs[1].sentences = {"muri vexa"};
  const auto tok = tokenize_docs(docs, vocab);
  const auto res = pack_full_sentences(tok, vocab, 64);
  REQUIRE(res.instances.size() == 1);
  const auto& inst = res.instances[0];
  CHECK(!inst.nsp_label.has_value());
  size_t seps = 0;
  for (uint32_t t : inst.tokens) seps += t == vocab.sep();
  CHECK(seps == 1);
  CHECK(inst.doc_ids == std::vector<uint64_t>{0, 1});
}

TEST_CASE("full-sentences instance count matches the greedy oracle") {
  const auto vocab = fixture_vocab();
  // fixture with 1000 sentences
  std::vector<Document> docs;
  Rng rng(77);
  size_t sentences = 0;
  uint64_t id = 0;
  while (sentences < 1000) {
    auto batch = testutil::random_corpus(rng, 3, 8, 14);
    for (auto& d : batch) {
      d.id = id++;
      sentences += d.sentences.size();
      docs.push_back(std::move(d));
    }
  }
  const auto tok = tokenize_docs(docs, vocab);
  for (uint32_t T : {32u, 64u, 512u}) {
    const auto res = pack_full_sentences(tok, vocab, T);
    INFO("T=" << T);
    CHECK(res.instances.size() == oracle_full_sentence_count(tok, T));
    // full-length packing: all but the last instance hold at least T-8 tokens
    for (size_t i = 0; i + 1 < res.instances.size(); ++i)
      CHECK(res.instances[i].length() >= T - 8);
  }
}

TEST_CASE("full/doc formats conserve corpus tokens") {
  const auto vocab = fixture_vocab();
  Rng rng(41);
  const auto docs = testutil::random_corpus(rng, 12, 10, 12);
  const auto tok = tokenize_docs(docs, vocab);
  const uint64_t corpus_tokens = count_text_tokens(tok);
  for (auto format : {PackingFormat::full_sentences, PackingFormat::doc_sentences}) {
    const auto res = pack(format, tok, vocab, 32, 0);
    uint64_t emitted = 0;
    for (const auto& inst : res.instances)
      for (uint32_t t : inst.tokens) emitted += !vocab.is_special(t);
    CHECK(emitted == corpus_tokens);
  }
}

TEST_CASE("doc-sentences never crosses documents") {
  const auto vocab = fixture_vocab();
  Rng rng(51);
  const auto docs = testutil::random_corpus(rng, 15, 8, 10);
  const auto tok = tokenize_docs(docs, vocab);
  const auto res = pack_doc_sentences(tok, vocab, 40);
  for (const auto& inst : res.instances) {
    CHECK(inst.doc_ids.size() == 1);
    for (uint32_t t : inst.tokens) CHECK(t != vocab.sep());
  }
}

TEST_CASE("doc with one short sentence yields one short instance") {
  const auto vocab = fixture_vocab();
  std::vector<Document> docs(1);
  docs[0].id = 0;
  docs[0].sentences = {"bali"};
  const auto tok = tokenize_docs(docs, vocab);
  const auto res = pack_doc_sentences(tok, vocab, 64);
  REQUIRE(res.instances.size() == 1);
  CHECK(res.instances[0].length() < 10);
}

TEST_CASE("batch_by_tokens greedy fill") {
  std::vector<TrainingInstance> insts(3);
  for (auto& inst : insts) {
    inst.tokens.assign(512, 1);
    inst.segment_ids.assign(512, 0);
  }
  const auto batches = batch_by_tokens(std::move(insts), 1024);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].instances.size() == 2);
  CHECK(batches[1].instances.size() == 1);
  for (const auto& b : batches) CHECK(b.token_sum <= 1024);
}

TEST_CASE("batch budget below instance length is an argument error") {
  std::vector<TrainingInstance> insts(1);
  insts[0].tokens.assign(64, 1);
  insts[0].segment_ids.assign(64, 0);
  CHECK_THROWS_AS(batch_by_tokens(std::move(insts), 32), std::invalid_argument);
}

TEST_CASE("doc-sentences batches reach similar token totals as full-sentences") {
  const auto vocab = fixture_vocab();
  Rng rng(61);
  std::vector<Document> docs;
  uint64_t id = 0;
  for (int rep = 0; rep < 40; ++rep) {
    auto more = testutil::random_corpus(rng, 4, 30, 10);
    for (auto& d : more) {
      d.id = id++;
      docs.push_back(std::move(d));
    }
  }
  const auto tok = tokenize_docs(docs, vocab);
  const uint32_t T = 64;
  const uint64_t budget = T * 8;
  auto mean_batch_tokens = [&](PackingFormat format) {
    auto res = pack(format, tok, vocab, T, 0);
    const auto batches = batch_by_tokens(std::move(res.instances), budget);
    double sum = 0;
    for (const auto& b : batches) sum += static_cast<double>(b.token_sum);
    return sum / static_cast<double>(batches.size());
  };
  const double full = mean_batch_tokens(PackingFormat::full_sentences);
  const double doc = mean_batch_tokens(PackingFormat::doc_sentences);
  CHECK(std::abs(full - doc) / full < 0.05);
}

TEST_CASE("instance file round-trips") {
  const auto vocab = fixture_vocab();
  Rng rng(71);
  const auto docs = testutil::random_corpus(rng, 8, 6, 8);
  const auto tok = tokenize_docs(docs, vocab);
  auto res = pack(PackingFormat::segment_pair_nsp, tok, vocab, 48, 9);
  const std::string path =
      (std::filesystem::temp_directory_path() / "mlmp_instances_test.bin").string();
  save_instances(path, 48, PackingFormat::segment_pair_nsp, res.instances);
  const auto loaded = load_instances(path);
  CHECK(loaded.max_len == 48);
  CHECK(loaded.format == PackingFormat::segment_pair_nsp);
  REQUIRE(loaded.instances.size() == res.instances.size());
  for (size_t i = 0; i < res.instances.size(); ++i) {
    CHECK(loaded.instances[i].tokens == res.instances[i].tokens);
    CHECK(loaded.instances[i].segment_ids == res.instances[i].segment_ids);
    CHECK(loaded.instances[i].nsp_label == res.instances[i].nsp_label);
    CHECK(loaded.instances[i].id == res.instances[i].id);
  }
  std::remove(path.c_str());
}

TEST_CASE("packing is deterministic in (corpus, vocab, T, seed)") {
  const auto vocab = fixture_vocab();
  Rng rng(81);
  const auto docs = testutil::random_corpus(rng, 10, 8, 8);
  const auto tok = tokenize_docs(docs, vocab);
  for (auto format :
       {PackingFormat::segment_pair_nsp, PackingFormat::sentence_pair_nsp,
        PackingFormat::full_sentences, PackingFormat::doc_sentences}) {
    const auto a = pack(format, tok, vocab, 48, 33);
    const auto b = pack(format, tok, vocab, 48, 33);
    REQUIRE(a.instances.size() == b.instances.size());
    for (size_t i = 0; i < a.instances.size(); ++i) {
      CHECK(a.instances[i].tokens == b.instances[i].tokens);
      CHECK(a.instances[i].nsp_label == b.instances[i].nsp_label);
    }
  }
}
