#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlmp/bpe.hpp"
#include "mlmp/common.hpp"
#include "mlmp/corpus.hpp"
#include "mlmp/rng.hpp"

namespace mlmp {

enum class PackingFormat : uint8_t {
  segment_pair_nsp = 0,
  sentence_pair_nsp = 1,
  full_sentences = 2,
  doc_sentences = 3,
};

inline bool format_uses_nsp(PackingFormat f) {
  return f == PackingFormat::segment_pair_nsp || f == PackingFormat::sentence_pair_nsp;
}

inline const char* format_name(PackingFormat f) {
  switch (f) {
    case PackingFormat::segment_pair_nsp: return "segment-pair";
    case PackingFormat::sentence_pair_nsp: return "sentence-pair";
    case PackingFormat::full_sentences: return "full-sentences";
    case PackingFormat::doc_sentences: return "doc-sentences";
  }
  return "?";
}

inline PackingFormat parse_format(const std::string& name) {
  if (name == "segment-pair") return PackingFormat::segment_pair_nsp;
  if (name == "sentence-pair") return PackingFormat::sentence_pair_nsp;
  if (name == "full-sentences") return PackingFormat::full_sentences;
  if (name == "doc-sentences") return PackingFormat::doc_sentences;
  throw usage_error("unknown packing format: " + name);
}

// One pretraining input: [CLS] x1..xN [SEP] y1..yM [EOS] for pair formats,
// [CLS] body [EOS] otherwise. Never longer than T tokens.
struct TrainingInstance {
  uint64_t id = 0;
  std::vector<uint32_t> tokens;
  std::vector<uint8_t> segment_ids;
  std::optional<bool> nsp_label;
  std::vector<uint64_t> doc_ids;  // provenance: contributing documents, in order

  uint32_t length() const { return static_cast<uint32_t>(tokens.size()); }
};

struct PackStats {
  uint64_t emitted = 0;
  uint64_t skipped_segments = 0;     // material too short to form a pair
  uint64_t truncated_sentences = 0;  // right-truncations in pair formats
  uint64_t forced_positive = 0;      // no negative source available
};

struct PackResult {
  std::vector<TrainingInstance> instances;
  PackStats stats;
};

struct TokenizedDocument {
  uint64_t doc_id = 0;
  std::vector<std::vector<uint32_t>> sentences;
};

inline std::vector<TokenizedDocument> tokenize_docs(const std::vector<Document>& docs,
                                                    const Vocab& vocab) {
  std::vector<TokenizedDocument> out;
  out.reserve(docs.size());
  for (const auto& doc : docs) {
    TokenizedDocument td;
    td.doc_id = doc.id;
    td.sentences.reserve(doc.sentences.size());
    for (const auto& s : doc.sentences) td.sentences.push_back(encode(vocab, s));
    out.push_back(std::move(td));
  }
  return out;
}

namespace detail {

inline void note_doc(TrainingInstance& inst, uint64_t doc_id) {
  if (inst.doc_ids.empty() || inst.doc_ids.back() != doc_id) inst.doc_ids.push_back(doc_id);
}

inline TrainingInstance make_pair_instance(const Vocab& vocab,
                                           std::span<const uint32_t> a,
                                           std::span<const uint32_t> b, bool label,
                                           uint64_t doc_a, uint64_t doc_b) {
  TrainingInstance inst;
  inst.tokens.reserve(a.size() + b.size() + 3);
  inst.tokens.push_back(vocab.cls());
  inst.tokens.insert(inst.tokens.end(), a.begin(), a.end());
  inst.tokens.push_back(vocab.sep());
  const size_t seg0 = inst.tokens.size();
  inst.tokens.insert(inst.tokens.end(), b.begin(), b.end());
  inst.tokens.push_back(vocab.eos());
  inst.segment_ids.assign(inst.tokens.size(), 1);
  std::fill(inst.segment_ids.begin(), inst.segment_ids.begin() + seg0, uint8_t{0});
  inst.nsp_label = label;
  note_doc(inst, doc_a);
  note_doc(inst, doc_b);
  return inst;
}

// Trim (a, b) so a.size() + b.size() <= body_budget, popping from the back of
// the longer segment (ties trim b) while keeping both non-empty.
inline bool fit_pair(std::vector<uint32_t>& a, std::vector<uint32_t>& b, size_t body_budget,
                     PackStats& stats) {
  bool cut = false;
  while (a.size() + b.size() > body_budget) {
    if (b.size() >= a.size() && b.size() > 1) {
      b.pop_back();
    } else if (a.size() > 1) {
      a.pop_back();
    } else {
      return false;  // budget < 2, nothing sane to emit
    }
    cut = true;
  }
  if (cut) ++stats.truncated_sentences;
  return !a.empty() && !b.empty();
}

// Uniformly pick a sentence position in another document and grow a segment
// forward from it up to `budget` tokens.
inline std::vector<uint32_t> draw_negative_segment(const std::vector<TokenizedDocument>& docs,
                                                   size_t exclude_doc, size_t budget, Rng& rng,
                                                   uint64_t& out_doc_id, bool single_sentence) {
  std::vector<uint32_t> seg;
  // Other documents with at least one sentence are eligible.
  size_t candidates = 0;
  for (size_t d = 0; d < docs.size(); ++d)
    if (d != exclude_doc && !docs[d].sentences.empty()) ++candidates;
  if (candidates == 0) return seg;
  size_t pick = rng.index(candidates);
  size_t chosen = 0;
  for (size_t d = 0; d < docs.size(); ++d) {
    if (d == exclude_doc || docs[d].sentences.empty()) continue;
    if (pick-- == 0) {
      chosen = d;
      break;
    }
  }
  const auto& sents = docs[chosen].sentences;
  out_doc_id = docs[chosen].doc_id;
  size_t start = rng.index(sents.size());
  for (size_t s = start; s < sents.size(); ++s) {
    if (!seg.empty() && (single_sentence || seg.size() + sents[s].size() > budget)) break;
    seg.insert(seg.end(), sents[s].begin(), sents[s].end());
    if (single_sentence) break;
  }
  return seg;
}

}  // namespace detail

// SEGMENT-PAIR+NSP: two multi-sentence segments per input. With probability
// 0.5 segment B continues segment A's document, otherwise B starts at a
// random sentence of a random other document. Combined length (with the three
// special tokens) stays <= T.
inline PackResult pack_segment_pair(const std::vector<TokenizedDocument>& docs,
                                    const Vocab& vocab, uint32_t T, Rng& rng) {
  if (T < 8) throw std::invalid_argument("pack: T must be >= 8");
  PackResult res;
  const size_t body_budget = T - 3;
  for (size_t d = 0; d < docs.size(); ++d) {
    const auto& sents = docs[d].sentences;
    size_t i = 0;
    while (i < sents.size()) {
      // Gather a chunk of sentences up to the body budget.
      size_t j = i;
      size_t chunk_tokens = 0;
      while (j < sents.size() && (j == i || chunk_tokens + sents[j].size() <= body_budget)) {
        chunk_tokens += sents[j].size();
        ++j;
        if (chunk_tokens >= body_budget) break;
      }
      const size_t chunk_len = j - i;
      if (chunk_len < 2) {
        // A lone trailing sentence cannot be split into a pair; drop it so the
        // emitted label fraction stays at the sampling rate.
        ++res.stats.skipped_segments;
        i = j;
        continue;
      }
      // Split point: grow A until a uniformly drawn token target is reached,
      // always leaving at least one sentence for B.
      const size_t a_target = 1 + rng.index(body_budget - 1);
      std::vector<uint32_t> a;
      size_t split = i;
      while (split < j - 1 && a.size() < a_target) {
        a.insert(a.end(), sents[split].begin(), sents[split].end());
        ++split;
      }
      if (a.empty()) {
        a.insert(a.end(), sents[split].begin(), sents[split].end());
        ++split;
      }

      bool want_positive = rng.bernoulli(0.5);
      bool label = want_positive;
      std::vector<uint32_t> b;
      uint64_t b_doc = docs[d].doc_id;
      if (!want_positive) {
        b = detail::draw_negative_segment(docs, d, body_budget - std::min(a.size(), body_budget - 1),
                                          rng, b_doc, /*single_sentence=*/false);
        if (b.empty()) {
          label = true;  // single-document corpus: no negative source
          ++res.stats.forced_positive;
        }
      }
      if (label) {
        b_doc = docs[d].doc_id;
        for (size_t s = split; s < j; ++s) {
          if (!b.empty() && b.size() + sents[s].size() > body_budget) break;
          b.insert(b.end(), sents[s].begin(), sents[s].end());
        }
      }
      if (b.empty()) {
        ++res.stats.skipped_segments;
        i = j;
        continue;
      }
      if (detail::fit_pair(a, b, body_budget, res.stats)) {
        res.instances.push_back(detail::make_pair_instance(vocab, a, b, label,
                                                           docs[d].doc_id, b_doc));
        ++res.stats.emitted;
      }
      i = label ? j : split;
    }
  }
  return res;
}

// SENTENCE-PAIR+NSP: each segment is exactly one natural sentence. Positives
// are adjacent sentences of one document; negatives pair a sentence with a
// random sentence of another document.
inline PackResult pack_sentence_pair(const std::vector<TokenizedDocument>& docs,
                                     const Vocab& vocab, uint32_t T, Rng& rng) {
  if (T < 8) throw std::invalid_argument("pack: T must be >= 8");
  PackResult res;
  const size_t body_budget = T - 3;
  for (size_t d = 0; d < docs.size(); ++d) {
    const auto& sents = docs[d].sentences;
    if (sents.size() < 2) {
      if (!sents.empty()) ++res.stats.skipped_segments;
      continue;
    }
    for (size_t i = 0; i + 1 < sents.size(); ++i) {
      bool label = rng.bernoulli(0.5);
      std::vector<uint32_t> a = sents[i];
      std::vector<uint32_t> b;
      uint64_t b_doc = docs[d].doc_id;
      if (label) {
        b = sents[i + 1];
      } else {
        b = detail::draw_negative_segment(docs, d, body_budget, rng, b_doc,
                                          /*single_sentence=*/true);
        if (b.empty()) {
          label = true;
          b = sents[i + 1];
          b_doc = docs[d].doc_id;
          ++res.stats.forced_positive;
        }
      }
      if (detail::fit_pair(a, b, body_budget, res.stats)) {
        res.instances.push_back(detail::make_pair_instance(vocab, a, b, label,
                                                           docs[d].doc_id, b_doc));
        ++res.stats.emitted;
      }
    }
  }
  return res;
}

namespace detail {

// Shared sentence-packing core for FULL-SENTENCES / DOC-SENTENCES. Sentences
// are appended greedily; when the next sentence does not fit, the instance is
// closed if it already holds at least T-8 tokens, otherwise the sentence is
// split at the token level to fill the body exactly (full-length packing).
struct GreedyPacker {
  const Vocab& vocab;
  uint32_t T;
  bool cross_documents;
  PackResult& res;

  std::vector<uint32_t> body;
  std::vector<uint64_t> body_docs;
  uint64_t last_doc = UINT64_MAX;

  size_t body_budget() const { return T - 2; }

  void flush() {
    if (body.empty()) return;
    TrainingInstance inst;
    inst.tokens.reserve(body.size() + 2);
    inst.tokens.push_back(vocab.cls());
    inst.tokens.insert(inst.tokens.end(), body.begin(), body.end());
    inst.tokens.push_back(vocab.eos());
    inst.segment_ids.assign(inst.tokens.size(), 0);
    inst.doc_ids = std::move(body_docs);
    res.instances.push_back(std::move(inst));
    ++res.stats.emitted;
    body.clear();
    body_docs.clear();
  }

  void append(uint64_t doc_id, bool with_sep, std::span<const uint32_t> toks) {
    if (with_sep) body.push_back(vocab.sep());
    body.insert(body.end(), toks.begin(), toks.end());
    if (body_docs.empty() || body_docs.back() != doc_id) body_docs.push_back(doc_id);
    last_doc = doc_id;
  }

  void add_sentence(uint64_t doc_id, std::span<const uint32_t> sentence) {
    std::span<const uint32_t> rest = sentence;
    while (!rest.empty()) {
      // A document change inside an instance costs one SEP before any tokens.
      const bool need_sep = !body.empty() && cross_documents && last_doc != doc_id;
      const size_t used = body.size() + (need_sep ? 1 : 0);
      if (used >= body_budget()) {
        flush();
        continue;
      }
      const size_t space = body_budget() - used;
      if (rest.size() <= space) {
        append(doc_id, need_sep, rest);
        rest = {};
      } else if (!body.empty() && body.size() >= static_cast<size_t>(T) - 8) {
        // Already near full length: the whole sentence starts the next instance.
        flush();
      } else {
        // Closing here would leave a short instance; split the sentence at the
        // token level to fill the body exactly and carry the rest over.
        append(doc_id, need_sep, rest.subspan(0, space));
        rest = rest.subspan(space);
        flush();
      }
    }
  }

  void end_document() {
    if (!cross_documents) flush();
  }
};

}  // namespace detail

// FULL-SENTENCES: sentences packed contiguously in corpus order, crossing
// document boundaries with a SEP at each change. Every instance except
// possibly the last holds at least T-8 tokens.
inline PackResult pack_full_sentences(const std::vector<TokenizedDocument>& docs,
                                      const Vocab& vocab, uint32_t T) {
  if (T < 8) throw std::invalid_argument("pack: T must be >= 8");
  PackResult res;
  detail::GreedyPacker packer{vocab, T, /*cross_documents=*/true, res, {}, {}, UINT64_MAX};
  for (const auto& doc : docs) {
    for (const auto& s : doc.sentences) packer.add_sentence(doc.doc_id, s);
    packer.end_document();
  }
  packer.flush();
  return res;
}

// DOC-SENTENCES: as FULL-SENTENCES but packing resets at every document end,
// so instances never span documents and may run short near document ends.
inline PackResult pack_doc_sentences(const std::vector<TokenizedDocument>& docs,
                                     const Vocab& vocab, uint32_t T) {
  if (T < 8) throw std::invalid_argument("pack: T must be >= 8");
  PackResult res;
  detail::GreedyPacker packer{vocab, T, /*cross_documents=*/false, res, {}, {}, UINT64_MAX};
  for (const auto& doc : docs) {
    for (const auto& s : doc.sentences) packer.add_sentence(doc.doc_id, s);
    packer.end_document();
  }
  packer.flush();
  return res;
}

inline PackResult pack(PackingFormat format, const std::vector<TokenizedDocument>& docs,
                       const Vocab& vocab, uint32_t T, uint64_t seed) {
  Rng rng = keyed_rng(seed, RngStream::packing, static_cast<uint64_t>(format));
  PackResult res;
  switch (format) {
    case PackingFormat::segment_pair_nsp: res = pack_segment_pair(docs, vocab, T, rng); break;
    case PackingFormat::sentence_pair_nsp: res = pack_sentence_pair(docs, vocab, T, rng); break;
    case PackingFormat::full_sentences: res = pack_full_sentences(docs, vocab, T); break;
    case PackingFormat::doc_sentences: res = pack_doc_sentences(docs, vocab, T); break;
  }
  for (size_t i = 0; i < res.instances.size(); ++i) res.instances[i].id = i;
  return res;
}

// A batch filled greedily up to a token budget; padding happens later, at
// model input assembly, to the longest instance in the batch.
struct TokenBudgetBatch {
  std::vector<TrainingInstance> instances;
  uint64_t token_budget = 0;
  uint64_t token_sum = 0;

  uint32_t max_length() const {
    uint32_t m = 0;
    for (const auto& inst : instances) m = std::max(m, inst.length());
    return m;
  }
};

inline std::vector<TokenBudgetBatch> batch_by_tokens(std::vector<TrainingInstance> instances,
                                                     uint64_t token_budget) {
  std::vector<TokenBudgetBatch> batches;
  TokenBudgetBatch current;
  current.token_budget = token_budget;
  for (auto& inst : instances) {
    if (inst.length() > token_budget)
      throw std::invalid_argument("batch_by_tokens: instance longer than budget");
    if (current.token_sum + inst.length() > token_budget && !current.instances.empty()) {
      batches.push_back(std::move(current));
      current = TokenBudgetBatch{};
      current.token_budget = token_budget;
    }
    current.token_sum += inst.length();
    current.instances.push_back(std::move(inst));
  }
  if (!current.instances.empty()) batches.push_back(std::move(current));
  return batches;
}

// Same greedy fill over instance indices; the trainer uses this so instances
// can be stored once and re-batched per epoch order.
inline std::vector<std::vector<uint32_t>> batch_indices_by_tokens(
    const std::vector<TrainingInstance>& instances, std::span<const uint32_t> order,
    uint64_t token_budget) {
  std::vector<std::vector<uint32_t>> batches;
  std::vector<uint32_t> current;
  uint64_t sum = 0;
  for (uint32_t idx : order) {
    const uint64_t len = instances[idx].length();
    if (len > token_budget)
      throw std::invalid_argument("batch_by_tokens: instance longer than budget");
    if (sum + len > token_budget && !current.empty()) {
      batches.push_back(std::move(current));
      current.clear();
      sum = 0;
    }
    current.push_back(idx);
    sum += len;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

// ---- instance file I/O ----------------------------------------------------
// Little-endian binary: header (magic, version, T, format), then per
// instance: length u32, token ids u32[], segment ids u8[], nsp label u8
// (0xFF = absent).

namespace detail {

inline constexpr uint32_t kInstanceMagic = 0x314B504Du;  // "MPK1"
inline constexpr uint32_t kInstanceVersion = 1;

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

struct ByteReader {
  const std::string& data;
  size_t pos = 0;
  explicit ByteReader(const std::string& d) : data(d) {}
  bool done() const { return pos >= data.size(); }
  uint8_t u8() {
    if (pos + 1 > data.size()) throw data_error("instance file truncated");
    return static_cast<uint8_t>(data[pos++]);
  }
  uint32_t u32() {
    if (pos + 4 > data.size()) throw data_error("instance file truncated");
    uint32_t v = static_cast<uint8_t>(data[pos]) | (static_cast<uint8_t>(data[pos + 1]) << 8) |
                 (static_cast<uint8_t>(data[pos + 2]) << 16) |
                 (static_cast<uint32_t>(static_cast<uint8_t>(data[pos + 3])) << 24);
    pos += 4;
    return v;
  }
};

}  // namespace detail

struct InstanceFile {
  uint32_t max_len = 0;
  PackingFormat format = PackingFormat::full_sentences;
  std::vector<TrainingInstance> instances;
};

inline void save_instances(const std::string& path, uint32_t T, PackingFormat format,
                           std::span<const TrainingInstance> instances) {
  std::string out;
  detail::put_u32(out, detail::kInstanceMagic);
  detail::put_u32(out, detail::kInstanceVersion);
  detail::put_u32(out, T);
  out.push_back(static_cast<char>(format));
  for (const auto& inst : instances) {
    detail::put_u32(out, inst.length());
    for (uint32_t t : inst.tokens) detail::put_u32(out, t);
    for (uint8_t s : inst.segment_ids) out.push_back(static_cast<char>(s));
    out.push_back(inst.nsp_label ? (*inst.nsp_label ? 1 : 0) : static_cast<char>(0xFF));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write instance file: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline InstanceFile load_instances(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read instance file: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string data = buf.str();
  detail::ByteReader r(data);
  if (r.u32() != detail::kInstanceMagic) throw data_error("instance file: bad magic");
  if (r.u32() != detail::kInstanceVersion) throw data_error("instance file: bad version");
  InstanceFile out;
  out.max_len = r.u32();
  const uint8_t fmt = r.u8();
  if (fmt > 3) throw data_error("instance file: bad format byte");
  out.format = static_cast<PackingFormat>(fmt);
  while (!r.done()) {
    TrainingInstance inst;
    inst.id = out.instances.size();
    const uint32_t len = r.u32();
    if (len == 0 || len > out.max_len) throw data_error("instance file: bad instance length");
    inst.tokens.resize(len);
    for (uint32_t i = 0; i < len; ++i) inst.tokens[i] = r.u32();
    inst.segment_ids.resize(len);
    for (uint32_t i = 0; i < len; ++i) inst.segment_ids[i] = r.u8();
    const uint8_t label = r.u8();
    if (label == 1)
      inst.nsp_label = true;
    else if (label == 0)
      inst.nsp_label = false;
    else if (label != 0xFF)
      throw data_error("instance file: bad nsp label byte");
    out.instances.push_back(std::move(inst));
  }
  return out;
}

}  // namespace mlmp
