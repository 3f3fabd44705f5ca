#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mlmp/common.hpp"
#include "mlmp/corpus.hpp"

namespace mlmp {

// Byte-level BPE. The base alphabet is the raw byte values 0..255, so any
// input encodes without unknown tokens and decode(encode(x)) == x for every
// byte string. Merged tokens get ids 256.., specials sit above all text ids.

inline constexpr uint32_t kNumSpecials = 5;

enum class SpecialToken : uint32_t { cls = 0, sep = 1, eos = 2, mask = 3, pad = 4 };

inline constexpr const char* kSpecialNames[kNumSpecials] = {"[CLS]", "[SEP]", "[EOS]",
                                                            "[MASK]", "[PAD]"};

struct Vocab {
  // expansions[id] = byte expansion of text token id (single bytes for 0..255).
  std::vector<std::string> expansions;
  // merges[r] merged token pair -> id 256 + r.
  std::vector<std::pair<uint32_t, uint32_t>> merges;
  // (left id, right id) -> rank.
  std::unordered_map<uint64_t, uint32_t> ranks;

  uint32_t text_count() const { return static_cast<uint32_t>(expansions.size()); }
  uint32_t size() const { return text_count() + kNumSpecials; }

  uint32_t special(SpecialToken t) const { return text_count() + static_cast<uint32_t>(t); }
  uint32_t cls() const { return special(SpecialToken::cls); }
  uint32_t sep() const { return special(SpecialToken::sep); }
  uint32_t eos() const { return special(SpecialToken::eos); }
  uint32_t mask_id() const { return special(SpecialToken::mask); }
  uint32_t pad() const { return special(SpecialToken::pad); }
  bool is_special(uint32_t id) const { return id >= text_count() && id < size(); }

  static uint64_t pair_key(uint32_t a, uint32_t b) {
    return (static_cast<uint64_t>(a) << 32) | b;
  }

  static Vocab bytes_only() {
    Vocab v;
    v.expansions.reserve(256);
    for (int b = 0; b < 256; ++b) v.expansions.push_back(std::string(1, static_cast<char>(b)));
    return v;
  }
};

namespace detail {

inline bool is_word_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

}  // namespace detail

// Pre-split text into words: maximal runs of non-whitespace, with a single
// directly preceding space attached to the following word. Remaining
// whitespace runs become words of their own so no byte is lost. Merges never
// cross these boundaries, which keeps training linear in document length.
inline std::vector<std::string_view> pre_split(std::string_view text) {
  std::vector<std::string_view> words;
  size_t i = 0;
  const size_t n = text.size();
  while (i < n) {
    if (!detail::is_word_space(static_cast<unsigned char>(text[i]))) {
      size_t j = i;
      while (j < n && !detail::is_word_space(static_cast<unsigned char>(text[j]))) ++j;
      words.push_back(text.substr(i, j - i));
      i = j;
    } else {
      size_t j = i;
      while (j < n && detail::is_word_space(static_cast<unsigned char>(text[j]))) ++j;
      if (j < n && text[j - 1] == ' ') {
        if (j - 1 > i) words.push_back(text.substr(i, j - 1 - i));
        size_t k = j;
        while (k < n && !detail::is_word_space(static_cast<unsigned char>(text[k]))) ++k;
        words.push_back(text.substr(j - 1, k - (j - 1)));
        i = k;
      } else {
        words.push_back(text.substr(i, j - i));
        i = j;
      }
    }
  }
  return words;
}

namespace detail {

// Replace every left-to-right occurrence of (a,b) in `toks` with `merged`.
inline void apply_merge_inplace(std::vector<uint32_t>& toks, uint32_t a, uint32_t b,
                                uint32_t merged) {
  size_t w = 0;
  for (size_t r = 0; r < toks.size();) {
    if (r + 1 < toks.size() && toks[r] == a && toks[r + 1] == b) {
      toks[w++] = merged;
      r += 2;
    } else {
      toks[w++] = toks[r++];
    }
  }
  toks.resize(w);
}

struct PendingPair {
  uint64_t count;
  uint32_t left, right;
};

}  // namespace detail

// Train a merge table by repeatedly merging the most frequent adjacent token
// pair inside pre-split words. Ties break on the lexicographically smallest
// (left, right) byte expansion so training is fully deterministic. Stops at
// target_size or when no pair occurs at least twice.
inline Vocab train_bpe(const std::vector<Document>& docs, uint32_t target_size) {
  if (target_size < 256 + kNumSpecials)
    throw std::invalid_argument("bpe target_size must be at least " +
                                std::to_string(256 + kNumSpecials));
  Vocab vocab = Vocab::bytes_only();
  const uint32_t merge_target = target_size - 256 - kNumSpecials;

  // Distinct-word table with counts; all pair statistics are over word types
  // weighted by their frequency.
  std::unordered_map<std::string, uint32_t> word_index;
  std::vector<std::vector<uint32_t>> words;
  std::vector<uint64_t> counts;
  for (const auto& doc : docs) {
    for (const auto& sentence : doc.sentences) {
      for (std::string_view w : pre_split(sentence)) {
        auto [it, inserted] = word_index.emplace(std::string(w), words.size());
        if (inserted) {
          std::vector<uint32_t> toks(w.size());
          for (size_t i = 0; i < w.size(); ++i) toks[i] = static_cast<unsigned char>(w[i]);
          words.push_back(std::move(toks));
          counts.push_back(0);
        }
        counts[it->second] += 1;
      }
    }
  }

  std::unordered_map<uint64_t, uint64_t> pair_count;
  std::unordered_map<uint64_t, std::unordered_set<uint32_t>> pair_words;
  for (uint32_t wi = 0; wi < words.size(); ++wi) {
    const auto& toks = words[wi];
    for (size_t i = 0; i + 1 < toks.size(); ++i) {
      const uint64_t key = Vocab::pair_key(toks[i], toks[i + 1]);
      pair_count[key] += counts[wi];
      pair_words[key].insert(wi);
    }
  }

  // Max-heap with lazy invalidation: entries carry the count at push time and
  // are revalidated against pair_count on pop.
  auto better = [&vocab](const detail::PendingPair& a, const detail::PendingPair& b) {
    if (a.count != b.count) return a.count < b.count;  // smaller count loses
    const auto& al = vocab.expansions[a.left];
    const auto& bl = vocab.expansions[b.left];
    if (al != bl) return al > bl;  // larger expansion loses
    return vocab.expansions[a.right] > vocab.expansions[b.right];
  };
  std::priority_queue<detail::PendingPair, std::vector<detail::PendingPair>, decltype(better)>
      heap(better);
  for (const auto& [key, cnt] : pair_count)
    heap.push({cnt, static_cast<uint32_t>(key >> 32), static_cast<uint32_t>(key & 0xFFFFFFFFu)});

  while (vocab.merges.size() < merge_target && !heap.empty()) {
    const detail::PendingPair top = heap.top();
    heap.pop();
    const uint64_t key = Vocab::pair_key(top.left, top.right);
    auto it = pair_count.find(key);
    if (it == pair_count.end() || it->second != top.count) continue;  // stale entry
    if (top.count < 2) break;

    const uint32_t merged = vocab.text_count();
    vocab.ranks.emplace(key, static_cast<uint32_t>(vocab.merges.size()));
    vocab.merges.emplace_back(top.left, top.right);
    vocab.expansions.push_back(vocab.expansions[top.left] + vocab.expansions[top.right]);

    auto affected_it = pair_words.find(key);
    if (affected_it == pair_words.end()) continue;
    const std::vector<uint32_t> affected(affected_it->second.begin(), affected_it->second.end());
    std::unordered_set<uint64_t> touched;
    for (uint32_t wi : affected) {
      auto& toks = words[wi];
      const uint64_t wc = counts[wi];
      for (size_t i = 0; i + 1 < toks.size(); ++i) {
        const uint64_t k = Vocab::pair_key(toks[i], toks[i + 1]);
        auto pc = pair_count.find(k);
        pc->second -= wc;
        touched.insert(k);
        if (pc->second == 0) pair_count.erase(pc);
        pair_words[k].erase(wi);
      }
      detail::apply_merge_inplace(toks, top.left, top.right, merged);
      for (size_t i = 0; i + 1 < toks.size(); ++i) {
        const uint64_t k = Vocab::pair_key(toks[i], toks[i + 1]);
        pair_count[k] += wc;
        touched.insert(k);
        pair_words[k].insert(wi);
      }
    }
    for (uint64_t k : touched) {
      auto pc = pair_count.find(k);
      if (pc != pair_count.end())
        heap.push({pc->second, static_cast<uint32_t>(k >> 32),
                   static_cast<uint32_t>(k & 0xFFFFFFFFu)});
    }
  }
  return vocab;
}

namespace detail {

inline void encode_word(const Vocab& v, std::string_view word, std::vector<uint32_t>& out) {
  thread_local std::vector<uint32_t> toks;
  toks.clear();
  toks.reserve(word.size());
  for (char c : word) toks.push_back(static_cast<unsigned char>(c));
  while (toks.size() >= 2) {
    uint32_t best_rank = UINT32_MAX;
    uint32_t best_left = 0, best_right = 0;
    for (size_t i = 0; i + 1 < toks.size(); ++i) {
      auto it = v.ranks.find(Vocab::pair_key(toks[i], toks[i + 1]));
      if (it != v.ranks.end() && it->second < best_rank) {
        best_rank = it->second;
        best_left = toks[i];
        best_right = toks[i + 1];
      }
    }
    if (best_rank == UINT32_MAX) break;
    apply_merge_inplace(toks, best_left, best_right, 256 + best_rank);
  }
  out.insert(out.end(), toks.begin(), toks.end());
}

}  // namespace detail

// Total over arbitrary bytes; never emits special ids.
inline std::vector<uint32_t> encode(const Vocab& v, std::string_view text) {
  std::vector<uint32_t> out;
  out.reserve(text.size() / 3 + 4);
  for (std::string_view word : pre_split(text)) detail::encode_word(v, word, out);
  return out;
}

inline std::string decode(const Vocab& v, std::span<const uint32_t> ids) {
  std::string out;
  for (uint32_t id : ids) {
    if (id < v.text_count()) {
      out += v.expansions[id];
    } else if (id < v.size()) {
      out += kSpecialNames[id - v.text_count()];
    } else {
      throw data_error("decode: unknown token id " + std::to_string(id));
    }
  }
  return out;
}

namespace detail {

inline std::string hex_escape(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (char c : bytes) {
    const auto b = static_cast<unsigned char>(c);
    if (b >= 0x21 && b <= 0x7E && b != '\\') {
      out += static_cast<char>(b);
    } else {
      out += "\\x";
      out += digits[b >> 4];
      out += digits[b & 0xF];
    }
  }
  return out;
}

inline int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

inline std::string hex_unescape(std::string_view text, size_t line_no) {
  std::string out;
  for (size_t i = 0; i < text.size();) {
    if (text[i] == '\\') {
      if (i + 3 >= text.size() || text[i + 1] != 'x' || hex_digit(text[i + 2]) < 0 ||
          hex_digit(text[i + 3]) < 0)
        throw data_error("vocab parse error at line " + std::to_string(line_no) +
                         ": bad escape");
      out += static_cast<char>(hex_digit(text[i + 2]) * 16 + hex_digit(text[i + 3]));
      i += 4;
    } else {
      out += text[i++];
    }
  }
  return out;
}

}  // namespace detail

// Text vocab file: header `bbpe v1 <size>`, one merge per line as two
// space-separated hex-escaped byte expansions, then a `specials` section
// mapping names to ids.
inline void save_vocab(const Vocab& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write vocab file: " + path);
  out << "bbpe v1 " << v.size() << "\n";
  for (const auto& [left, right] : v.merges)
    out << detail::hex_escape(v.expansions[left]) << ' '
        << detail::hex_escape(v.expansions[right]) << "\n";
  out << "specials\n";
  for (uint32_t s = 0; s < kNumSpecials; ++s)
    out << kSpecialNames[s] << ' ' << v.text_count() + s << "\n";
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read vocab file: " + path);
  auto fail = [](size_t line_no, const std::string& what) -> Vocab {
    throw data_error("vocab parse error at line " + std::to_string(line_no) + ": " + what);
  };

  std::string line;
  size_t line_no = 1;
  if (!std::getline(in, line)) return fail(line_no, "empty file");
  uint64_t declared_size = 0;
  {
    std::istringstream hs(line);
    std::string tag, ver;
    if (!(hs >> tag >> ver >> declared_size) || tag != "bbpe" || ver != "v1")
      return fail(line_no, "bad header");
  }

  Vocab v = Vocab::bytes_only();
  std::unordered_map<std::string, uint32_t> by_expansion;
  for (uint32_t b = 0; b < 256; ++b) by_expansion.emplace(v.expansions[b], b);

  std::unordered_set<std::string> seen_merges;
  bool specials_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "specials") {
      specials_seen = true;
      break;
    }
    if (line.empty()) continue;
    const size_t sp = line.find(' ');
    if (sp == std::string::npos) return fail(line_no, "expected two fields");
    if (!seen_merges.insert(line).second) return fail(line_no, "duplicate merge");
    const std::string left_bytes = detail::hex_unescape(std::string_view(line).substr(0, sp), line_no);
    const std::string right_bytes =
        detail::hex_unescape(std::string_view(line).substr(sp + 1), line_no);
    auto li = by_expansion.find(left_bytes);
    auto ri = by_expansion.find(right_bytes);
    if (li == by_expansion.end() || ri == by_expansion.end())
      return fail(line_no, "merge references unknown token");
    const uint32_t merged = v.text_count();
    v.ranks.emplace(Vocab::pair_key(li->second, ri->second),
                    static_cast<uint32_t>(v.merges.size()));
    v.merges.emplace_back(li->second, ri->second);
    v.expansions.push_back(left_bytes + right_bytes);
    by_expansion.emplace(v.expansions.back(), merged);  // first id wins on duplicates
  }
  if (!specials_seen) return fail(line_no, "missing specials section");

  uint32_t specials_found = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    uint64_t id = 0;
    if (!(ls >> name >> id)) return fail(line_no, "bad specials entry");
    bool known = false;
    for (uint32_t s = 0; s < kNumSpecials; ++s) {
      if (name == kSpecialNames[s]) {
        known = true;
        if (id != v.text_count() + s) return fail(line_no, "special id mismatch for " + name);
      }
    }
    if (!known) return fail(line_no, "unknown special " + name);
    ++specials_found;
  }
  if (specials_found != kNumSpecials) return fail(line_no, "incomplete specials section");
  if (declared_size != v.size()) return fail(1, "header size does not match merge count");
  return v;
}

}  // namespace mlmp
