#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mlmp/common.hpp"
#include "mlmp/rng.hpp"

namespace mlmp {

// A document is an ordered list of sentences (raw byte strings). Input files
// are blank-line-delimited documents with one sentence per line; bytes are
// never validated as UTF-8 so arbitrary binary survives the pipeline.
struct Document {
  uint64_t id = 0;
  std::vector<std::string> sentences;
};

struct CorpusSplit {
  std::vector<Document> train;
  std::vector<Document> heldout;
  double heldout_fraction = 0.0;
};

struct CorpusStats {
  uint64_t documents = 0;
  uint64_t sentences = 0;
  uint64_t bytes = 0;
};

namespace detail {

inline void parse_corpus_text(const std::string& text, std::vector<Document>& out) {
  std::vector<std::string> current;
  auto flush = [&] {
    if (!current.empty()) {
      Document doc;
      doc.id = out.size();
      doc.sentences = std::move(current);
      out.push_back(std::move(doc));
      current.clear();
    }
  };
  size_t pos = 0;
  while (pos <= text.size()) {
    if (pos == text.size()) {
      flush();
      break;
    }
    size_t nl = text.find('\n', pos);
    std::string line = (nl == std::string::npos) ? text.substr(pos)
                                                 : text.substr(pos, nl - pos);
    if (line.empty()) {
      flush();  // blank line ends a document; runs of blanks collapse
    } else {
      current.push_back(std::move(line));
    }
    if (nl == std::string::npos) {
      flush();
      break;
    }
    pos = nl + 1;
  }
}

}  // namespace detail

inline std::vector<Document> load_corpus(const std::vector<std::string>& paths) {
  std::vector<Document> docs;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot read corpus file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    detail::parse_corpus_text(buf.str(), docs);
  }
  return docs;
}

inline std::vector<Document> parse_corpus(const std::string& text) {
  std::vector<Document> docs;
  detail::parse_corpus_text(text, docs);
  return docs;
}

// Canonical text form: sentences joined by '\n', documents separated by one
// blank line, trailing newline. parse(render(docs)) == docs.
inline std::string render_corpus(const std::vector<Document>& docs) {
  std::string out;
  for (size_t d = 0; d < docs.size(); ++d) {
    if (d > 0) out += '\n';
    for (const auto& s : docs[d].sentences) {
      out += s;
      out += '\n';
    }
  }
  return out;
}

inline CorpusStats corpus_stats(const std::vector<Document>& docs) {
  CorpusStats st;
  st.documents = docs.size();
  for (const auto& d : docs) {
    st.sentences += d.sentences.size();
    for (const auto& s : d.sentences) st.bytes += s.size();
  }
  return st;
}

// Per-document assignment from a seeded hash of the document id, so the same
// (corpus, seed, fraction) always yields the same split and packing never
// mixes train and held-out text.
inline CorpusSplit split_heldout(const std::vector<Document>& docs, double fraction,
                                 uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("heldout fraction must be in (0,1)");
  CorpusSplit split;
  split.heldout_fraction = fraction;
  const uint64_t key = derive_key(seed, RngStream::heldout_split);
  for (const auto& doc : docs) {
    if (hash_uniform(key, doc.id) < fraction)
      split.heldout.push_back(doc);
    else
      split.train.push_back(doc);
  }
  return split;
}

}  // namespace mlmp
