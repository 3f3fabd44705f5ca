#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "mlmp/bpe.hpp"
#include "mlmp/common.hpp"
#include "mlmp/model.hpp"
#include "mlmp/optim.hpp"
#include "mlmp/rng.hpp"

namespace mlmp {

// ---- task data ------------------------------------------------------------

struct ClassificationExample {
  std::string sentence_a;
  std::optional<std::string> sentence_b;
  uint32_t label = 0;
};

struct SpanExample {
  std::string context;
  std::string question;
  bool has_answer = false;  // false only in v2-style data
  uint32_t answer_start = 0;
  std::string answer_text;
};

struct ChoiceExample {
  std::string passage;
  std::string question;
  std::array<std::string, 4> choices;
  uint32_t label = 0;
};

// TSV: label <tab> sentence_a [<tab> sentence_b]
inline std::vector<ClassificationExample> load_classification_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read classification data: " + path);
  std::vector<ClassificationExample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t pos = 0;
    while (true) {
      const size_t tab = line.find('\t', pos);
      cols.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (cols.size() < 2 || cols.size() > 3)
      throw data_error("classification tsv line " + std::to_string(line_no) +
                       ": expected 2 or 3 columns");
    ClassificationExample ex;
    try {
      ex.label = static_cast<uint32_t>(std::stoul(cols[0]));
    } catch (const std::exception&) {
      throw data_error("classification tsv line " + std::to_string(line_no) + ": bad label");
    }
    ex.sentence_a = cols[1];
    if (cols.size() == 3) ex.sentence_b = cols[2];
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<SpanExample> load_span_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read span data: " + path);
  std::vector<SpanExample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw data_error("span jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    SpanExample ex;
    ex.context = j.at("context").get<std::string>();
    ex.question = j.at("question").get<std::string>();
    if (j.contains("answer_start") && !j["answer_start"].is_null()) {
      ex.has_answer = true;
      ex.answer_start = j["answer_start"].get<uint32_t>();
      ex.answer_text = j.at("answer_text").get<std::string>();
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<ChoiceExample> load_choice_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read choice data: " + path);
  std::vector<ChoiceExample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw data_error("choice jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    ChoiceExample ex;
    ex.passage = j.at("passage").get<std::string>();
    ex.question = j.at("question").get<std::string>();
    const auto& ch = j.at("choices");
    if (!ch.is_array() || ch.size() != 4)
      throw data_error("choice jsonl line " + std::to_string(line_no) +
                       ": expected exactly 4 choices");
    for (size_t i = 0; i < 4; ++i) ex.choices[i] = ch[i].get<std::string>();
    ex.label = j.at("label").get<uint32_t>();
    if (ex.label > 3)
      throw data_error("choice jsonl line " + std::to_string(line_no) + ": label out of range");
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- metrics ----------------------------------------------------------

inline double accuracy(std::span<const uint32_t> preds, std::span<const uint32_t> gold) {
  if (preds.size() != gold.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (preds.empty()) return 0.0;
  size_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == gold[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// Lowercase, strip punctuation, collapse whitespace; article words are
// dropped only for exact match (the F1 token multiset keeps them).
inline std::vector<std::string> normalize_answer_tokens(const std::string& text,
                                                        bool drop_articles) {
  std::string cleaned;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u))
      cleaned += static_cast<char>(std::tolower(u));
    else if (std::isspace(u) || std::ispunct(u))
      cleaned += ' ';
    else
      cleaned += static_cast<char>(std::tolower(u));
  }
  std::vector<std::string> words;
  std::istringstream ss(cleaned);
  std::string w;
  while (ss >> w)
    if (!drop_articles || (w != "a" && w != "an" && w != "the")) words.push_back(w);
  return words;
}

inline bool exact_match(const std::string& pred, const std::string& gold) {
  return normalize_answer_tokens(pred, true) == normalize_answer_tokens(gold, true);
}

// Token-level F1 with multiset overlap; duplicates count.
inline double span_f1(const std::string& pred, const std::string& gold) {
  const auto p = normalize_answer_tokens(pred, false);
  const auto g = normalize_answer_tokens(gold, false);
  if (p.empty() || g.empty()) return p == g ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const auto& w : g) counts[w] += 1;
  int overlap = 0;
  for (const auto& w : p) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / p.size();
  const double recall = static_cast<double>(overlap) / g.size();
  return 2.0 * precision * recall / (precision + recall);
}

// ---- encoding ---------------------------------------------------------

// Plain (unmasked) example wrapper so task inputs ride the same batch
// assembly as pretraining ones.
inline MaskedExample plain_example(std::vector<uint32_t> tokens, std::vector<uint8_t> segments) {
  MaskedExample ex;
  ex.labels.assign(tokens.size(), kNoPred);
  ex.input_ids = std::move(tokens);
  ex.segment_ids = std::move(segments);
  return ex;
}

// [CLS] a [SEP] b [EOS] (or [CLS] a [EOS]); over-length inputs are trimmed
// from the back of the longer side so the scaffold survives.
inline MaskedExample encode_classification(const ClassificationExample& ex, const Vocab& vocab,
                                           uint32_t T) {
  std::vector<uint32_t> a = encode(vocab, ex.sentence_a);
  if (!ex.sentence_b) {
    if (a.size() > T - 2) a.resize(T - 2);
    if (a.empty()) a.push_back(static_cast<uint32_t>(' '));
    std::vector<uint32_t> toks;
    toks.push_back(vocab.cls());
    toks.insert(toks.end(), a.begin(), a.end());
    toks.push_back(vocab.eos());
    return plain_example(std::move(toks), std::vector<uint8_t>(a.size() + 2, 0));
  }
  std::vector<uint32_t> b = encode(vocab, *ex.sentence_b);
  if (a.empty()) a.push_back(static_cast<uint32_t>(' '));
  if (b.empty()) b.push_back(static_cast<uint32_t>(' '));
  while (a.size() + b.size() > T - 3) {
    if (b.size() >= a.size() && b.size() > 1)
      b.pop_back();
    else
      a.pop_back();
  }
  std::vector<uint32_t> toks;
  toks.push_back(vocab.cls());
  toks.insert(toks.end(), a.begin(), a.end());
  toks.push_back(vocab.sep());
  const size_t seg_split = toks.size();
  toks.insert(toks.end(), b.begin(), b.end());
  toks.push_back(vocab.eos());
  std::vector<uint8_t> segs(toks.size(), 1);
  std::fill(segs.begin(), segs.begin() + seg_split, uint8_t{0});
  return plain_example(std::move(toks), std::move(segs));
}

struct EncodedSpan {
  MaskedExample input;
  uint32_t context_begin = 0;  // token range of the context inside the input
  uint32_t context_end = 0;
  bool has_answer = false;
  uint32_t start_target = 0;  // token indices in input coords
  uint32_t end_target = 0;
};

namespace detail {

inline std::string trim_spaces(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && s[b] == ' ') ++b;
  while (e > b && s[e - 1] == ' ') --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

// Maps the byte-offset answer span through the tokenizer. Returns nullopt
// when the span does not survive tokenization (caller counts drops).
inline std::optional<EncodedSpan> encode_span(const SpanExample& ex, const Vocab& vocab,
                                              uint32_t T) {
  std::vector<uint32_t> q = encode(vocab, ex.question);
  std::vector<uint32_t> c = encode(vocab, ex.context);
  if (c.empty()) return std::nullopt;
  const size_t q_budget = std::min<size_t>(q.size(), (T - 3) / 4);
  q.resize(q_budget);
  const size_t c_budget = T - 3 - q.size();

  EncodedSpan enc;
  enc.has_answer = ex.has_answer;

  // Byte offset of every context token (expansion lengths are exact).
  std::vector<uint32_t> starts(c.size());
  uint32_t off = 0;
  for (size_t i = 0; i < c.size(); ++i) {
    starts[i] = off;
    off += static_cast<uint32_t>(vocab.expansions[c[i]].size());
  }
  if (c.size() > c_budget) c.resize(c_budget);

  std::vector<uint32_t> toks;
  toks.push_back(vocab.cls());
  toks.insert(toks.end(), q.begin(), q.end());
  toks.push_back(vocab.sep());
  enc.context_begin = static_cast<uint32_t>(toks.size());
  toks.insert(toks.end(), c.begin(), c.end());
  enc.context_end = static_cast<uint32_t>(toks.size());
  toks.push_back(vocab.eos());
  std::vector<uint8_t> segs(toks.size(), 1);
  std::fill(segs.begin(), segs.begin() + enc.context_begin, uint8_t{0});
  enc.input = plain_example(std::move(toks), std::move(segs));

  if (ex.has_answer) {
    const uint32_t a_begin = ex.answer_start;
    const uint32_t a_end = a_begin + static_cast<uint32_t>(ex.answer_text.size());
    if (a_end > ex.context.size()) return std::nullopt;
    // token containing a_begin, token containing a_end-1
    uint32_t ts = UINT32_MAX, te = UINT32_MAX;
    for (size_t i = 0; i < c.size(); ++i) {
      const uint32_t tok_b = starts[i];
      const uint32_t tok_e =
          tok_b + static_cast<uint32_t>(vocab.expansions[c[i]].size());
      if (a_begin >= tok_b && a_begin < tok_e) ts = static_cast<uint32_t>(i);
      if (a_end - 1 >= tok_b && a_end - 1 < tok_e) te = static_cast<uint32_t>(i);
    }
    if (ts == UINT32_MAX || te == UINT32_MAX || te < ts) return std::nullopt;
    // Verify the mapped tokens reproduce the answer text up to edge spaces.
    std::string covered;
    for (uint32_t i = ts; i <= te; ++i) covered += vocab.expansions[c[i]];
    if (detail::trim_spaces(covered) != detail::trim_spaces(ex.answer_text))
      return std::nullopt;
    enc.start_target = enc.context_begin + ts;
    enc.end_target = enc.context_begin + te;
  }
  return enc;
}

struct EncodedChoice {
  std::array<MaskedExample, 4> inputs;
};

// RACE-style encoding: each choice is concatenated with the question, the
// pair is truncated to 128 tokens, then the passage is truncated so the whole
// input fits min(T, 512).
inline EncodedChoice encode_choice(const ChoiceExample& ex, const Vocab& vocab, uint32_t T) {
  const uint32_t total_cap = std::min<uint32_t>(T, 512);
  EncodedChoice enc;
  std::vector<uint32_t> passage = encode(vocab, ex.passage);
  for (size_t choice = 0; choice < 4; ++choice) {
    std::vector<uint32_t> qa = encode(vocab, ex.question + " " + ex.choices[choice]);
    if (qa.size() > 128) qa.resize(128);
    if (qa.empty()) qa.push_back(static_cast<uint32_t>(' '));
    std::vector<uint32_t> p = passage;
    const size_t p_budget = total_cap - 3 - std::min<size_t>(qa.size(), total_cap - 4);
    if (p.size() > p_budget) p.resize(p_budget);
    if (p.empty()) p.push_back(static_cast<uint32_t>(' '));
    std::vector<uint32_t> toks;
    toks.push_back(vocab.cls());
    toks.insert(toks.end(), qa.begin(), qa.end());
    toks.push_back(vocab.sep());
    const size_t seg_split = toks.size();
    toks.insert(toks.end(), p.begin(), p.end());
    toks.push_back(vocab.eos());
    std::vector<uint8_t> segs(toks.size(), 1);
    std::fill(segs.begin(), segs.begin() + seg_split, uint8_t{0});
    enc.inputs[choice] = plain_example(std::move(toks), std::move(segs));
  }
  return enc;
}

// ---- fine-tuning ------------------------------------------------------

struct FinetuneConfig {
  std::vector<double> lrs = {1e-5, 2e-5, 3e-5};
  std::vector<uint32_t> batch_sizes = {16, 32};
  uint32_t max_epochs = 10;
  double warmup_ratio = 0.06;
  double weight_decay = 0.1;
  double adam_eps = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.98;
  uint32_t num_seeds = 1;
  uint64_t seed = 1;
  uint32_t early_stop_patience = 3;
  uint32_t max_answer_tokens = 30;  // span inference window
  float dropout = 0.1f;

  OptConfig opt_for(double lr, uint64_t total_steps) const {
    OptConfig cfg;
    cfg.peak_lr = lr;
    cfg.total_steps = std::max<uint64_t>(total_steps, 2);
    cfg.warmup_steps = std::max<uint64_t>(
        1, static_cast<uint64_t>(warmup_ratio * static_cast<double>(cfg.total_steps)));
    cfg.weight_decay = weight_decay;
    cfg.eps = adam_eps;
    cfg.beta1 = beta1;
    cfg.beta2 = beta2;
    return cfg;
  }
};

struct LinearHead {
  Mat<float> w;  // hidden x outputs
  Vec<float> b;

  static LinearHead init(uint32_t hidden, uint32_t outputs, uint64_t seed) {
    LinearHead head;
    head.w.resize(hidden, outputs);
    head.b = Vec<float>::Zero(outputs);
    Rng rng = keyed_rng(seed, RngStream::finetune);
    for (Eigen::Index i = 0; i < head.w.size(); ++i) {
      double z = 0.02 * rng.normal();
      head.w.data()[i] = static_cast<float>(std::clamp(z, -0.04, 0.04));
    }
    return head;
  }

  void append_views(std::vector<FlatParam<float>>& views, const std::string& prefix) {
    views.push_back({prefix + ".w", w.data(), static_cast<size_t>(w.size()), true});
    views.push_back({prefix + ".b", b.data(), static_cast<size_t>(b.size()), false});
  }
};

struct SweepRun {
  double lr = 0.0;
  uint32_t batch_size = 0;
  uint64_t seed = 0;
  std::vector<double> dev_trace;  // metric after each epoch
  double best_dev = 0.0;
  uint32_t best_epoch = 0;
};

namespace detail {

inline std::vector<uint32_t> shuffled_indices(size_t n, uint64_t seed, uint64_t epoch) {
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = keyed_rng(seed, RngStream::finetune, epoch + 1);
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace detail

// ---- sequence classification ---------------------------------------------

struct ClassifierResult {
  ModelState<float> encoder;
  LinearHead head;
  double best_dev = 0.0;
  double median_dev = 0.0;  // over seeds at the winning grid point
  std::vector<SweepRun> runs;
};

namespace detail {

// One classification fine-tune at a fixed (lr, batch, seed); returns the best
// dev-accuracy snapshot.
inline std::tuple<ModelState<float>, LinearHead, SweepRun> finetune_classifier_once(
    const ModelState<float>& init, std::span<const MaskedExample> train,
    std::span<const uint32_t> train_labels, std::span<const MaskedExample> dev,
    std::span<const uint32_t> dev_labels, uint32_t num_classes, const FinetuneConfig& cfg,
    double lr, uint32_t batch_size, uint64_t seed) {
  ModelState<float> model = init;
  model.cfg.dropout = cfg.dropout;
  LinearHead head = LinearHead::init(model.cfg.hidden, num_classes, seed);
  const uint64_t steps_per_epoch = (train.size() + batch_size - 1) / batch_size;
  const OptConfig opt_cfg = cfg.opt_for(lr, steps_per_epoch * cfg.max_epochs);

  auto views = param_views(model);
  head.append_views(views, "cls_head");
  OptState<float> opt = OptState<float>::init(views);

  auto eval_acc = [&](const ModelState<float>& m, LinearHead& h) {
    std::vector<uint32_t> preds;
    preds.reserve(dev.size());
    for (size_t i = 0; i < dev.size(); i += 32) {
      const size_t n = std::min<size_t>(32, dev.size() - i);
      const ModelInput in = assemble_input(dev.subspan(i, n));
      const auto fw = forward(m, in, false);
      Mat<float> logits = fw.cls_rows * h.w;
      logits.rowwise() += h.b.transpose();
      for (size_t r = 0; r < n; ++r) {
        Eigen::Index arg = 0;
        logits.row(static_cast<Eigen::Index>(r)).maxCoeff(&arg);
        preds.push_back(static_cast<uint32_t>(arg));
      }
    }
    return accuracy(preds, dev_labels);
  };

  SweepRun run{lr, batch_size, seed, {}, 0.0, 0};
  ModelState<float> best_model = model;
  LinearHead best_head = head;
  uint32_t since_best = 0;
  uint64_t step = 0;
  for (uint32_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto order = shuffled_indices(train.size(), seed, epoch);
    for (size_t off = 0; off < order.size(); off += batch_size) {
      const size_t n = std::min<size_t>(batch_size, order.size() - off);
      std::vector<MaskedExample> batch;
      std::vector<uint32_t> labels;
      batch.reserve(n);
      for (size_t i = 0; i < n; ++i) {
        batch.push_back(train[order[off + i]]);
        labels.push_back(train_labels[order[off + i]]);
      }
      const ModelInput in = assemble_input(batch);
      const uint64_t key = derive_key(seed, RngStream::dropout, step, 0);
      const auto fw = forward(model, in, true, key);
      Mat<float> logits = fw.cls_rows * head.w;
      logits.rowwise() += head.b.transpose();
      Mat<float> dlogits = softmax_rows(logits);
      for (size_t r = 0; r < n; ++r) dlogits(static_cast<Eigen::Index>(r), labels[r]) -= 1.0f;
      dlogits *= 1.0f / static_cast<float>(n);

      ModelState<float> grads = zeros_like(model);
      LinearHead hgrad;
      hgrad.w = Mat<float>::Zero(head.w.rows(), head.w.cols());
      hgrad.b = Vec<float>::Zero(head.b.size());
      hgrad.w.noalias() += fw.cls_rows.transpose() * dlogits;
      hgrad.b += dlogits.colwise().sum().transpose();
      Mat<float> d_cls;
      d_cls.noalias() = dlogits * head.w.transpose();
      Mat<float> d_final = Mat<float>::Zero(fw.final_hidden.rows(), fw.final_hidden.cols());
      for (uint32_t b = 0; b < in.batch; ++b)
        d_final.row(static_cast<size_t>(b) * in.padded_len) = d_cls.row(b);
      encoder_backward(model, fw, in, std::move(d_final), grads);

      auto pv = param_views(model);
      head.append_views(pv, "cls_head");
      auto gv = param_views(grads);
      hgrad.append_views(gv, "cls_head");
      adam_step<float>(pv, opt, gv, opt_cfg);
      ++step;
    }
    const double acc = eval_acc(model, head);
    run.dev_trace.push_back(acc);
    if (acc > run.best_dev) {
      run.best_dev = acc;
      run.best_epoch = epoch;
      best_model = model;
      best_head = head;
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  return {std::move(best_model), std::move(best_head), std::move(run)};
}

}  // namespace detail

// Linear classifier on the CLS representation, fine-tuned jointly with the
// encoder over the (lr x batch) grid with early stopping on dev accuracy.
// With num_seeds > 1 the reported metric is the median over seeds.
inline ClassifierResult finetune_classifier(const ModelState<float>& init,
                                            const std::vector<ClassificationExample>& train,
                                            const std::vector<ClassificationExample>& dev,
                                            const Vocab& vocab, const FinetuneConfig& cfg) {
  uint32_t num_classes = 2;
  for (const auto& ex : train) num_classes = std::max(num_classes, ex.label + 1);
  for (const auto& ex : dev)
    if (ex.label >= num_classes) throw data_error("finetune: dev label out of range");

  std::vector<MaskedExample> train_enc, dev_enc;
  std::vector<uint32_t> train_labels, dev_labels;
  for (const auto& ex : train) {
    train_enc.push_back(encode_classification(ex, vocab, init.cfg.max_positions));
    train_labels.push_back(ex.label);
  }
  for (const auto& ex : dev) {
    dev_enc.push_back(encode_classification(ex, vocab, init.cfg.max_positions));
    dev_labels.push_back(ex.label);
  }

  ClassifierResult result;
  result.best_dev = -1.0;
  std::map<std::pair<double, uint32_t>, std::vector<double>> by_point;
  for (double lr : cfg.lrs) {
    for (uint32_t bsz : cfg.batch_sizes) {
      for (uint32_t s = 0; s < cfg.num_seeds; ++s) {
        auto [model, head, run] = detail::finetune_classifier_once(
            init, train_enc, train_labels, dev_enc, dev_labels, num_classes, cfg, lr, bsz,
            cfg.seed + s);
        by_point[{lr, bsz}].push_back(run.best_dev);
        if (run.best_dev > result.best_dev) {
          result.best_dev = run.best_dev;
          result.encoder = std::move(model);
          result.head = std::move(head);
        }
        result.runs.push_back(std::move(run));
      }
    }
  }
  double best_median = -1.0;
  for (const auto& [point, devs] : by_point)
    best_median = std::max(best_median, detail::median(devs));
  result.median_dev = best_median;
  return result;
}

// ---- span extraction ----------------------------------------------------

struct SpanHeads {
  LinearHead span;    // hidden x 2: start and end logits
  LinearHead answer;  // hidden x 2 on CLS: answerable / not (v2 only)
};

struct SpanResult {
  ModelState<float> encoder;
  SpanHeads heads;
  double dev_em = 0.0;
  double dev_f1 = 0.0;
  uint64_t dropped_examples = 0;
  std::vector<SweepRun> runs;
};

namespace detail {

struct SpanPrediction {
  bool answered = false;
  std::string text;
};

inline SpanPrediction predict_span(const ModelState<float>& model, const SpanHeads& heads,
                                   const EncodedSpan& enc, const Vocab& vocab,
                                   uint32_t max_answer_tokens, bool answerable_head) {
  std::vector<MaskedExample> one = {enc.input};
  const ModelInput in = assemble_input(one);
  const auto fw = forward(model, in, false);
  SpanPrediction pred;
  if (answerable_head) {
    Vec<float> alog = (fw.cls_rows.row(0) * heads.answer.w).transpose() + heads.answer.b;
    if (alog(0) >= alog(1)) return pred;  // classified unanswerable: no span predicted
  }
  Mat<float> logits = fw.final_hidden * heads.span.w;
  logits.rowwise() += heads.span.b.transpose();
  float best = -std::numeric_limits<float>::infinity();
  uint32_t bs = enc.context_begin, be = enc.context_begin;
  for (uint32_t s = enc.context_begin; s < enc.context_end; ++s) {
    for (uint32_t e = s; e < std::min(enc.context_end, s + max_answer_tokens); ++e) {
      const float score = logits(s, 0) + logits(e, 1);
      if (score > best) {
        best = score;
        bs = s;
        be = e;
      }
    }
  }
  pred.answered = true;
  std::string text;
  for (uint32_t i = bs; i <= be; ++i)
    text += vocab.expansions[enc.input.input_ids[i]];
  pred.text = trim_spaces(text);
  return pred;
}

}  // namespace detail

// Start/end span heads on token representations restricted to context
// positions; with answerable_head (v2) an extra binary classifier on CLS is
// trained jointly by summing the losses, and inference only predicts spans
// for pairs classified answerable.
inline SpanResult finetune_span(const ModelState<float>& init,
                                const std::vector<SpanExample>& train,
                                const std::vector<SpanExample>& dev, const Vocab& vocab,
                                const FinetuneConfig& cfg, bool answerable_head) {
  std::vector<EncodedSpan> train_enc;
  SpanResult result;
  for (const auto& ex : train) {
    if (!ex.has_answer && !answerable_head)
      throw data_error("finetune span: unanswerable example without answerable head");
    auto enc = encode_span(ex, vocab, init.cfg.max_positions);
    if (enc)
      train_enc.push_back(std::move(*enc));
    else
      ++result.dropped_examples;
  }
  std::vector<EncodedSpan> dev_enc;
  std::vector<const SpanExample*> dev_kept;
  for (const auto& ex : dev) {
    auto enc = encode_span(ex, vocab, init.cfg.max_positions);
    if (enc) {
      dev_enc.push_back(std::move(*enc));
      dev_kept.push_back(&ex);
    } else {
      ++result.dropped_examples;
    }
  }
  if (train_enc.empty() || dev_enc.empty())
    throw data_error("finetune span: no mappable examples");

  double best_metric = -1.0;
  for (double lr : cfg.lrs) {
    for (uint32_t bsz : cfg.batch_sizes) {
      ModelState<float> model = init;
      model.cfg.dropout = cfg.dropout;
      SpanHeads heads;
      heads.span = LinearHead::init(model.cfg.hidden, 2, cfg.seed);
      heads.answer = LinearHead::init(model.cfg.hidden, 2, cfg.seed + 17);
      const uint64_t steps_per_epoch = (train_enc.size() + bsz - 1) / bsz;
      const OptConfig opt_cfg = cfg.opt_for(lr, steps_per_epoch * cfg.max_epochs);
      auto views = param_views(model);
      heads.span.append_views(views, "span_head");
      heads.answer.append_views(views, "answer_head");
      OptState<float> opt = OptState<float>::init(views);

      auto eval = [&](const ModelState<float>& m, const SpanHeads& h) {
        double em_sum = 0, f1_sum = 0;
        for (size_t i = 0; i < dev_enc.size(); ++i) {
          const auto pred = detail::predict_span(m, h, dev_enc[i], vocab,
                                                 cfg.max_answer_tokens, answerable_head);
          const std::string gold = dev_kept[i]->has_answer ? dev_kept[i]->answer_text : "";
          const std::string ptext = pred.answered ? pred.text : "";
          em_sum += exact_match(ptext, gold) ? 1.0 : 0.0;
          f1_sum += span_f1(ptext, gold);
        }
        return std::pair<double, double>{em_sum / dev_enc.size(), f1_sum / dev_enc.size()};
      };

      SweepRun run{lr, bsz, cfg.seed, {}, -1.0, 0};
      ModelState<float> best_model = model;
      SpanHeads best_heads = heads;
      double best_f1 = 0.0;
      uint32_t since_best = 0;
      uint64_t step = 0;
      for (uint32_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto order = detail::shuffled_indices(train_enc.size(), cfg.seed, epoch);
        for (size_t off = 0; off < order.size(); off += bsz) {
          const size_t n = std::min<size_t>(bsz, order.size() - off);
          std::vector<MaskedExample> batch;
          batch.reserve(n);
          for (size_t i = 0; i < n; ++i) batch.push_back(train_enc[order[off + i]].input);
          const ModelInput in = assemble_input(batch);
          const uint64_t key = derive_key(cfg.seed, RngStream::dropout, step, 1);
          const auto fw = forward(model, in, true, key);

          Mat<float> logits = fw.final_hidden * heads.span.w;  // rows x 2
          logits.rowwise() += heads.span.b.transpose();
          Mat<float> dlogits = Mat<float>::Zero(logits.rows(), 2);
          Mat<float> d_final = Mat<float>::Zero(fw.final_hidden.rows(), fw.final_hidden.cols());

          // Span losses: softmax over context positions, start and end.
          float inv_n = 1.0f / static_cast<float>(n);
          uint32_t answerable_in_batch = 0;
          for (size_t i = 0; i < n; ++i)
            answerable_in_batch += train_enc[order[off + i]].has_answer;
          for (size_t i = 0; i < n; ++i) {
            const auto& enc = train_enc[order[off + i]];
            if (!enc.has_answer) continue;
            const size_t row0 = i * in.padded_len;
            for (int side = 0; side < 2; ++side) {
              const uint32_t target = side == 0 ? enc.start_target : enc.end_target;
              float mx = -std::numeric_limits<float>::infinity();
              for (uint32_t t = enc.context_begin; t < enc.context_end; ++t)
                mx = std::max(mx, logits(row0 + t, side));
              float denom = 0;
              for (uint32_t t = enc.context_begin; t < enc.context_end; ++t)
                denom += std::exp(logits(row0 + t, side) - mx);
              const float scale =
                  answerable_in_batch ? 1.0f / static_cast<float>(answerable_in_batch) : 0.0f;
              for (uint32_t t = enc.context_begin; t < enc.context_end; ++t) {
                float p = std::exp(logits(row0 + t, side) - mx) / denom;
                if (t == target) p -= 1.0f;
                dlogits(row0 + t, side) += 0.5f * p * scale;
              }
            }
          }
          LinearHead sgrad, agrad;
          sgrad.w = fw.final_hidden.transpose() * dlogits;
          sgrad.b = dlogits.colwise().sum().transpose();
          d_final.noalias() += dlogits * heads.span.w.transpose();

          // Answerability loss on CLS.
          agrad.w = Mat<float>::Zero(heads.answer.w.rows(), heads.answer.w.cols());
          agrad.b = Vec<float>::Zero(2);
          if (answerable_head) {
            Mat<float> alog = fw.cls_rows * heads.answer.w;
            alog.rowwise() += heads.answer.b.transpose();
            Mat<float> dalog = detail::softmax_rows(alog);
            for (size_t i = 0; i < n; ++i) {
              const uint32_t target = train_enc[order[off + i]].has_answer ? 1 : 0;
              dalog(static_cast<Eigen::Index>(i), target) -= 1.0f;
            }
            dalog *= inv_n;
            agrad.w.noalias() += fw.cls_rows.transpose() * dalog;
            agrad.b += dalog.colwise().sum().transpose();
            Mat<float> d_cls = dalog * heads.answer.w.transpose();
            for (size_t i = 0; i < n; ++i)
              d_final.row(i * in.padded_len) += d_cls.row(static_cast<Eigen::Index>(i));
          }

          ModelState<float> grads = zeros_like(model);
          encoder_backward(model, fw, in, std::move(d_final), grads);
          auto pv = param_views(model);
          heads.span.append_views(pv, "span_head");
          heads.answer.append_views(pv, "answer_head");
          auto gv = param_views(grads);
          sgrad.append_views(gv, "span_head");
          agrad.append_views(gv, "answer_head");
          adam_step<float>(pv, opt, gv, opt_cfg);
          ++step;
        }
        const auto [em, f1] = eval(model, heads);
        run.dev_trace.push_back(em);
        if (em > run.best_dev) {
          run.best_dev = em;
          run.best_epoch = epoch;
          best_model = model;
          best_heads = heads;
          best_f1 = f1;
          since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
          break;
        }
      }
      if (run.best_dev > best_metric) {
        best_metric = run.best_dev;
        result.encoder = std::move(best_model);
        result.heads = std::move(best_heads);
        result.dev_em = run.best_dev;
        result.dev_f1 = best_f1;
      }
      result.runs.push_back(std::move(run));
    }
  }
  return result;
}

// ---- multiple choice ----------------------------------------------------

struct ChoiceResult {
  ModelState<float> encoder;
  LinearHead head;  // hidden x 1, shared across the four choices
  double dev_accuracy = 0.0;
  std::vector<SweepRun> runs;
};

inline ChoiceResult finetune_choice(const ModelState<float>& init,
                                    const std::vector<ChoiceExample>& train,
                                    const std::vector<ChoiceExample>& dev, const Vocab& vocab,
                                    const FinetuneConfig& cfg) {
  std::vector<EncodedChoice> train_enc, dev_enc;
  for (const auto& ex : train) train_enc.push_back(encode_choice(ex, vocab, init.cfg.max_positions));
  for (const auto& ex : dev) dev_enc.push_back(encode_choice(ex, vocab, init.cfg.max_positions));

  ChoiceResult result;
  double best_metric = -1.0;
  for (double lr : cfg.lrs) {
    for (uint32_t bsz : cfg.batch_sizes) {
      ModelState<float> model = init;
      model.cfg.dropout = cfg.dropout;
      LinearHead head = LinearHead::init(model.cfg.hidden, 1, cfg.seed);
      const uint64_t steps_per_epoch = (train_enc.size() + bsz - 1) / bsz;
      const OptConfig opt_cfg = cfg.opt_for(lr, steps_per_epoch * cfg.max_epochs);
      auto views = param_views(model);
      head.append_views(views, "choice_head");
      OptState<float> opt = OptState<float>::init(views);

      auto eval = [&](const ModelState<float>& m, const LinearHead& h) {
        size_t correct = 0;
        for (size_t i = 0; i < dev_enc.size(); ++i) {
          std::vector<MaskedExample> four(dev_enc[i].inputs.begin(), dev_enc[i].inputs.end());
          const ModelInput in = assemble_input(four);
          const auto fw = forward(m, in, false);
          Vec<float> scores = fw.cls_rows * h.w;
          Eigen::Index arg = 0;
          scores.maxCoeff(&arg);
          correct += static_cast<uint32_t>(arg) == dev[i].label;
        }
        return static_cast<double>(correct) / dev_enc.size();
      };

      SweepRun run{lr, bsz, cfg.seed, {}, -1.0, 0};
      ModelState<float> best_model = model;
      LinearHead best_head = head;
      uint32_t since_best = 0;
      uint64_t step = 0;
      for (uint32_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto order = detail::shuffled_indices(train_enc.size(), cfg.seed, epoch);
        for (size_t off = 0; off < order.size(); off += bsz) {
          const size_t n = std::min<size_t>(bsz, order.size() - off);
          std::vector<MaskedExample> batch;
          batch.reserve(n * 4);
          for (size_t i = 0; i < n; ++i)
            for (const auto& input : train_enc[order[off + i]].inputs) batch.push_back(input);
          const ModelInput in = assemble_input(batch);
          const uint64_t key = derive_key(cfg.seed, RngStream::dropout, step, 2);
          const auto fw = forward(model, in, true, key);
          Vec<float> scores = fw.cls_rows * head.w;  // 4n x 1
          scores.array() += head.b(0);

          // Softmax cross-entropy over each example's four scores.
          Vec<float> dscores = Vec<float>::Zero(scores.size());
          for (size_t i = 0; i < n; ++i) {
            float mx = -std::numeric_limits<float>::infinity();
            for (int c = 0; c < 4; ++c) mx = std::max(mx, scores(4 * i + c));
            float denom = 0;
            for (int c = 0; c < 4; ++c) denom += std::exp(scores(4 * i + c) - mx);
            for (int c = 0; c < 4; ++c) {
              float p = std::exp(scores(4 * i + c) - mx) / denom;
              if (static_cast<uint32_t>(c) == train[order[off + i]].label) p -= 1.0f;
              dscores(4 * i + c) = p / static_cast<float>(n);
            }
          }
          LinearHead hgrad;
          hgrad.w = fw.cls_rows.transpose() * dscores;
          hgrad.b = Vec<float>::Zero(1);
          hgrad.b(0) = dscores.sum();
          Mat<float> d_final = Mat<float>::Zero(fw.final_hidden.rows(), fw.final_hidden.cols());
          for (Eigen::Index r = 0; r < dscores.size(); ++r)
            d_final.row(static_cast<size_t>(r) * in.padded_len) =
                dscores(r) * head.w.transpose();
          ModelState<float> grads = zeros_like(model);
          encoder_backward(model, fw, in, std::move(d_final), grads);
          auto pv = param_views(model);
          head.append_views(pv, "choice_head");
          auto gv = param_views(grads);
          hgrad.append_views(gv, "choice_head");
          adam_step<float>(pv, opt, gv, opt_cfg);
          ++step;
        }
        const double acc = eval(model, head);
        run.dev_trace.push_back(acc);
        if (acc > run.best_dev) {
          run.best_dev = acc;
          run.best_epoch = epoch;
          best_model = model;
          best_head = head;
          since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
          break;
        }
      }
      if (run.best_dev > best_metric) {
        best_metric = run.best_dev;
        result.encoder = std::move(best_model);
        result.head = std::move(best_head);
        result.dev_accuracy = run.best_dev;
      }
      result.runs.push_back(std::move(run));
    }
  }
  return result;
}

}  // namespace mlmp
