#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mlmp/common.hpp"
#include "mlmp/corpus.hpp"
#include "mlmp/masking.hpp"
#include "mlmp/model.hpp"
#include "mlmp/optim.hpp"
#include "mlmp/packing.hpp"

namespace mlmp {

enum class MaskingMode : uint8_t { dynamic = 0, static_masks = 1 };

inline const char* masking_name(MaskingMode m) {
  return m == MaskingMode::dynamic ? "dynamic" : "static";
}

inline MaskingMode parse_masking(const std::string& name) {
  if (name == "dynamic") return MaskingMode::dynamic;
  if (name == "static") return MaskingMode::static_masks;
  throw usage_error("unknown masking mode: " + name);
}

struct PretrainRun {
  std::string name = "run";
  ModelConfig model;
  OptConfig optim;
  PackingFormat format = PackingFormat::full_sentences;
  MaskingMode masking = MaskingMode::dynamic;
  bool use_nsp = false;
  // Set to probe the NSP-loss/input-format discrepancy: keeps a pair input
  // format while dropping the loss, or vice versa.
  bool allow_nsp_mismatch = false;
  uint64_t token_budget = 512 * 16;  // tokens per optimizer update
  uint32_t micro_batches = 8;        // gradient accumulation factor
  double heldout_fraction = 0.05;
  uint64_t seed = 1;
  uint64_t eval_every = 200;
  uint64_t checkpoint_every = 0;  // 0 = only final
  uint64_t max_sequences = 0;     // 0 = run optim.total_steps updates
  std::string reference;          // provenance note for presets

  void validate() const {
    model.validate();
    optim.validate();
    if (!allow_nsp_mismatch && use_nsp != format_uses_nsp(format))
      throw std::invalid_argument(
          "pretrain run: use_nsp must match the packing format (set allow_nsp_mismatch to "
          "override)");
    if (micro_batches == 0) throw std::invalid_argument("pretrain run: micro_batches >= 1");
    if (token_budget / micro_batches < model.max_positions)
      throw std::invalid_argument("pretrain run: per-micro token budget below max length");
  }
};

struct EvalReport {
  uint64_t step = 0;
  double nll = 0.0;
  double ppl = 0.0;
  double nsp_accuracy = 0.0;
  bool has_nsp = false;
  double wall_seconds = 0.0;
};

inline double ppl_from_nll(double nll_sum, uint64_t positions) {
  if (positions == 0) throw std::invalid_argument("ppl: no masked positions");
  return std::exp(nll_sum / static_cast<double>(positions));
}

// Held-out masked NLL with dropout disabled and masking fixed by eval_seed.
// Never mutates the model.
inline EvalReport evaluate_ppl(const ModelState<float>& state,
                               const std::vector<TrainingInstance>& heldout, const Vocab& vocab,
                               uint64_t eval_seed, uint64_t token_budget, bool use_nsp) {
  if (heldout.empty()) throw data_error("evaluate_ppl: empty held-out set");
  EvalReport rep;
  double nll_sum = 0.0;
  uint64_t positions = 0, nsp_correct = 0, nsp_total = 0;

  std::vector<uint32_t> order(heldout.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batches = batch_indices_by_tokens(heldout, order, token_budget);
  for (const auto& batch : batches) {
    std::vector<MaskedExample> examples;
    examples.reserve(batch.size());
    for (uint32_t idx : batch) {
      Rng rng = keyed_rng(eval_seed, RngStream::mask_eval, heldout[idx].id);
      examples.push_back(apply_mask(heldout[idx], vocab, rng));
    }
    const ModelInput in = assemble_input(examples);
    const auto fw = forward(state, in, /*train_mode=*/false);
    for (Eigen::Index r = 0; r < fw.mlm_logits.rows(); ++r) {
      const float mx = fw.mlm_logits.row(r).maxCoeff();
      const double lse = std::log((fw.mlm_logits.row(r).array() - mx).exp().sum()) +
                         static_cast<double>(mx);
      nll_sum += lse - static_cast<double>(fw.mlm_logits(r, in.mask_labels[r]));
    }
    positions += in.mask_positions.size();
    if (use_nsp && in.has_nsp()) {
      for (uint32_t b = 0; b < in.batch; ++b) {
        const uint32_t pred = fw.nsp_logits(b, 1) > fw.nsp_logits(b, 0) ? 1 : 0;
        nsp_correct += pred == in.nsp_labels[b];
        ++nsp_total;
      }
    }
  }
  rep.nll = nll_sum / static_cast<double>(positions);
  rep.ppl = ppl_from_nll(nll_sum, positions);
  rep.has_nsp = nsp_total > 0;
  rep.nsp_accuracy = nsp_total ? static_cast<double>(nsp_correct) / nsp_total : 0.0;
  return rep;
}

struct MetricsRow {
  uint64_t step = 0;
  double loss = 0.0;
  double ppl = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "step,loss,ppl,lr,tokens_per_sec\n";
  out.setf(std::ios::fmtflags(0), std::ios::floatfield);
  for (const auto& r : rows) {
    out.precision(10);
    out << r.step << ',' << r.loss << ',' << r.ppl << ',' << r.lr << ',';
    out.precision(4);
    out << r.tokens_per_sec << "\n";
  }
  return out.str();
}

struct PretrainResult {
  ModelState<float> state;
  std::vector<EvalReport> reports;
  std::vector<MetricsRow> metrics;
  std::vector<double> step_losses;  // training loss per update
  PackStats pack_stats;
  uint64_t steps_done = 0;
  uint64_t sequences_consumed = 0;
  uint64_t batches_consumed = 0;
  uint64_t max_batch_instances = 0;
  uint64_t train_instances = 0;
  uint64_t heldout_instances = 0;
};

// ---- train-state sidecar (optimizer moments + loop cursor) ---------------

namespace detail {

inline constexpr uint32_t kTrainStateMagic = 0x3153544Du;  // "MTS1"

inline void w_u64(std::ofstream& f, uint64_t v) {
  w_u32(f, static_cast<uint32_t>(v & 0xFFFFFFFFu));
  w_u32(f, static_cast<uint32_t>(v >> 32));
}

inline uint64_t r_u64(std::ifstream& f) {
  const uint64_t lo = r_u32(f);
  const uint64_t hi = r_u32(f);
  return lo | (hi << 32);
}

struct TrainCursor {
  uint64_t step = 0;
  uint64_t epoch = 0;
  uint64_t micro_cursor = 0;
  uint64_t sequences = 0;
  uint64_t batches = 0;
};

inline void save_train_state(const std::string& path, const TrainCursor& cur,
                             const OptState<float>& opt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write train state: " + path);
  w_u32(f, kTrainStateMagic);
  w_u32(f, 1);
  w_u64(f, cur.step);
  w_u64(f, cur.epoch);
  w_u64(f, cur.micro_cursor);
  w_u64(f, cur.sequences);
  w_u64(f, cur.batches);
  w_u64(f, opt.step);
  w_u32(f, static_cast<uint32_t>(opt.m.size()));
  for (size_t t = 0; t < opt.m.size(); ++t) {
    w_u32(f, static_cast<uint32_t>(opt.m[t].size()));
    for (float v : opt.m[t]) w_f32(f, v);
    for (float v : opt.v[t]) w_f32(f, v);
  }
}

inline void load_train_state(const std::string& path, TrainCursor& cur, OptState<float>& opt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read train state: " + path);
  if (r_u32(f) != kTrainStateMagic) throw data_error("train state: bad magic");
  if (r_u32(f) != 1) throw data_error("train state: bad version");
  cur.step = r_u64(f);
  cur.epoch = r_u64(f);
  cur.micro_cursor = r_u64(f);
  cur.sequences = r_u64(f);
  cur.batches = r_u64(f);
  opt.step = r_u64(f);
  const uint32_t count = r_u32(f);
  if (count != opt.m.size()) throw data_error("train state: tensor count mismatch");
  for (size_t t = 0; t < count; ++t) {
    const uint32_t n = r_u32(f);
    if (n != opt.m[t].size()) throw data_error("train state: tensor size mismatch");
    for (uint32_t i = 0; i < n; ++i) opt.m[t][i] = r_f32(f);
    for (uint32_t i = 0; i < n; ++i) opt.v[t][i] = r_f32(f);
  }
}

inline std::vector<uint32_t> epoch_order(size_t n, uint64_t seed, uint64_t epoch) {
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = keyed_rng(seed, RngStream::batch_order, epoch);
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

}  // namespace detail

// Pretraining loop: packing -> masking -> forward/backward -> accumulate ->
// Adam, with held-out perplexity evaluation and resumable checkpoints. Every
// random choice is keyed by (seed, epoch/step, instance id), so an
// interrupted run resumed from a checkpoint continues bit-identically.
inline PretrainResult pretrain(const PretrainRun& run, const std::vector<Document>& corpus,
                               const Vocab& vocab, const std::string& out_dir = "",
                               const std::string& resume_prefix = "") {
  run.validate();
  if (corpus.empty()) throw data_error("pretrain: empty corpus");
  const auto t0 = std::chrono::steady_clock::now();

  const CorpusSplit split = split_heldout(corpus, run.heldout_fraction, run.seed);
  if (split.train.empty()) throw data_error("pretrain: empty train split");
  const auto train_tok = tokenize_docs(split.train, vocab);
  const auto held_tok = tokenize_docs(split.heldout, vocab);
  PackResult packed = pack(run.format, train_tok, vocab, run.model.max_positions, run.seed);
  PackResult held = pack(run.format, held_tok, vocab, run.model.max_positions, run.seed);
  if (packed.instances.empty()) throw data_error("pretrain: no training instances packed");

  PretrainResult res;
  res.pack_stats = packed.stats;
  res.train_instances = packed.instances.size();
  res.heldout_instances = held.instances.size();

  // Static masking: ten replicas per instance, chosen by epoch % 10.
  std::vector<StaticMaskSet> static_sets;
  if (run.masking == MaskingMode::static_masks) {
    static_sets.reserve(packed.instances.size());
    for (const auto& inst : packed.instances)
      static_sets.push_back(build_static_masks(inst, vocab, run.seed));
  }

  ModelState<float> state = init_params<float>(run.model, run.seed);
  auto views = param_views(state);
  OptState<float> opt = OptState<float>::init(views);
  AccumState<float> acc = AccumState<float>::init(views);
  ModelState<float> flushed = zeros_like(state);

  detail::TrainCursor cur;
  if (!resume_prefix.empty()) {
    state = load_checkpoint(resume_prefix + ".model");
    views = param_views(state);
    detail::load_train_state(resume_prefix + ".train", cur, opt);
  }

  const uint64_t micro_budget = run.token_budget / run.micro_batches;
  std::vector<std::vector<uint32_t>> micros;
  auto rebuild_epoch = [&]() {
    const auto order = detail::epoch_order(packed.instances.size(), run.seed, cur.epoch);
    micros = batch_indices_by_tokens(packed.instances, order, micro_budget);
  };
  rebuild_epoch();

  const std::filesystem::path out_path(out_dir);
  if (!out_dir.empty()) std::filesystem::create_directories(out_path);
  auto save_snapshot = [&](const std::string& stem) {
    if (out_dir.empty()) return;
    save_checkpoint(state, (out_path / (stem + ".model")).string());
    detail::save_train_state((out_path / (stem + ".train")).string(), cur, opt);
  };

  double window_loss = 0.0;
  uint64_t window_tokens = 0, window_masked = 0;
  auto window_t0 = std::chrono::steady_clock::now();

  // append-only metrics: header once, one row per evaluation
  const auto csv_path = out_path / "metrics.csv";
  auto append_csv = [&](const MetricsRow& row) {
    if (out_dir.empty()) return;
    const bool fresh = !std::filesystem::exists(csv_path);
    std::ofstream csv(csv_path, std::ios::binary | std::ios::app);
    if (fresh) csv << "step,loss,ppl,lr,tokens_per_sec\n";
    csv << metrics_csv({row}).substr(std::string("step,loss,ppl,lr,tokens_per_sec\n").size());
  };

  auto emit_eval = [&]() {
    EvalReport rep;
    if (!held.instances.empty()) {
      rep = evaluate_ppl(state, held.instances, vocab, run.seed, micro_budget, run.use_nsp);
    }
    rep.step = cur.step;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.reports.push_back(rep);
    MetricsRow row;
    row.step = cur.step;
    row.loss = window_masked ? window_loss / static_cast<double>(window_masked) : 0.0;
    row.ppl = rep.ppl;
    row.lr = lr_at(run.optim, cur.step);
    const double dt =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - window_t0).count();
    row.tokens_per_sec = dt > 0 ? static_cast<double>(window_tokens) / dt : 0.0;
    res.metrics.push_back(row);
    append_csv(row);
    window_loss = 0.0;
    window_tokens = 0;
    window_masked = 0;
    window_t0 = std::chrono::steady_clock::now();
  };

  while (cur.step < run.optim.total_steps &&
         (run.max_sequences == 0 || cur.sequences < run.max_sequences)) {
    double update_loss = 0.0;
    uint64_t update_masked = 0;
    for (uint32_t k = 0; k < run.micro_batches; ++k) {
      if (cur.micro_cursor >= micros.size()) {
        cur.epoch += 1;  // corpus exhausted: advance the epoch, which rekeys masking
        cur.micro_cursor = 0;
        rebuild_epoch();
      }
      const auto& batch = micros[cur.micro_cursor++];
      std::vector<MaskedExample> examples;
      examples.reserve(batch.size());
      for (uint32_t idx : batch) {
        if (run.masking == MaskingMode::dynamic)
          examples.push_back(dynamic_mask(packed.instances[idx], vocab, run.seed, cur.epoch));
        else
          examples.push_back(static_sets[idx].for_epoch(cur.epoch));
      }
      const ModelInput in = assemble_input(examples);
      const uint64_t dropout_key = derive_key(run.seed, RngStream::dropout, cur.step, k);
      const auto fw = forward(state, in, /*train_mode=*/true, dropout_key);
      const auto li = loss(fw, in, run.use_nsp);
      if (!std::isfinite(li.total)) {
        save_snapshot("abort-step-" + std::to_string(cur.step));
        throw numeric_error("pretrain: non-finite loss at step " + std::to_string(cur.step));
      }
      ModelState<float> grads = backward(state, fw, in, run.use_nsp);
      accumulate(acc, grads, li.masked_count);
      update_loss += static_cast<double>(li.total) * li.masked_count;
      update_masked += li.masked_count;
      window_loss += static_cast<double>(li.total) * li.masked_count;
      window_masked += li.masked_count;
      window_tokens += in.total_tokens;
      cur.sequences += batch.size();
      cur.batches += 1;
      res.max_batch_instances = std::max(res.max_batch_instances, (uint64_t)batch.size());
    }
    flush(acc, flushed);
    adam_step(state, opt, flushed, run.optim);
    cur.step += 1;
    res.step_losses.push_back(update_loss / static_cast<double>(update_masked));
    if (run.eval_every && (cur.step % run.eval_every == 0 || cur.step == run.optim.total_steps))
      emit_eval();
    if (run.checkpoint_every && cur.step % run.checkpoint_every == 0)
      save_snapshot("ckpt-" + std::to_string(cur.step));
  }
  if (res.metrics.empty() || res.metrics.back().step != cur.step) emit_eval();

  res.steps_done = cur.step;
  res.sequences_consumed = cur.sequences;
  res.batches_consumed = cur.batches;
  if (!out_dir.empty()) save_snapshot("final");
  res.state = std::move(state);
  return res;
}

// ---- ablation presets -------------------------------------------------

// The four input formats crossed with static/dynamic masking, all at the same
// sequence budget so results are compute-comparable.
inline std::vector<PretrainRun> ablation_presets(const PretrainRun& base) {
  std::vector<PretrainRun> out;
  for (PackingFormat fmt :
       {PackingFormat::segment_pair_nsp, PackingFormat::sentence_pair_nsp,
        PackingFormat::full_sentences, PackingFormat::doc_sentences}) {
    for (MaskingMode mode : {MaskingMode::static_masks, MaskingMode::dynamic}) {
      PretrainRun run = base;
      run.format = fmt;
      run.masking = mode;
      run.use_nsp = format_uses_nsp(fmt);
      run.name = std::string(format_name(fmt)) + (run.use_nsp ? "+nsp" : "") + "/" +
                 masking_name(mode);
      out.push_back(std::move(run));
    }
  }
  return out;
}

// Compute-equivalent (batch, steps, lr) family. Reference metadata carries the
// full-scale settings this preset stands in for; the toy points keep
// batch*steps constant.
struct BudgetPreset {
  std::string name;
  uint64_t batch_sequences = 0;
  uint64_t steps = 0;
  double lr = 0.0;
  uint64_t reference_batch = 0;
  uint64_t reference_steps = 0;
  double reference_lr = 0.0;
};

inline std::vector<BudgetPreset> compute_budget_presets(uint64_t toy_batch = 16,
                                                       uint64_t toy_steps = 256,
                                                       double toy_lr = 3e-4) {
  std::vector<BudgetPreset> out;
  out.push_back({"base", toy_batch, toy_steps, toy_lr, 256, 1000000, 1e-4});
  out.push_back({"8x-batch", toy_batch * 8, toy_steps / 8, toy_lr * 7.0, 2048, 125000, 7e-4});
  out.push_back({"32x-batch", toy_batch * 32, toy_steps / 32, toy_lr * 10.0, 8192, 31250, 1e-3});
  return out;
}

struct AblationRow {
  std::string name;
  uint64_t steps = 0;
  uint64_t sequences = 0;
  uint64_t max_batch_instances = 0;
  double ppl = 0.0;
  double nsp_accuracy = 0.0;
  bool has_nsp = false;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  uint64_t sequence_budget = 0;

  // Largest deviation of consumed sequences from the budget, in batches.
  bool compute_parity_ok() const {
    for (const auto& r : rows) {
      const uint64_t slack = std::max<uint64_t>(r.max_batch_instances, 1);
      const uint64_t diff =
          r.sequences > sequence_budget ? r.sequences - sequence_budget : sequence_budget - r.sequences;
      if (diff > slack) return false;
    }
    return true;
  }
};

inline std::string format_ablation_table(const AblationReport& rep) {
  std::ostringstream out;
  out << "preset                          steps  sequences  ppl        nsp_acc\n";
  for (const auto& r : rep.rows) {
    out << r.name;
    for (size_t i = r.name.size(); i < 32; ++i) out << ' ';
    std::ostringstream ppl;
    ppl.precision(4);
    ppl << std::fixed << r.ppl;
    out << r.steps << "      " << r.sequences << "       " << ppl.str() << "     ";
    if (r.has_nsp) {
      std::ostringstream acc;
      acc.precision(3);
      acc << std::fixed << r.nsp_accuracy;
      out << acc.str();
    } else {
      out << "-";
    }
    out << "\n";
  }
  return out.str();
}

// Runs every preset to the same sequence budget and reports final held-out
// perplexity per row. No ordering among results is asserted anywhere; the
// harness checks completion and compute parity only.
inline AblationReport run_ablation(const std::vector<PretrainRun>& presets,
                                   const std::vector<Document>& corpus, const Vocab& vocab,
                                   uint64_t sequence_budget, const std::string& out_dir = "") {
  AblationReport rep;
  rep.sequence_budget = sequence_budget;
  for (const auto& preset : presets) {
    PretrainRun run = preset;
    run.max_sequences = sequence_budget;
    PretrainResult res = pretrain(run, corpus, vocab);
    AblationRow row;
    row.name = run.name;
    row.steps = res.steps_done;
    row.sequences = res.sequences_consumed;
    row.max_batch_instances = res.max_batch_instances;
    if (!res.reports.empty()) {
      row.ppl = res.reports.back().ppl;
      row.has_nsp = res.reports.back().has_nsp;
      row.nsp_accuracy = res.reports.back().nsp_accuracy;
    }
    rep.rows.push_back(std::move(row));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(std::filesystem::path(out_dir) / "ablation.txt", std::ios::binary);
    out << format_ablation_table(rep);
  }
  return rep;
}

}  // namespace mlmp
