#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mlmp/trainer.hpp"
#include "testutil.hpp"

using namespace mlmp;

namespace {

std::string temp_dir(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

PretrainRun small_run(const Vocab& vocab) {
  PretrainRun run;
  run.model = ModelConfig::make(2, 32, 2, 32, vocab.size());
  run.optim.peak_lr = 1e-3;
  run.optim.warmup_steps = 20;
  run.optim.total_steps = 60;
  run.format = PackingFormat::full_sentences;
  run.masking = MaskingMode::dynamic;
  run.use_nsp = false;
  run.token_budget = 256;
  run.micro_batches = 1;
  run.heldout_fraction = 0.1;
  run.seed = 5;
  run.eval_every = 20;
  return run;
}

}  // namespace

TEST_CASE("uniform-logits model evaluates to exactly vocab-size perplexity") {
  const auto docs = testutil::markov_corpus(20000, 3);
  const auto vocab = train_bpe(docs, 256 + 5 + 64);
  auto cfg = ModelConfig::make(1, 16, 2, 32, vocab.size());
  auto st = init_params<float>(cfg, 1);
  auto views = param_views(st);
  for (auto& v : views)
    for (size_t i = 0; i < v.size; ++i) v.data[i] = 0.0f;  // all-zero weights: uniform logits
  const auto tok = tokenize_docs(docs, vocab);
  const auto packed = pack(PackingFormat::full_sentences, tok, vocab, 32, 1);
  const auto rep = evaluate_ppl(st, packed.instances, vocab, 7, 256, false);
  CHECK(std::abs(rep.ppl - static_cast<double>(vocab.size())) < 1e-3);
}

TEST_CASE("hand-computed two-position perplexity") {
  // NLLs ln2 and ln8: ppl = exp((ln2 + ln8)/2) = 4
  CHECK(ppl_from_nll(std::log(2.0) + std::log(8.0), 2) == Catch::Approx(4.0).epsilon(1e-12));
  CHECK_THROWS_AS(ppl_from_nll(1.0, 0), std::invalid_argument);
}

TEST_CASE("evaluation is deterministic and never mutates the model") {
  const auto docs = testutil::markov_corpus(20000, 5);
  const auto vocab = train_bpe(docs, 256 + 5 + 64);
  const auto st = init_params<float>(ModelConfig::make(1, 16, 2, 32, vocab.size()), 3);
  const auto tok = tokenize_docs(docs, vocab);
  const auto packed = pack(PackingFormat::full_sentences, tok, vocab, 32, 1);

  auto copy = st;
  const auto r1 = evaluate_ppl(st, packed.instances, vocab, 11, 256, false);
  const auto r2 = evaluate_ppl(st, packed.instances, vocab, 11, 256, false);
  CHECK(r1.ppl == r2.ppl);
  const auto r3 = evaluate_ppl(st, packed.instances, vocab, 12, 256, false);
  CHECK(r1.ppl != r3.ppl);

  auto va = param_views(const_cast<ModelState<float>&>(st));
  auto vb = param_views(copy);
  for (size_t t = 0; t < va.size(); ++t)
    CHECK(std::memcmp(va[t].data, vb[t].data, va[t].size * sizeof(float)) == 0);
}

TEST_CASE("empty held-out set is an error") {
  const auto vocab = Vocab::bytes_only();
  const auto st = init_params<float>(ModelConfig::make(1, 16, 2, 32, vocab.size()), 3);
  CHECK_THROWS_AS(evaluate_ppl(st, {}, vocab, 1, 256, false), data_error);
}

TEST_CASE("run validation ties use_nsp to the format unless overridden") {
  const auto vocab = Vocab::bytes_only();
  PretrainRun run = small_run(vocab);
  run.format = PackingFormat::full_sentences;
  run.use_nsp = true;
  CHECK_THROWS_AS(run.validate(), std::invalid_argument);
  run.allow_nsp_mismatch = true;
  CHECK_NOTHROW(run.validate());
  run = small_run(vocab);
  run.format = PackingFormat::segment_pair_nsp;
  run.use_nsp = false;
  CHECK_THROWS_AS(run.validate(), std::invalid_argument);
}

TEST_CASE("training loss trends down over the first steps") {
  const auto docs = testutil::markov_corpus(120000, 9);
  const auto vocab = train_bpe(docs, 256 + 5 + 250);
  PretrainRun run = small_run(vocab);
  run.model = ModelConfig::make(2, 32, 2, 32, vocab.size());
  run.optim.total_steps = 500;
  run.optim.warmup_steps = 50;
  run.token_budget = 256;
  const auto res = pretrain(run, docs, vocab);
  REQUIRE(res.step_losses.size() == 500);
  // window-100 smoothed loss is non-increasing (small slack fixed after the
  // first observation run)
  auto smoothed = [&](size_t end) {
    double sum = 0;
    for (size_t i = end - 100; i < end; ++i) sum += res.step_losses[i];
    return sum / 100.0;
  };
  for (size_t end = 100; end <= 450; end += 50)
    CHECK(smoothed(std::min<size_t>(end + 50, 500)) <= smoothed(end) + 0.02);
  CHECK(smoothed(500) < smoothed(100));
}

TEST_CASE("toy pretraining beats the unigram baseline on held-out data") {
  const auto docs = testutil::markov_corpus(150000, 21);
  const auto vocab = train_bpe(docs, 256 + 5 + 250);
  PretrainRun run = small_run(vocab);
  run.model = ModelConfig::make(2, 64, 2, 64, vocab.size());
  run.optim.total_steps = 400;
  run.optim.warmup_steps = 40;
  run.token_budget = 512;
  run.eval_every = 100;
  const auto res = pretrain(run, docs, vocab);

  const auto split = split_heldout(docs, run.heldout_fraction, run.seed);
  const auto train_tok = tokenize_docs(split.train, vocab);
  const auto held_tok = tokenize_docs(split.heldout, vocab);
  const auto train_packed = pack(run.format, train_tok, vocab, 64, run.seed);
  const auto held_packed = pack(run.format, held_tok, vocab, 64, run.seed);
  const double baseline = testutil::unigram_baseline_ppl(train_packed.instances,
                                                         held_packed.instances, vocab, run.seed);
  INFO("model ppl " << res.reports.back().ppl << " unigram " << baseline);
  CHECK(res.reports.back().ppl < baseline);
}

TEST_CASE("resume from a checkpoint continues bit-identically") {
  const auto docs = testutil::markov_corpus(40000, 31);
  const auto vocab = train_bpe(docs, 256 + 5 + 120);
  PretrainRun run = small_run(vocab);
  run.optim.total_steps = 20;
  run.optim.warmup_steps = 5;
  run.checkpoint_every = 10;
  run.masking = MaskingMode::static_masks;  // exercise the static path too

  const auto dir_a = temp_dir("mlmp_resume_a");
  const auto dir_b = temp_dir("mlmp_resume_b");
  pretrain(run, docs, vocab, dir_a);
  // interrupted run: continue from the step-10 snapshot of the first run
  pretrain(run, docs, vocab, dir_b, (std::filesystem::path(dir_a) / "ckpt-10").string());
  const auto full = slurp((std::filesystem::path(dir_a) / "final.model").string());
  const auto resumed = slurp((std::filesystem::path(dir_b) / "final.model").string());
  REQUIRE(full.size() > 100000);  // a real parameter dump, not an empty shell
  CHECK(full == resumed);
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST_CASE("diverging runs abort with a numeric error and keep the snapshot") {
  const auto docs = testutil::markov_corpus(30000, 41);
  const auto vocab = train_bpe(docs, 256 + 5 + 64);
  PretrainRun run = small_run(vocab);
  run.optim.peak_lr = 1e9;  // guaranteed blow-up
  run.optim.warmup_steps = 1;
  run.optim.total_steps = 50;
  const auto dir = temp_dir("mlmp_abort");
  CHECK_THROWS_AS(pretrain(run, docs, vocab, dir), numeric_error);
  bool has_abort_snapshot = false;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    has_abort_snapshot |= entry.path().filename().string().starts_with("abort-step-");
  CHECK(has_abort_snapshot);
  std::filesystem::remove_all(dir);
}

TEST_CASE("metrics csv has the expected columns and deterministic values") {
  const auto docs = testutil::markov_corpus(30000, 51);
  const auto vocab = train_bpe(docs, 256 + 5 + 64);
  PretrainRun run = small_run(vocab);
  run.optim.total_steps = 10;
  run.optim.warmup_steps = 2;
  run.eval_every = 5;
  const auto r1 = pretrain(run, docs, vocab);
  const auto r2 = pretrain(run, docs, vocab);
  const std::string csv = metrics_csv(r1.metrics);
  CHECK(csv.starts_with("step,loss,ppl,lr,tokens_per_sec\n"));
  REQUIRE(r1.metrics.size() == r2.metrics.size());
  for (size_t i = 0; i < r1.metrics.size(); ++i) {
    CHECK(r1.metrics[i].step == r2.metrics[i].step);
    CHECK(r1.metrics[i].loss == r2.metrics[i].loss);  // bit-equal across runs
    CHECK(r1.metrics[i].ppl == r2.metrics[i].ppl);
    CHECK(r1.metrics[i].lr == r2.metrics[i].lr);
  }
}

TEST_CASE("ablation presets enumerate formats times masking modes") {
  const auto vocab = Vocab::bytes_only();
  const auto presets = ablation_presets(small_run(vocab));
  REQUIRE(presets.size() == 8);
  std::set<std::string> names;
  for (const auto& p : presets) {
    names.insert(p.name);
    CHECK(p.use_nsp == format_uses_nsp(p.format));
  }
  CHECK(names.count("segment-pair+nsp/static") == 1);
  CHECK(names.count("segment-pair+nsp/dynamic") == 1);
  CHECK(names.count("sentence-pair+nsp/static") == 1);
  CHECK(names.count("sentence-pair+nsp/dynamic") == 1);
  CHECK(names.count("full-sentences/static") == 1);
  CHECK(names.count("full-sentences/dynamic") == 1);
  CHECK(names.count("doc-sentences/static") == 1);
  CHECK(names.count("doc-sentences/dynamic") == 1);
}

TEST_CASE("budget presets preserve batch*steps and carry reference metadata") {
  const auto presets = compute_budget_presets(16, 256, 3e-4);
  REQUIRE(presets.size() == 3);
  const uint64_t product = presets[0].batch_sequences * presets[0].steps;
  for (const auto& p : presets) CHECK(p.batch_sequences * p.steps == product);
  CHECK(presets[0].reference_batch == 256);
  CHECK(presets[0].reference_steps == 1000000);
  CHECK(presets[0].reference_lr == 1e-4);
  CHECK(presets[1].reference_batch == 2048);
  CHECK(presets[1].reference_steps == 125000);
  CHECK(presets[1].reference_lr == 7e-4);
  CHECK(presets[2].reference_batch == 8192);
  CHECK(presets[2].reference_steps == 31250);
  CHECK(presets[2].reference_lr == 1e-3);
}

TEST_CASE("ablation harness completes all presets at compute parity") {
  const auto docs = testutil::markov_corpus(25000, 61);
  const auto vocab = train_bpe(docs, 256 + 5 + 64);
  PretrainRun base = small_run(vocab);
  base.model = ModelConfig::make(1, 16, 2, 64, vocab.size());
  base.optim.total_steps = 1000;
  base.optim.warmup_steps = 10;
  base.token_budget = 256;
  const auto presets = ablation_presets(base);
  const auto report = run_ablation(presets, docs, vocab, 120);
  REQUIRE(report.rows.size() == 8);
  for (const auto& row : report.rows) {
    CHECK(row.sequences >= 120);
    CHECK(row.ppl > 0);
    const bool expect_nsp = row.name.find("+nsp") != std::string::npos;
    CHECK(row.has_nsp == expect_nsp);
  }
  CHECK(report.compute_parity_ok());
  const std::string table = format_ablation_table(report);
  for (const auto& row : report.rows) CHECK(table.find(row.name) != std::string::npos);
}
