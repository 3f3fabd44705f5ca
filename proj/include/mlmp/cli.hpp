#pragma once

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "mlmp/bpe.hpp"
#include "mlmp/common.hpp"
#include "mlmp/config.hpp"
#include "mlmp/corpus.hpp"
#include "mlmp/manifest.hpp"
#include "mlmp/masking.hpp"
#include "mlmp/model.hpp"
#include "mlmp/optim.hpp"
#include "mlmp/packing.hpp"
#include "mlmp/tasks.hpp"
#include "mlmp/trainer.hpp"

namespace mlmp::cli {

namespace detail {

// A directory argument expands to its *.txt files in sorted order.
inline std::vector<std::string> expand_corpus_paths(const std::vector<std::string>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) {
    if (std::filesystem::is_directory(p)) {
      std::vector<std::string> found;
      for (const auto& entry : std::filesystem::directory_iterator(p))
        if (entry.is_regular_file() && entry.path().extension() == ".txt")
          found.push_back(entry.path().string());
      std::sort(found.begin(), found.end());
      if (found.empty()) throw data_error("no .txt files in corpus directory: " + p);
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

inline std::string read_all_stdin() {
  std::ostringstream buf;
  buf << std::cin.rdbuf();
  return buf.str();
}

inline void save_head(const LinearHead& head, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write head file: " + path);
  mlmp::detail::w_u32(f, static_cast<uint32_t>(head.w.rows()));
  mlmp::detail::w_u32(f, static_cast<uint32_t>(head.w.cols()));
  for (Eigen::Index i = 0; i < head.w.size(); ++i) mlmp::detail::w_f32(f, head.w.data()[i]);
  for (Eigen::Index i = 0; i < head.b.size(); ++i) mlmp::detail::w_f32(f, head.b.data()[i]);
}

}  // namespace detail

inline int dispatch(std::vector<std::string> args) {
  CLI::App app{"masked language model pretraining toolkit"};
  app.require_subcommand(1);

  uint64_t global_seed = 1;
  if (const char* env = std::getenv("MLMP_SEED")) global_seed = std::strtoull(env, nullptr, 10);
  int threads = 0;
  app.add_option("--threads", threads, "cap worker parallelism (0 = library default)");

  // corpus stats
  auto* corpus_cmd = app.add_subcommand("corpus", "corpus utilities");
  auto* corpus_stats_cmd = corpus_cmd->add_subcommand("stats", "print document/sentence/byte counts");
  std::vector<std::string> stats_paths;
  corpus_stats_cmd->add_option("paths", stats_paths, "corpus .txt files")->required();

  // train-bpe
  auto* train_bpe_cmd = app.add_subcommand("train-bpe", "train a byte-level BPE vocab");
  uint64_t bpe_size = 50000;
  std::string bpe_out;
  std::vector<std::string> bpe_paths;
  train_bpe_cmd->add_option("--size", bpe_size, "target vocab size (default 50000)");
  train_bpe_cmd->add_option("--out", bpe_out, "output vocab file")->required();
  train_bpe_cmd->add_option("paths", bpe_paths, "corpus .txt files")->required();

  // encode / decode
  auto* encode_cmd = app.add_subcommand("encode", "encode text to token ids");
  std::string encode_vocab;
  bool encode_stdin = false;
  std::vector<std::string> encode_text;
  encode_cmd->add_option("--vocab", encode_vocab, "vocab file")->required();
  encode_cmd->add_flag("--stdin", encode_stdin, "read text from stdin");
  encode_cmd->add_option("text", encode_text, "text arguments (joined by spaces)");

  auto* decode_cmd = app.add_subcommand("decode", "decode token ids from stdin");
  std::string decode_vocab;
  decode_cmd->add_option("--vocab", decode_vocab, "vocab file")->required();

  // pack
  auto* pack_cmd = app.add_subcommand("pack", "pack a corpus into training instances");
  std::string pack_format = "full-sentences", pack_vocab, pack_out;
  uint64_t pack_maxlen = 512, pack_seed = global_seed;
  std::vector<std::string> pack_paths;
  pack_cmd->add_option("--format", pack_format,
                       "segment-pair|sentence-pair|full-sentences|doc-sentences");
  pack_cmd->add_option("--vocab", pack_vocab, "vocab file")->required();
  pack_cmd->add_option("--max-len", pack_maxlen, "maximum sequence length T");
  pack_cmd->add_option("--seed", pack_seed, "rng seed")->envname("MLMP_SEED");
  pack_cmd->add_option("--out", pack_out, "output instance file")->required();
  pack_cmd->add_option("paths", pack_paths, "corpus .txt files")->required();

  // stats mask
  auto* stats_cmd = app.add_subcommand("stats", "pipeline statistics");
  auto* mask_stats_cmd = stats_cmd->add_subcommand("mask", "empirical masking fractions");
  std::string ms_instances, ms_vocab;
  uint64_t ms_samples = 10000, ms_seed = global_seed;
  mask_stats_cmd->add_option("--instances", ms_instances, "instance file")->required();
  mask_stats_cmd->add_option("--vocab", ms_vocab, "vocab file")->required();
  mask_stats_cmd->add_option("--samples", ms_samples, "number of maskings to draw");
  mask_stats_cmd->add_option("--seed", ms_seed, "rng seed")->envname("MLMP_SEED");

  // pretrain
  auto* pretrain_cmd = app.add_subcommand("pretrain", "run the pretraining loop");
  std::string pt_config, pt_vocab, pt_out, pt_resume;
  std::vector<std::string> pt_corpus;
  pretrain_cmd->add_option("--config", pt_config, "run config file")->required();
  pretrain_cmd->add_option("--corpus", pt_corpus, "corpus files or directories")->required();
  pretrain_cmd->add_option("--vocab", pt_vocab, "trained vocab file")->required();
  pretrain_cmd->add_option("--out", pt_out, "output directory")->required();
  pretrain_cmd->add_option("--resume", pt_resume, "checkpoint prefix to resume from");

  // eval-ppl
  auto* eval_cmd = app.add_subcommand("eval-ppl", "held-out masked perplexity");
  std::string ev_ckpt, ev_heldout, ev_vocab;
  uint64_t ev_seed = global_seed;
  eval_cmd->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--heldout", ev_heldout, "packed held-out instance file")->required();
  eval_cmd->add_option("--vocab", ev_vocab, "vocab file")->required();
  eval_cmd->add_option("--seed", ev_seed, "eval masking seed")->envname("MLMP_SEED");

  // finetune
  auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a pretrained checkpoint");
  std::string ft_task, ft_ckpt, ft_train, ft_dev, ft_cfg, ft_vocab, ft_out, ft_init_from;
  bool ft_answerable = false;
  ft_cmd->add_option("task", ft_task, "cls|span|choice")->required();
  ft_cmd->add_option("--ckpt", ft_ckpt, "pretrained checkpoint")->required();
  ft_cmd->add_option("--init-from", ft_init_from,
                     "start from this checkpoint instead (e.g. another task's encoder)");
  ft_cmd->add_option("--train", ft_train, "training data")->required();
  ft_cmd->add_option("--dev", ft_dev, "dev data")->required();
  ft_cmd->add_option("--cfg", ft_cfg, "finetune config file");
  ft_cmd->add_option("--vocab", ft_vocab, "vocab file")->required();
  ft_cmd->add_option("--out", ft_out, "output directory");
  ft_cmd->add_flag("--answerable-head", ft_answerable,
                   "train the joint answerability classifier (span task)");

  // equiv-budget
  auto* eq_cmd = app.add_subcommand("equiv-budget", "compute-equivalent (batch, steps) pairs");
  uint64_t eq_bsz = 0, eq_steps = 0;
  std::vector<uint64_t> eq_requests;
  eq_cmd->add_option("reference-batch", eq_bsz, "reference batch size")->required();
  eq_cmd->add_option("reference-steps", eq_steps, "reference step count")->required();
  eq_cmd->add_option("--bsz", eq_requests, "requested batch sizes")->required();

  try {
    std::vector<char*> argv;
    argv.reserve(args.size());
    for (auto& a : args) argv.push_back(a.data());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (threads > 0) Eigen::setNbThreads(threads);

  try {
    if (*corpus_stats_cmd) {
      const auto docs = load_corpus(detail::expand_corpus_paths(stats_paths));
      const auto st = corpus_stats(docs);
      std::cout << "documents " << st.documents << "\nsentences " << st.sentences
                << "\nbytes " << st.bytes << "\n";
      return 0;
    }

    if (*train_bpe_cmd) {
      const auto paths = detail::expand_corpus_paths(bpe_paths);
      RunManifest manifest =
          make_manifest(args, "size=" + std::to_string(bpe_size), {}, paths);
      write_manifest(manifest, bpe_out + ".manifest.json");
      const auto docs = load_corpus(paths);
      const Vocab vocab = train_bpe(docs, static_cast<uint32_t>(bpe_size));
      save_vocab(vocab, bpe_out);
      manifest.finished_at = mlmp::detail::iso_timestamp();
      write_manifest(manifest, bpe_out + ".manifest.json");
      std::cout << "vocab size " << vocab.size() << " merges " << vocab.merges.size() << "\n";
      return 0;
    }

    if (*encode_cmd) {
      const Vocab vocab = load_vocab(encode_vocab);
      std::string text;
      if (encode_stdin || encode_text.empty()) {
        text = detail::read_all_stdin();
      } else {
        for (size_t i = 0; i < encode_text.size(); ++i)
          text += (i ? " " : "") + encode_text[i];
      }
      const auto ids = encode(vocab, text);
      for (size_t i = 0; i < ids.size(); ++i) std::cout << (i ? " " : "") << ids[i];
      std::cout << "\n";
      return 0;
    }

    if (*decode_cmd) {
      const Vocab vocab = load_vocab(decode_vocab);
      std::vector<uint32_t> ids;
      uint64_t id;
      std::istringstream in(detail::read_all_stdin());
      while (in >> id) ids.push_back(static_cast<uint32_t>(id));
      std::cout << decode(vocab, ids);
      return 0;
    }

    if (*pack_cmd) {
      const auto paths = detail::expand_corpus_paths(pack_paths);
      RunManifest manifest = make_manifest(
          args, "format=" + pack_format + " max_len=" + std::to_string(pack_maxlen),
          {pack_seed}, paths);
      write_manifest(manifest, pack_out + ".manifest.json");
      const Vocab vocab = load_vocab(pack_vocab);
      const auto docs = load_corpus(paths);
      const PackingFormat format = parse_format(pack_format);
      const auto tokenized = tokenize_docs(docs, vocab);
      const PackResult packed =
          pack(format, tokenized, vocab, static_cast<uint32_t>(pack_maxlen), pack_seed);
      save_instances(pack_out, static_cast<uint32_t>(pack_maxlen), format, packed.instances);
      manifest.finished_at = mlmp::detail::iso_timestamp();
      write_manifest(manifest, pack_out + ".manifest.json");
      std::cout << "instances " << packed.stats.emitted << " skipped "
                << packed.stats.skipped_segments << " truncated "
                << packed.stats.truncated_sentences << " forced_positive "
                << packed.stats.forced_positive << "\n";
      return 0;
    }

    if (*mask_stats_cmd) {
      const Vocab vocab = load_vocab(ms_vocab);
      const InstanceFile file = load_instances(ms_instances);
      const MaskStats st = collect_mask_stats(file.instances, vocab, ms_seed, ms_samples);
      std::cout.precision(5);
      std::cout << "selected_fraction " << st.selected_fraction() << "\nmask_fraction "
                << st.mask_fraction() << "\nkeep_fraction " << st.keep_fraction()
                << "\nrandom_fraction " << st.random_fraction() << "\nspecial_selected "
                << st.special_selected << "\n";
      return 0;
    }

    if (*pretrain_cmd) {
      const auto paths = detail::expand_corpus_paths(pt_corpus);
      const ConfigFile cfg = ConfigFile::load(pt_config);
      const PretrainRun run = pretrain_run_from_config(cfg, global_seed);
      RunManifest manifest = make_manifest(args, cfg.canonical(), {run.seed}, paths);
      std::filesystem::create_directories(pt_out);
      const std::string manifest_path =
          (std::filesystem::path(pt_out) / "manifest.json").string();
      write_manifest(manifest, manifest_path);
      const Vocab vocab = load_vocab(pt_vocab);
      const auto docs = load_corpus(paths);
      const PretrainResult res = pretrain(run, docs, vocab, pt_out, pt_resume);
      manifest.finished_at = mlmp::detail::iso_timestamp();
      write_manifest(manifest, manifest_path);
      if (!res.reports.empty()) {
        std::cout.precision(6);
        std::cout << "steps " << res.steps_done << " ppl " << res.reports.back().ppl << "\n";
      }
      return 0;
    }

    if (*eval_cmd) {
      const Vocab vocab = load_vocab(ev_vocab);
      const ModelState<float> state = load_checkpoint(ev_ckpt);
      const InstanceFile file = load_instances(ev_heldout);
      const bool use_nsp = format_uses_nsp(file.format);
      const EvalReport rep = evaluate_ppl(state, file.instances, vocab, ev_seed,
                                          state.cfg.max_positions * 16, use_nsp);
      std::cout.precision(6);
      std::cout << "nll " << rep.nll << "\nppl " << rep.ppl << "\n";
      if (rep.has_nsp) std::cout << "nsp_accuracy " << rep.nsp_accuracy << "\n";
      return 0;
    }

    if (*ft_cmd) {
      if (ft_task != "cls" && ft_task != "span" && ft_task != "choice")
        throw usage_error("finetune task must be cls, span or choice");
      const Vocab vocab = load_vocab(ft_vocab);
      const ModelState<float> init =
          load_checkpoint(ft_init_from.empty() ? ft_ckpt : ft_init_from);
      const ConfigFile cfg = ft_cfg.empty() ? ConfigFile{} : ConfigFile::load(ft_cfg);
      const FinetuneConfig fc = finetune_config_from(cfg, ft_task);
      RunManifest manifest =
          make_manifest(args, cfg.canonical(), {fc.seed}, {ft_train, ft_dev});
      if (!ft_out.empty()) {
        std::filesystem::create_directories(ft_out);
        write_manifest(manifest,
                       (std::filesystem::path(ft_out) / "manifest.json").string());
      }
      std::cout.precision(4);
      if (ft_task == "cls") {
        const auto res = finetune_classifier(init, load_classification_tsv(ft_train),
                                             load_classification_tsv(ft_dev), vocab, fc);
        std::cout << "dev_accuracy " << res.best_dev << "\nmedian_dev " << res.median_dev
                  << "\nruns " << res.runs.size() << "\n";
        if (!ft_out.empty()) {
          save_checkpoint(res.encoder,
                          (std::filesystem::path(ft_out) / "encoder.ckpt").string());
          detail::save_head(res.head, (std::filesystem::path(ft_out) / "head.bin").string());
        }
      } else if (ft_task == "span") {
        const auto res = finetune_span(init, load_span_jsonl(ft_train),
                                       load_span_jsonl(ft_dev), vocab, fc, ft_answerable);
        std::cout << "dev_em " << res.dev_em << "\ndev_f1 " << res.dev_f1 << "\ndropped "
                  << res.dropped_examples << "\n";
        if (!ft_out.empty()) {
          save_checkpoint(res.encoder,
                          (std::filesystem::path(ft_out) / "encoder.ckpt").string());
          detail::save_head(res.heads.span,
                            (std::filesystem::path(ft_out) / "span_head.bin").string());
          detail::save_head(res.heads.answer,
                            (std::filesystem::path(ft_out) / "answer_head.bin").string());
        }
      } else {
        const auto res = finetune_choice(init, load_choice_jsonl(ft_train),
                                         load_choice_jsonl(ft_dev), vocab, fc);
        std::cout << "dev_accuracy " << res.dev_accuracy << "\n";
        if (!ft_out.empty()) {
          save_checkpoint(res.encoder,
                          (std::filesystem::path(ft_out) / "encoder.ckpt").string());
          detail::save_head(res.head,
                            (std::filesystem::path(ft_out) / "head.bin").string());
        }
      }
      if (!ft_out.empty()) {
        manifest.finished_at = mlmp::detail::iso_timestamp();
        write_manifest(manifest,
                       (std::filesystem::path(ft_out) / "manifest.json").string());
      }
      return 0;
    }

    if (*eq_cmd) {
      const auto points = equivalent_budgets(eq_bsz, eq_steps, eq_requests);
      for (const auto& pt : points) {
        std::cout << "bsz " << pt.batch_size << ": " << pt.steps << " steps";
        if (!pt.exact) std::cout << " (inexact: " << pt.sequences << " sequences)";
        std::cout << "\n";
      }
      return 0;
    }
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}

}  // namespace mlmp::cli
