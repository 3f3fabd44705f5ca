#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mlmp/common.hpp"
#include "mlmp/tasks.hpp"
#include "mlmp/trainer.hpp"

namespace mlmp {

// Minimal sectioned key=value config. Optimization keys use the customary
// hyperparameter names (warmup_steps, peak_lr, batch_size, max_steps,
// adam_eps, adam_beta2, weight_decay, warmup_ratio).
struct ConfigFile {
  std::map<std::string, std::map<std::string, std::string>> sections;

  static std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }

  static ConfigFile parse(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line, section;
    size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[') {
        if (t.back() != ']')
          throw data_error("config line " + std::to_string(line_no) + ": unterminated section");
        section = trim(t.substr(1, t.size() - 2));
        cfg.sections[section];
        continue;
      }
      const size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw data_error("config line " + std::to_string(line_no) + ": expected key=value");
      const std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      if (key.empty())
        throw data_error("config line " + std::to_string(line_no) + ": empty key");
      cfg.sections[section][key] = value;
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot read config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    return s != sections.end() && s->second.count(key) > 0;
  }

  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& fallback) const {
    auto s = sections.find(section);
    if (s == sections.end()) return fallback;
    auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  }

  uint64_t get_u64(const std::string& section, const std::string& key, uint64_t fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get_str(section, key, "");
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      throw data_error("config: bad integer for " + section + "." + key + ": " + v);
    }
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get_str(section, key, "");
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      throw data_error("config: bad number for " + section + "." + key + ": " + v);
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get_str(section, key, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw data_error("config: bad boolean for " + section + "." + key + ": " + v);
  }

  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      std::vector<double> fallback) const {
    if (!has(section, key)) return fallback;
    std::vector<double> out;
    std::istringstream ss(get_str(section, key, ""));
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        out.push_back(std::stod(trim(item)));
      } catch (const std::exception&) {
        throw data_error("config: bad list entry for " + section + "." + key);
      }
    }
    if (out.empty()) throw data_error("config: empty list for " + section + "." + key);
    return out;
  }

  // Canonical rendering: sorted sections and keys; used for the config hash.
  std::string canonical() const {
    std::ostringstream out;
    for (const auto& [section, keys] : sections) {
      out << '[' << section << "]\n";
      for (const auto& [key, value] : keys) out << key << '=' << value << '\n';
    }
    return out.str();
  }
};

inline PretrainRun pretrain_run_from_config(const ConfigFile& cfg, uint64_t seed_fallback) {
  PretrainRun run;
  run.name = cfg.get_str("run", "name", "run");
  run.model = ModelConfig::make(
      static_cast<uint32_t>(cfg.get_u64("model", "num_layers", 4)),
      static_cast<uint32_t>(cfg.get_u64("model", "hidden_size", 128)),
      static_cast<uint32_t>(cfg.get_u64("model", "attention_heads", 4)),
      static_cast<uint32_t>(cfg.get_u64("model", "max_positions", 128)),
      static_cast<uint32_t>(cfg.get_u64("model", "vocab_size", 4096)),
      static_cast<float>(cfg.get_double("model", "dropout", 0.1)));
  if (cfg.has("model", "ffn_inner_hidden_size"))
    run.model.ffn_inner = static_cast<uint32_t>(cfg.get_u64("model", "ffn_inner_hidden_size", 0));
  const auto attn_drop = static_cast<float>(
      cfg.get_double("model", "attention_dropout", run.model.dropout));
  if (attn_drop != run.model.dropout)
    throw data_error("config: attention_dropout must equal dropout (single rate)");

  run.optim.peak_lr = cfg.get_double("optim", "peak_lr", 1e-4);
  run.optim.total_steps = cfg.get_u64("optim", "max_steps", 1000000);
  if (cfg.has("optim", "warmup_ratio") && !cfg.has("optim", "warmup_steps")) {
    const double ratio = cfg.get_double("optim", "warmup_ratio", 0.01);
    run.optim.warmup_steps = std::max<uint64_t>(
        1, static_cast<uint64_t>(ratio * static_cast<double>(run.optim.total_steps)));
  } else {
    run.optim.warmup_steps = cfg.get_u64("optim", "warmup_steps", 10000);
  }
  run.optim.eps = cfg.get_double("optim", "adam_eps", 1e-6);
  run.optim.beta1 = cfg.get_double("optim", "adam_beta1", 0.9);
  run.optim.beta2 = cfg.get_double("optim", "adam_beta2", 0.999);
  run.optim.weight_decay = cfg.get_double("optim", "weight_decay", 0.01);
  run.optim.grad_clip = cfg.get_double("optim", "gradient_clipping", 0.0);
  run.optim.coupled_decay = cfg.get_bool("optim", "coupled_decay", false);

  run.format = parse_format(cfg.get_str("run", "format", "full-sentences"));
  run.masking = parse_masking(cfg.get_str("run", "masking", "dynamic"));
  run.use_nsp = cfg.get_bool("run", "use_nsp", format_uses_nsp(run.format));
  run.allow_nsp_mismatch = cfg.get_bool("run", "allow_nsp_mismatch", false);
  run.seed = cfg.get_u64("run", "seed", seed_fallback);
  run.heldout_fraction = cfg.get_double("run", "heldout_fraction", 0.05);
  run.micro_batches = static_cast<uint32_t>(cfg.get_u64("run", "micro_batches", 8));
  if (cfg.has("run", "token_budget")) {
    run.token_budget = cfg.get_u64("run", "token_budget", 0);
  } else {
    // batch_size counts sequences, as in the hyperparameter tables.
    const uint64_t batch_sequences = cfg.get_u64("optim", "batch_size", 16);
    run.token_budget = batch_sequences * run.model.max_positions;
  }
  run.eval_every = cfg.get_u64("run", "eval_every", 200);
  run.checkpoint_every = cfg.get_u64("run", "checkpoint_every", 0);
  run.max_sequences = cfg.get_u64("run", "max_sequences", 0);
  run.validate();
  return run;
}

inline FinetuneConfig finetune_config_from(const ConfigFile& cfg, const std::string& task) {
  FinetuneConfig fc;
  if (task == "cls") {
    fc.max_epochs = 10;
    fc.weight_decay = 0.1;
  } else if (task == "span") {
    fc.max_epochs = 2;
    fc.weight_decay = 0.01;
    fc.lrs = {1.5e-5};
  } else {
    fc.max_epochs = 4;
    fc.weight_decay = 0.1;
    fc.lrs = {1e-5};
    fc.batch_sizes = {16};
  }
  fc.lrs = cfg.get_double_list("finetune", "learning_rates", fc.lrs);
  if (cfg.has("finetune", "batch_sizes")) {
    fc.batch_sizes.clear();
    for (double v : cfg.get_double_list("finetune", "batch_sizes", {}))
      fc.batch_sizes.push_back(static_cast<uint32_t>(v));
  }
  fc.max_epochs = static_cast<uint32_t>(cfg.get_u64("finetune", "max_epochs", fc.max_epochs));
  fc.warmup_ratio = cfg.get_double("finetune", "warmup_ratio", 0.06);
  fc.weight_decay = cfg.get_double("finetune", "weight_decay", fc.weight_decay);
  fc.adam_eps = cfg.get_double("finetune", "adam_eps", 1e-6);
  fc.beta1 = cfg.get_double("finetune", "adam_beta1", 0.9);
  fc.beta2 = cfg.get_double("finetune", "adam_beta2", 0.98);
  fc.num_seeds = static_cast<uint32_t>(cfg.get_u64("finetune", "seeds", 1));
  fc.seed = cfg.get_u64("finetune", "seed", 1);
  fc.early_stop_patience =
      static_cast<uint32_t>(cfg.get_u64("finetune", "early_stop_patience", 3));
  fc.max_answer_tokens =
      static_cast<uint32_t>(cfg.get_u64("finetune", "max_answer_tokens", 30));
  fc.dropout = static_cast<float>(cfg.get_double("finetune", "dropout", 0.1));
  return fc;
}

}  // namespace mlmp
