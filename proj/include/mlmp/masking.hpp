#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "mlmp/bpe.hpp"
#include "mlmp/common.hpp"
#include "mlmp/packing.hpp"
#include "mlmp/rng.hpp"

namespace mlmp {

// Serialized sentinel for "no prediction at this position". Outside any valid
// vocab id, so it doubles as the in-memory representation.
inline constexpr uint32_t kNoPred = 0xFFFFFFFFu;

inline constexpr double kMaskFraction = 0.15;

enum class MaskAction : uint8_t { to_mask = 0, keep = 1, random = 2 };

struct MaskedExample {
  uint64_t instance_id = 0;
  std::vector<uint32_t> input_ids;
  std::vector<uint32_t> labels;          // kNoPred except at mask_positions
  std::vector<uint32_t> mask_positions;  // sorted
  std::vector<uint8_t> segment_ids;
  std::optional<bool> nsp_label;

  uint32_t length() const { return static_cast<uint32_t>(input_ids.size()); }
};

// MLM corruption: k = round(0.15 * maskable), k >= 1, positions drawn without
// replacement; each selected position becomes [MASK] with p=0.8, stays
// unchanged with p=0.1, or is replaced by a uniform non-special text token
// with p=0.1. Special tokens are never selected. Unchanged selections still
// carry a prediction label.
inline MaskedExample apply_mask(const TrainingInstance& inst, const Vocab& vocab, Rng& rng,
                                std::vector<MaskAction>* actions_out = nullptr) {
  std::vector<uint32_t> maskable;
  maskable.reserve(inst.tokens.size());
  for (uint32_t i = 0; i < inst.tokens.size(); ++i)
    if (!vocab.is_special(inst.tokens[i])) maskable.push_back(i);
  if (maskable.empty()) throw data_error("apply_mask: instance has no maskable tokens");

  const auto k = std::max<size_t>(
      1, static_cast<size_t>(std::llround(kMaskFraction * static_cast<double>(maskable.size()))));

  // Partial Fisher-Yates for the first k entries.
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + rng.index(maskable.size() - i);
    std::swap(maskable[i], maskable[j]);
  }
  std::vector<uint32_t> selected(maskable.begin(), maskable.begin() + k);
  std::sort(selected.begin(), selected.end());

  MaskedExample out;
  out.instance_id = inst.id;
  out.input_ids = inst.tokens;
  out.segment_ids = inst.segment_ids;
  out.nsp_label = inst.nsp_label;
  out.labels.assign(inst.tokens.size(), kNoPred);
  out.mask_positions = selected;
  if (actions_out) actions_out->clear();

  for (uint32_t pos : selected) {
    out.labels[pos] = inst.tokens[pos];
    const double u = rng.next_double();
    MaskAction act;
    if (u < 0.8) {
      act = MaskAction::to_mask;
      out.input_ids[pos] = vocab.mask_id();
    } else if (u < 0.9) {
      act = MaskAction::keep;
    } else {
      act = MaskAction::random;
      out.input_ids[pos] = static_cast<uint32_t>(rng.below(vocab.text_count()));
    }
    if (actions_out) actions_out->push_back(act);
  }
  return out;
}

// Ten precomputed corruption patterns per instance, derived only from
// (global seed, instance id, replica index). Over 40 epochs the schedule
// epoch % 10 uses each replica exactly four times.
struct StaticMaskSet {
  static constexpr uint32_t kReplicas = 10;
  uint64_t instance_id = 0;
  std::vector<MaskedExample> replicas;

  static uint32_t replica_for_epoch(uint64_t epoch) {
    return static_cast<uint32_t>(epoch % kReplicas);
  }
  const MaskedExample& for_epoch(uint64_t epoch) const {
    return replicas[replica_for_epoch(epoch)];
  }
};

inline StaticMaskSet build_static_masks(const TrainingInstance& inst, const Vocab& vocab,
                                        uint64_t global_seed) {
  StaticMaskSet set;
  set.instance_id = inst.id;
  set.replicas.reserve(StaticMaskSet::kReplicas);
  for (uint32_t r = 0; r < StaticMaskSet::kReplicas; ++r) {
    Rng rng = keyed_rng(global_seed, RngStream::mask_static, inst.id, r);
    set.replicas.push_back(apply_mask(inst, vocab, rng));
  }
  return set;
}

// Dynamic masking: a fresh pattern each time an instance is presented. The
// generator is keyed by (seed, epoch, instance id) so masking is independent
// of iteration order and shardable.
inline MaskedExample dynamic_mask(const TrainingInstance& inst, const Vocab& vocab,
                                  uint64_t seed, uint64_t epoch) {
  Rng rng = keyed_rng(seed, RngStream::mask_dynamic, epoch, inst.id);
  return apply_mask(inst, vocab, rng);
}

inline std::vector<MaskedExample> dynamic_stream(const std::vector<TrainingInstance>& instances,
                                                 const Vocab& vocab, uint64_t seed,
                                                 uint64_t epoch = 0) {
  std::vector<MaskedExample> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(dynamic_mask(inst, vocab, seed, epoch));
  return out;
}

struct MaskStats {
  uint64_t maskable_positions = 0;
  uint64_t selected = 0;
  uint64_t masked = 0;
  uint64_t kept = 0;
  uint64_t randomized = 0;
  uint64_t special_selected = 0;

  double selected_fraction() const {
    return maskable_positions ? static_cast<double>(selected) / maskable_positions : 0.0;
  }
  double mask_fraction() const { return selected ? static_cast<double>(masked) / selected : 0.0; }
  double keep_fraction() const { return selected ? static_cast<double>(kept) / selected : 0.0; }
  double random_fraction() const {
    return selected ? static_cast<double>(randomized) / selected : 0.0;
  }
};

// Empirical selection / 80-10-10 statistics over repeated dynamic maskings.
inline MaskStats collect_mask_stats(const std::vector<TrainingInstance>& instances,
                                    const Vocab& vocab, uint64_t seed, uint64_t samples) {
  MaskStats st;
  std::vector<MaskAction> actions;
  uint64_t produced = 0;
  for (uint64_t epoch = 0; produced < samples; ++epoch) {
    for (const auto& inst : instances) {
      if (produced++ >= samples) break;
      Rng rng = keyed_rng(seed, RngStream::mask_dynamic, epoch, inst.id);
      MaskedExample ex = apply_mask(inst, vocab, rng, &actions);
      for (uint32_t i = 0; i < inst.tokens.size(); ++i)
        if (!vocab.is_special(inst.tokens[i])) ++st.maskable_positions;
      st.selected += ex.mask_positions.size();
      for (uint32_t pos : ex.mask_positions)
        if (vocab.is_special(inst.tokens[pos])) ++st.special_selected;
      for (MaskAction a : actions) {
        if (a == MaskAction::to_mask) ++st.masked;
        if (a == MaskAction::keep) ++st.kept;
        if (a == MaskAction::random) ++st.randomized;
      }
    }
    if (instances.empty()) break;
  }
  return st;
}

}  // namespace mlmp
