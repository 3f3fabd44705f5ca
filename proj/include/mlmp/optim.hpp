#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mlmp/common.hpp"
#include "mlmp/model.hpp"

namespace mlmp {

struct OptConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double peak_lr = 1e-4;
  uint64_t warmup_steps = 10000;
  uint64_t total_steps = 1000000;
  double grad_clip = 0.0;      // 0 disables clipping
  bool coupled_decay = false;  // literal L2 reading: decay folded into the gradient

  void validate() const {
    if (!(warmup_steps > 0 && warmup_steps < total_steps))
      throw std::invalid_argument("optim config: need 0 < warmup_steps < total_steps");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
      throw std::invalid_argument("optim config: betas must lie in (0,1)");
  }
};

// Linear warmup to peak_lr at warmup_steps, then linear decay to zero at
// total_steps.
inline double lr_at(const OptConfig& cfg, uint64_t step) {
  if (step > cfg.total_steps) throw std::invalid_argument("lr_at: step beyond total_steps");
  if (step <= cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

// Adam moments stored flat, aligned with a fixed parameter view order.
template <class S>
struct OptState {
  uint64_t step = 0;
  std::vector<std::vector<S>> m, v;

  template <class Views>
  static OptState init(const Views& views) {
    OptState st;
    st.m.reserve(views.size());
    st.v.reserve(views.size());
    for (const auto& view : views) {
      st.m.emplace_back(view.size, S(0));
      st.v.emplace_back(view.size, S(0));
    }
    return st;
  }
};

// Bias-corrected Adam with decoupled weight decay:
//   update = lr * (m_hat / (sqrt(v_hat) + eps) + lambda * param)
// Decay never touches LayerNorm tensors or bias vectors (decay flag).
// With coupled_decay the lambda*param term is added to the gradient before
// the moment updates instead.
template <class S>
void adam_step(std::span<const FlatParam<S>> params, OptState<S>& opt,
               std::span<const FlatParam<S>> grads, const OptConfig& cfg) {
  cfg.validate();
  if (params.size() != grads.size() || params.size() != opt.m.size())
    throw std::logic_error("adam_step: parameter/gradient registry mismatch");

  double clip_scale = 1.0;
  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& gv : grads)
      for (size_t i = 0; i < gv.size; ++i) sq += static_cast<double>(gv.data[i]) * gv.data[i];
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
  }

  opt.step += 1;
  const double lr = lr_at(cfg, std::min(opt.step, cfg.total_steps));
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));

  for (size_t t = 0; t < params.size(); ++t) {
    const auto& pv = params[t];
    const auto& gv = grads[t];
    if (pv.size != gv.size) throw std::logic_error("adam_step: shape mismatch at " + pv.name);
    S* p = pv.data;
    S* m = opt.m[t].data();
    S* v = opt.v[t].data();
    const bool decay = pv.decay && cfg.weight_decay > 0.0;
    for (size_t i = 0; i < pv.size; ++i) {
      double gi = static_cast<double>(gv.data[i]) * clip_scale;
      if (!std::isfinite(gi))
        throw numeric_error("adam_step: non-finite gradient in " + pv.name);
      if (cfg.coupled_decay && decay) gi += cfg.weight_decay * static_cast<double>(p[i]);
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      if (!cfg.coupled_decay && decay) update += cfg.weight_decay * static_cast<double>(p[i]);
      p[i] = static_cast<S>(p[i] - lr * update);
    }
  }
}

template <class S>
void adam_step(ModelState<S>& state, OptState<S>& opt, ModelState<S>& grads,
               const OptConfig& cfg) {
  auto pv = param_views(state);
  auto gv = param_views(grads);
  adam_step<S>(pv, opt, gv, cfg);
}

// Gradient accumulation for large-batch emulation. Each accumulated gradient
// is the mean-per-masked-token gradient of its micro-batch; flush returns the
// gradient of the mean over the union:
//   sum_i(grad_i * tokens_i) / sum_i(tokens_i)
template <class S>
struct AccumState {
  std::vector<std::vector<S>> weighted_sum;
  uint64_t total_masked = 0;
  uint32_t micro_batches = 0;

  template <class Views>
  static AccumState init(const Views& views) {
    AccumState st;
    st.weighted_sum.reserve(views.size());
    for (const auto& view : views) st.weighted_sum.emplace_back(view.size, S(0));
    return st;
  }

  void reset() {
    for (auto& buf : weighted_sum) std::fill(buf.begin(), buf.end(), S(0));
    total_masked = 0;
    micro_batches = 0;
  }
};

template <class S>
void accumulate(AccumState<S>& acc, std::span<const FlatParam<S>> micro_grads,
                uint64_t masked_token_count) {
  if (micro_grads.size() != acc.weighted_sum.size())
    throw std::logic_error("accumulate: gradient registry mismatch");
  const S w = static_cast<S>(masked_token_count);
  for (size_t t = 0; t < micro_grads.size(); ++t) {
    S* sum = acc.weighted_sum[t].data();
    const S* g = micro_grads[t].data;
    for (size_t i = 0; i < micro_grads[t].size; ++i) sum[i] += g[i] * w;
  }
  acc.total_masked += masked_token_count;
  acc.micro_batches += 1;
}

template <class S>
void accumulate(AccumState<S>& acc, ModelState<S>& micro_grads, uint64_t masked_token_count) {
  auto views = param_views(micro_grads);
  accumulate<S>(acc, std::span<const FlatParam<S>>(views.data(), views.size()),
                masked_token_count);
}

// Writes the flushed gradient into `out` (same registry order as accumulate
// inputs) and resets the accumulator.
template <class S>
void flush(AccumState<S>& acc, std::span<const FlatParam<S>> out) {
  if (acc.micro_batches == 0) throw std::logic_error("flush: empty accumulator");
  const S inv = S(1) / static_cast<S>(acc.total_masked);
  for (size_t t = 0; t < out.size(); ++t) {
    S* dst = out[t].data;
    const S* sum = acc.weighted_sum[t].data();
    for (size_t i = 0; i < out[t].size; ++i) dst[i] = sum[i] * inv;
  }
  acc.reset();
}

template <class S>
void flush(AccumState<S>& acc, ModelState<S>& out) {
  auto views = param_views(out);
  flush<S>(acc, std::span<const FlatParam<S>>(views.data(), views.size()));
}

// ---- compute-equivalent budgets --------------------------------------

struct BudgetPoint {
  uint64_t batch_size = 0;
  uint64_t steps = 0;
  bool exact = true;       // false when bsz' does not divide bsz*steps
  uint64_t sequences = 0;  // batch_size * steps
};

// Factorizations of the sequence budget bsz*steps at requested batch sizes;
// non-divisible requests round to the nearest step count and are flagged.
inline std::vector<BudgetPoint> equivalent_budgets(uint64_t bsz, uint64_t steps,
                                                   std::span<const uint64_t> requested) {
  if (bsz == 0 || steps == 0)
    throw std::invalid_argument("equivalent_budgets: inputs must be positive");
  const uint64_t total = bsz * steps;
  std::vector<BudgetPoint> out;
  for (uint64_t rb : requested) {
    if (rb == 0) throw std::invalid_argument("equivalent_budgets: batch size must be positive");
    BudgetPoint pt;
    pt.batch_size = rb;
    pt.exact = (total % rb == 0);
    pt.steps = pt.exact ? total / rb : (total + rb / 2) / rb;
    pt.sequences = pt.batch_size * pt.steps;
    out.push_back(pt);
  }
  return out;
}

}  // namespace mlmp
