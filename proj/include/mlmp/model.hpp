#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mlmp/common.hpp"
#include "mlmp/masking.hpp"
#include "mlmp/rng.hpp"

namespace mlmp {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  uint32_t layers = 2;
  uint32_t hidden = 64;
  uint32_t heads = 2;
  uint32_t ffn_inner = 256;
  uint32_t max_positions = 128;
  uint32_t vocab = 512;
  float dropout = 0.1f;

  uint32_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (heads == 0 || hidden == 0 || layers == 0 || vocab == 0 || max_positions == 0)
      throw std::invalid_argument("model config: zero dimension");
    if (hidden % heads != 0)
      throw std::invalid_argument("model config: hidden size not divisible by head count");
  }

  static ModelConfig make(uint32_t L, uint32_t H, uint32_t A, uint32_t T, uint32_t V,
                          float dropout_p = 0.1f) {
    ModelConfig cfg;
    cfg.layers = L;
    cfg.hidden = H;
    cfg.heads = A;
    cfg.ffn_inner = 4 * H;
    cfg.max_positions = T;
    cfg.vocab = V;
    cfg.dropout = dropout_p;
    cfg.validate();
    return cfg;
  }
};

template <class S>
struct LayerParams {
  Mat<S> wq, wk, wv, wo;      // hidden x hidden, applied as x * W
  Vec<S> bq, bk, bv, bo;
  Vec<S> ln1_g, ln1_b;
  Mat<S> w1, w2;              // hidden x ffn, ffn x hidden
  Vec<S> b1, b2;
  Vec<S> ln2_g, ln2_b;
};

// All parameters of the encoder plus the MLM and NSP heads. The MLM output
// projection is the transpose of the token embedding (tied); only the output
// bias is a separate tensor.
template <class S>
struct ModelState {
  ModelConfig cfg;
  Mat<S> tok_emb;   // vocab x hidden
  Mat<S> pos_emb;   // max_positions x hidden
  Mat<S> seg_emb;   // 2 x hidden
  std::vector<LayerParams<S>> layers;
  Mat<S> mlm_dense;  // hidden x hidden
  Vec<S> mlm_dense_b, mlm_ln_g, mlm_ln_b;
  Vec<S> mlm_out_b;  // vocab
  Mat<S> nsp_pooler;  // hidden x hidden
  Vec<S> nsp_pooler_b;
  Mat<S> nsp_cls;  // hidden x 2
  Vec<S> nsp_cls_b;
};

template <class S>
struct FlatParam {
  std::string name;
  S* data;
  size_t size;
  bool decay;  // weight decay applies; false for LayerNorm tensors and biases
};

template <class S>
std::vector<FlatParam<S>> param_views(ModelState<S>& st) {
  std::vector<FlatParam<S>> out;
  auto mat = [&](const char* name, Mat<S>& m, bool decay) {
    out.push_back({name, m.data(), static_cast<size_t>(m.size()), decay});
  };
  auto vec = [&](const std::string& name, Vec<S>& v) {
    out.push_back({name, v.data(), static_cast<size_t>(v.size()), false});
  };
  mat("tok_emb", st.tok_emb, true);
  mat("pos_emb", st.pos_emb, true);
  mat("seg_emb", st.seg_emb, true);
  for (size_t l = 0; l < st.layers.size(); ++l) {
    auto& lp = st.layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    auto lmat = [&](const char* n, Mat<S>& m) {
      out.push_back({p + n, m.data(), static_cast<size_t>(m.size()), true});
    };
    lmat("attn.wq", lp.wq);
    lmat("attn.wk", lp.wk);
    lmat("attn.wv", lp.wv);
    lmat("attn.wo", lp.wo);
    vec(p + "attn.bq", lp.bq);
    vec(p + "attn.bk", lp.bk);
    vec(p + "attn.bv", lp.bv);
    vec(p + "attn.bo", lp.bo);
    vec(p + "ln1.gain", lp.ln1_g);
    vec(p + "ln1.bias", lp.ln1_b);
    lmat("ffn.w1", lp.w1);
    lmat("ffn.w2", lp.w2);
    vec(p + "ffn.b1", lp.b1);
    vec(p + "ffn.b2", lp.b2);
    vec(p + "ln2.gain", lp.ln2_g);
    vec(p + "ln2.bias", lp.ln2_b);
  }
  mat("mlm.dense", st.mlm_dense, true);
  vec("mlm.dense_b", st.mlm_dense_b);
  vec("mlm.ln_gain", st.mlm_ln_g);
  vec("mlm.ln_bias", st.mlm_ln_b);
  vec("mlm.out_b", st.mlm_out_b);
  mat("nsp.pooler", st.nsp_pooler, true);
  vec("nsp.pooler_b", st.nsp_pooler_b);
  mat("nsp.cls", st.nsp_cls, true);
  vec("nsp.cls_b", st.nsp_cls_b);
  return out;
}

template <class S>
ModelState<S> zeros_like(const ModelState<S>& src) {
  ModelState<S> out;
  out.cfg = src.cfg;
  out.tok_emb = Mat<S>::Zero(src.tok_emb.rows(), src.tok_emb.cols());
  out.pos_emb = Mat<S>::Zero(src.pos_emb.rows(), src.pos_emb.cols());
  out.seg_emb = Mat<S>::Zero(src.seg_emb.rows(), src.seg_emb.cols());
  out.layers.resize(src.layers.size());
  for (size_t l = 0; l < src.layers.size(); ++l) {
    const auto& a = src.layers[l];
    auto& b = out.layers[l];
    b.wq = Mat<S>::Zero(a.wq.rows(), a.wq.cols());
    b.wk = Mat<S>::Zero(a.wk.rows(), a.wk.cols());
    b.wv = Mat<S>::Zero(a.wv.rows(), a.wv.cols());
    b.wo = Mat<S>::Zero(a.wo.rows(), a.wo.cols());
    b.bq = Vec<S>::Zero(a.bq.size());
    b.bk = Vec<S>::Zero(a.bk.size());
    b.bv = Vec<S>::Zero(a.bv.size());
    b.bo = Vec<S>::Zero(a.bo.size());
    b.ln1_g = Vec<S>::Zero(a.ln1_g.size());
    b.ln1_b = Vec<S>::Zero(a.ln1_b.size());
    b.w1 = Mat<S>::Zero(a.w1.rows(), a.w1.cols());
    b.w2 = Mat<S>::Zero(a.w2.rows(), a.w2.cols());
    b.b1 = Vec<S>::Zero(a.b1.size());
    b.b2 = Vec<S>::Zero(a.b2.size());
    b.ln2_g = Vec<S>::Zero(a.ln2_g.size());
    b.ln2_b = Vec<S>::Zero(a.ln2_b.size());
  }
  out.mlm_dense = Mat<S>::Zero(src.mlm_dense.rows(), src.mlm_dense.cols());
  out.mlm_dense_b = Vec<S>::Zero(src.mlm_dense_b.size());
  out.mlm_ln_g = Vec<S>::Zero(src.mlm_ln_g.size());
  out.mlm_ln_b = Vec<S>::Zero(src.mlm_ln_b.size());
  out.mlm_out_b = Vec<S>::Zero(src.mlm_out_b.size());
  out.nsp_pooler = Mat<S>::Zero(src.nsp_pooler.rows(), src.nsp_pooler.cols());
  out.nsp_pooler_b = Vec<S>::Zero(src.nsp_pooler_b.size());
  out.nsp_cls = Mat<S>::Zero(src.nsp_cls.rows(), src.nsp_cls.cols());
  out.nsp_cls_b = Vec<S>::Zero(src.nsp_cls_b.size());
  return out;
}

// Weights ~ Normal(0, 0.02) truncated (clipped) at two standard deviations;
// LayerNorm gains 1, every bias 0. Deterministic per seed.
template <class S>
ModelState<S> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelState<S> st;
  st.cfg = cfg;
  const auto H = cfg.hidden;
  st.tok_emb.resize(cfg.vocab, H);
  st.pos_emb.resize(cfg.max_positions, H);
  st.seg_emb.resize(2, H);
  st.layers.resize(cfg.layers);
  for (auto& lp : st.layers) {
    lp.wq.resize(H, H);
    lp.wk.resize(H, H);
    lp.wv.resize(H, H);
    lp.wo.resize(H, H);
    lp.bq = Vec<S>::Zero(H);
    lp.bk = Vec<S>::Zero(H);
    lp.bv = Vec<S>::Zero(H);
    lp.bo = Vec<S>::Zero(H);
    lp.ln1_g = Vec<S>::Ones(H);
    lp.ln1_b = Vec<S>::Zero(H);
    lp.w1.resize(H, cfg.ffn_inner);
    lp.w2.resize(cfg.ffn_inner, H);
    lp.b1 = Vec<S>::Zero(cfg.ffn_inner);
    lp.b2 = Vec<S>::Zero(H);
    lp.ln2_g = Vec<S>::Ones(H);
    lp.ln2_b = Vec<S>::Zero(H);
  }
  st.mlm_dense.resize(H, H);
  st.mlm_dense_b = Vec<S>::Zero(H);
  st.mlm_ln_g = Vec<S>::Ones(H);
  st.mlm_ln_b = Vec<S>::Zero(H);
  st.mlm_out_b = Vec<S>::Zero(cfg.vocab);
  st.nsp_pooler.resize(H, H);
  st.nsp_pooler_b = Vec<S>::Zero(H);
  st.nsp_cls.resize(H, 2);
  st.nsp_cls_b = Vec<S>::Zero(2);

  Rng rng = keyed_rng(seed, RngStream::param_init);
  auto fill = [&](Mat<S>& m) {
    S* p = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double z = 0.02 * rng.normal();
      z = std::clamp(z, -0.04, 0.04);
      p[i] = static_cast<S>(z);
    }
  };
  fill(st.tok_emb);
  fill(st.pos_emb);
  fill(st.seg_emb);
  for (auto& lp : st.layers) {
    fill(lp.wq);
    fill(lp.wk);
    fill(lp.wv);
    fill(lp.wo);
    fill(lp.w1);
    fill(lp.w2);
  }
  fill(st.mlm_dense);
  fill(st.nsp_pooler);
  fill(st.nsp_cls);
  return st;
}

// ---- batch assembly ---------------------------------------------------

// Padded model input assembled from masked examples. Padding cells carry
// token id 0; attention masking works off `lengths`, so the fill value never
// matters.
struct ModelInput {
  uint32_t batch = 0;
  uint32_t padded_len = 0;
  std::vector<uint32_t> tokens;    // batch * padded_len
  std::vector<uint8_t> segments;   // batch * padded_len
  std::vector<uint32_t> lengths;   // per example
  std::vector<std::pair<uint32_t, uint32_t>> mask_positions;  // (example, position)
  std::vector<uint32_t> mask_labels;                          // original ids
  std::vector<uint8_t> nsp_labels;  // empty when any example lacks a label
  uint64_t total_tokens = 0;        // sum of unpadded lengths

  bool has_nsp() const { return !nsp_labels.empty(); }
};

inline ModelInput assemble_input(std::span<const MaskedExample> examples) {
  if (examples.empty()) throw std::invalid_argument("assemble_input: empty batch");
  ModelInput in;
  in.batch = static_cast<uint32_t>(examples.size());
  for (const auto& ex : examples) in.padded_len = std::max(in.padded_len, ex.length());
  in.tokens.assign(static_cast<size_t>(in.batch) * in.padded_len, 0);
  in.segments.assign(static_cast<size_t>(in.batch) * in.padded_len, 0);
  in.lengths.resize(in.batch);
  bool all_nsp = true;
  for (uint32_t b = 0; b < in.batch; ++b) {
    const auto& ex = examples[b];
    in.lengths[b] = ex.length();
    in.total_tokens += ex.length();
    for (uint32_t i = 0; i < ex.length(); ++i) {
      in.tokens[static_cast<size_t>(b) * in.padded_len + i] = ex.input_ids[i];
      in.segments[static_cast<size_t>(b) * in.padded_len + i] = ex.segment_ids[i];
    }
    for (uint32_t pos : ex.mask_positions) {
      in.mask_positions.emplace_back(b, pos);
      in.mask_labels.push_back(ex.labels[pos]);
    }
    all_nsp = all_nsp && ex.nsp_label.has_value();
  }
  if (all_nsp)
    for (const auto& ex : examples) in.nsp_labels.push_back(*ex.nsp_label ? 1 : 0);
  return in;
}

// ---- forward ------------------------------------------------------------

namespace detail {

// Inverted dropout with a counter-based mask so the backward pass regenerates
// the identical pattern from (key, element index) without storing it.
template <class S>
void dropout_inplace(Mat<S>& m, uint64_t key, double p) {
  if (p <= 0.0) return;
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  S* data = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i)
    data[i] = hash_uniform(key, static_cast<uint64_t>(i)) < p ? S(0) : data[i] * scale;
}

template <class S>
struct LayerNormCache {
  Mat<S> xhat;     // normalized pre-gain activations
  Vec<S> inv_std;  // per row
};

template <class S>
void layer_norm(const Mat<S>& z, const Vec<S>& gain, const Vec<S>& bias, Mat<S>& out,
                LayerNormCache<S>& cache) {
  const Eigen::Index rows = z.rows(), cols = z.cols();
  cache.xhat.resize(rows, cols);
  cache.inv_std.resize(rows);
  out.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mean = z.row(r).mean();
    const S var = (z.row(r).array() - mean).square().sum() / static_cast<S>(cols);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    cache.inv_std[r] = inv;
    cache.xhat.row(r) = (z.row(r).array() - mean) * inv;
    out.row(r) = (cache.xhat.row(r).array() * gain.transpose().array() +
                  bias.transpose().array())
                     .matrix();
  }
}

// Given dL/dout, accumulate parameter grads and return dL/dz.
template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dout, const LayerNormCache<S>& cache,
                           const Vec<S>& gain, Vec<S>& dgain, Vec<S>& dbias) {
  const Eigen::Index rows = dout.rows(), cols = dout.cols();
  Mat<S> dz(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    dgain += (dout.row(r).array() * cache.xhat.row(r).array()).matrix().transpose();
    dbias += dout.row(r).transpose();
    const auto dxhat = (dout.row(r).array() * gain.transpose().array()).eval();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * cache.xhat.row(r).array()).mean();
    dz.row(r) =
        ((dxhat - m1 - cache.xhat.row(r).array() * m2) * cache.inv_std[r]).matrix();
  }
  return dz;
}

template <class S>
S gelu_scalar(S x) {
  return static_cast<S>(0.5) * x * (S(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
}

template <class S>
S gelu_grad_scalar(S x) {
  const S cdf = static_cast<S>(0.5) * (S(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
  const S pdf = std::exp(static_cast<S>(-0.5) * x * x) *
                static_cast<S>(0.3989422804014326779399461);
  return cdf + x * pdf;
}

template <class S>
struct LayerCache {
  Mat<S> x;        // layer input
  Mat<S> q, k, v;  // projections with bias
  Mat<S> probs;    // (batch*heads*L) x L attention rows, pre-dropout
  Mat<S> ctx;      // heads concatenated, pre output projection
  LayerNormCache<S> ln1;
  Mat<S> h1;       // post first add&norm
  Mat<S> ffn_pre;  // pre-GELU
  Mat<S> ffn_act;  // post-GELU
  LayerNormCache<S> ln2;
};

}  // namespace detail

template <class S>
struct ForwardOutput {
  Mat<S> mlm_logits;  // masked positions x vocab, batch order
  Mat<S> nsp_logits;  // batch x 2
  bool train_mode = false;
  uint64_t dropout_key = 0;

  // caches for backward
  Mat<S> x0;  // embedding output (post-dropout)
  std::vector<detail::LayerCache<S>> layer_caches;
  Mat<S> final_hidden;
  Mat<S> mlm_rows;       // gathered masked hidden rows
  Mat<S> mlm_pre;        // dense output pre-GELU
  Mat<S> mlm_act;        // post-GELU
  detail::LayerNormCache<S> mlm_ln;
  Mat<S> mlm_ln_out;
  Mat<S> cls_rows;       // batch x hidden
  Mat<S> pool_pre;       // pre-tanh
  Mat<S> pool_act;       // post-tanh
};

// Dropout site layout: site 0 is the embedding output, then three sites per
// layer (attention probabilities, attention output, FFN output).
namespace detail {
inline uint64_t dropout_site_key(uint64_t key, uint32_t site) { return hash_mix(key, site); }
}  // namespace detail

template <class S>
ForwardOutput<S> forward(const ModelState<S>& st, const ModelInput& in, bool train_mode,
                         uint64_t dropout_key = 0) {
  const auto& cfg = st.cfg;
  const uint32_t B = in.batch, L = in.padded_len, H = cfg.hidden, A = cfg.heads;
  const uint32_t dh = cfg.head_dim();
  if (L > cfg.max_positions) throw data_error("forward: sequence longer than max positions");
  for (uint32_t t : in.tokens)
    if (t >= cfg.vocab) throw data_error("forward: token id out of range");
  const double p = train_mode ? cfg.dropout : 0.0;
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const size_t rows = static_cast<size_t>(B) * L;

  ForwardOutput<S> out;
  out.train_mode = train_mode;
  out.dropout_key = dropout_key;

  // Embedding sum: token + position + segment.
  Mat<S> x(rows, H);
  for (uint32_t b = 0; b < B; ++b) {
    for (uint32_t i = 0; i < L; ++i) {
      const size_t r = static_cast<size_t>(b) * L + i;
      x.row(r) = st.tok_emb.row(in.tokens[r]) + st.pos_emb.row(i) +
                 st.seg_emb.row(in.segments[r]);
    }
  }
  detail::dropout_inplace(x, detail::dropout_site_key(dropout_key, 0), p);
  out.x0 = x;

  out.layer_caches.resize(cfg.layers);
  for (uint32_t l = 0; l < cfg.layers; ++l) {
    auto& lc = out.layer_caches[l];
    const auto& lp = st.layers[l];
    lc.x = x;

    lc.q.noalias() = x * lp.wq;
    lc.q.rowwise() += lp.bq.transpose();
    lc.k.noalias() = x * lp.wk;
    lc.k.rowwise() += lp.bk.transpose();
    lc.v.noalias() = x * lp.wv;
    lc.v.rowwise() += lp.bv.transpose();

    lc.probs.resize(static_cast<size_t>(B) * A * L, L);
    lc.ctx.resize(rows, H);
    Mat<S> scores(L, L);
    for (uint32_t b = 0; b < B; ++b) {
      const uint32_t len = in.lengths[b];
      for (uint32_t h = 0; h < A; ++h) {
        auto qb = lc.q.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh);
        auto kb = lc.k.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh);
        scores.noalias() = qb * kb.transpose();
        scores *= inv_sqrt_dh;
        if (len < L)
          scores.rightCols(L - len).setConstant(-std::numeric_limits<S>::infinity());
        auto pb = lc.probs.block(static_cast<size_t>((b * A + h)) * L, 0, L, L);
        for (uint32_t i = 0; i < L; ++i) {
          const S mx = scores.row(i).head(len).maxCoeff();
          auto e = (scores.row(i).head(len).array() - mx).exp().eval();
          const S sum = e.sum();
          pb.row(i).head(len) = (e / sum).matrix();
          if (len < L) pb.row(i).tail(L - len).setZero();
        }
      }
    }
    Mat<S> probs_dropped = lc.probs;
    detail::dropout_inplace(probs_dropped, detail::dropout_site_key(dropout_key, 1 + 3 * l), p);
    for (uint32_t b = 0; b < B; ++b) {
      for (uint32_t h = 0; h < A; ++h) {
        auto pb = probs_dropped.block(static_cast<size_t>((b * A + h)) * L, 0, L, L);
        auto vb = lc.v.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh);
        lc.ctx.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh).noalias() =
            pb * vb;
      }
    }

    Mat<S> attn_out;
    attn_out.noalias() = lc.ctx * lp.wo;
    attn_out.rowwise() += lp.bo.transpose();
    detail::dropout_inplace(attn_out, detail::dropout_site_key(dropout_key, 2 + 3 * l), p);
    Mat<S> z1 = lc.x + attn_out;
    detail::layer_norm(z1, lp.ln1_g, lp.ln1_b, lc.h1, lc.ln1);

    lc.ffn_pre.noalias() = lc.h1 * lp.w1;
    lc.ffn_pre.rowwise() += lp.b1.transpose();
    lc.ffn_act = lc.ffn_pre.unaryExpr([](S v) { return detail::gelu_scalar(v); });
    Mat<S> ffn_out;
    ffn_out.noalias() = lc.ffn_act * lp.w2;
    ffn_out.rowwise() += lp.b2.transpose();
    detail::dropout_inplace(ffn_out, detail::dropout_site_key(dropout_key, 3 + 3 * l), p);
    Mat<S> z2 = lc.h1 + ffn_out;
    Mat<S> h2;
    detail::layer_norm(z2, lp.ln2_g, lp.ln2_b, h2, lc.ln2);
    x = std::move(h2);
  }
  out.final_hidden = x;

  // MLM head over masked rows only: dense -> GELU -> LayerNorm -> tied logits.
  const size_t M = in.mask_positions.size();
  out.mlm_rows.resize(M, H);
  for (size_t m = 0; m < M; ++m) {
    const auto [b, pos] = in.mask_positions[m];
    out.mlm_rows.row(m) = out.final_hidden.row(static_cast<size_t>(b) * L + pos);
  }
  out.mlm_pre.noalias() = out.mlm_rows * st.mlm_dense;
  out.mlm_pre.rowwise() += st.mlm_dense_b.transpose();
  out.mlm_act = out.mlm_pre.unaryExpr([](S v) { return detail::gelu_scalar(v); });
  detail::layer_norm(out.mlm_act, st.mlm_ln_g, st.mlm_ln_b, out.mlm_ln_out, out.mlm_ln);
  out.mlm_logits.noalias() = out.mlm_ln_out * st.tok_emb.transpose();
  out.mlm_logits.rowwise() += st.mlm_out_b.transpose();

  // NSP head from the CLS position.
  out.cls_rows.resize(B, H);
  for (uint32_t b = 0; b < B; ++b)
    out.cls_rows.row(b) = out.final_hidden.row(static_cast<size_t>(b) * L);
  out.pool_pre.noalias() = out.cls_rows * st.nsp_pooler;
  out.pool_pre.rowwise() += st.nsp_pooler_b.transpose();
  out.pool_act = out.pool_pre.unaryExpr([](S v) { return std::tanh(v); });
  out.nsp_logits.noalias() = out.pool_act * st.nsp_cls;
  out.nsp_logits.rowwise() += st.nsp_cls_b.transpose();

  return out;
}

// ---- loss -----------------------------------------------------------------

template <class S>
struct LossInfo {
  S total = 0;
  S mlm = 0;
  S nsp = 0;
  uint64_t masked_count = 0;
};

namespace detail {

template <class S>
Mat<S> softmax_rows(const Mat<S>& logits) {
  Mat<S> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const S mx = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - mx).exp().eval();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

}  // namespace detail

// MLM loss is the mean negative log-softmax over every masked position in the
// batch; NSP is the mean over instances. total = MLM + NSP when use_nsp.
template <class S>
LossInfo<S> loss(const ForwardOutput<S>& out, const ModelInput& in, bool use_nsp) {
  if (in.mask_positions.empty()) throw std::logic_error("loss: batch has no masked positions");
  if (use_nsp && !in.has_nsp())
    throw std::logic_error("loss: use_nsp requested but batch lacks NSP labels");
  LossInfo<S> li;
  li.masked_count = in.mask_positions.size();
  double mlm_sum = 0.0;
  for (Eigen::Index r = 0; r < out.mlm_logits.rows(); ++r) {
    const S mx = out.mlm_logits.row(r).maxCoeff();
    const double lse =
        std::log((out.mlm_logits.row(r).array() - mx).exp().sum()) + static_cast<double>(mx);
    mlm_sum += lse - static_cast<double>(out.mlm_logits(r, in.mask_labels[r]));
  }
  li.mlm = static_cast<S>(mlm_sum / static_cast<double>(li.masked_count));
  if (use_nsp) {
    double nsp_sum = 0.0;
    for (Eigen::Index b = 0; b < out.nsp_logits.rows(); ++b) {
      const S mx = out.nsp_logits.row(b).maxCoeff();
      const double lse =
          std::log((out.nsp_logits.row(b).array() - mx).exp().sum()) + static_cast<double>(mx);
      nsp_sum += lse - static_cast<double>(out.nsp_logits(b, in.nsp_labels[b]));
    }
    li.nsp = static_cast<S>(nsp_sum / static_cast<double>(out.nsp_logits.rows()));
  }
  li.total = li.mlm + (use_nsp ? li.nsp : S(0));
  return li;
}

// ---- backward ---------------------------------------------------------

// Backpropagate d_final (gradient w.r.t. final_hidden) through the encoder
// stack and embeddings, accumulating into g. Fine-tuning heads reuse this
// with their own upstream gradients.
template <class S>
void encoder_backward(const ModelState<S>& st, const ForwardOutput<S>& out,
                      const ModelInput& in, Mat<S> d_final, ModelState<S>& g);

// Exact gradients of loss() w.r.t. every parameter. The tied token embedding
// accumulates both its lookup role and its MLM output projection role.
template <class S>
ModelState<S> backward(const ModelState<S>& st, const ForwardOutput<S>& out,
                       const ModelInput& in, bool use_nsp) {
  const auto& cfg = st.cfg;
  const uint32_t B = in.batch, L = in.padded_len, H = cfg.hidden;
  const size_t rows = static_cast<size_t>(B) * L;
  const size_t M = in.mask_positions.size();

  ModelState<S> g = zeros_like(st);
  Mat<S> d_final = Mat<S>::Zero(rows, H);

  // MLM head backward.
  {
    Mat<S> dlogits = detail::softmax_rows(out.mlm_logits);
    const S inv_m = S(1) / static_cast<S>(M);
    for (size_t m = 0; m < M; ++m) dlogits(m, in.mask_labels[m]) -= S(1);
    dlogits *= inv_m;

    g.mlm_out_b += dlogits.colwise().sum().transpose();
    g.tok_emb.noalias() += dlogits.transpose() * out.mlm_ln_out;
    Mat<S> d_lnout;
    d_lnout.noalias() = dlogits * st.tok_emb;
    Mat<S> d_act = detail::layer_norm_backward(d_lnout, out.mlm_ln, st.mlm_ln_g, g.mlm_ln_g,
                                               g.mlm_ln_b);
    Mat<S> d_pre =
        (d_act.array() *
         out.mlm_pre.unaryExpr([](S v) { return detail::gelu_grad_scalar(v); }).array())
            .matrix();
    g.mlm_dense.noalias() += out.mlm_rows.transpose() * d_pre;
    g.mlm_dense_b += d_pre.colwise().sum().transpose();
    Mat<S> d_rows;
    d_rows.noalias() = d_pre * st.mlm_dense.transpose();
    for (size_t m = 0; m < M; ++m) {
      const auto [b, pos] = in.mask_positions[m];
      d_final.row(static_cast<size_t>(b) * L + pos) += d_rows.row(m);
    }
  }

  // NSP head backward.
  if (use_nsp) {
    Mat<S> dn = detail::softmax_rows(out.nsp_logits);
    for (uint32_t b = 0; b < B; ++b) dn(b, in.nsp_labels[b]) -= S(1);
    dn *= S(1) / static_cast<S>(B);
    g.nsp_cls_b += dn.colwise().sum().transpose();
    g.nsp_cls.noalias() += out.pool_act.transpose() * dn;
    Mat<S> d_tanh;
    d_tanh.noalias() = dn * st.nsp_cls.transpose();
    Mat<S> d_pool_pre =
        (d_tanh.array() * (S(1) - out.pool_act.array().square())).matrix();
    g.nsp_pooler.noalias() += out.cls_rows.transpose() * d_pool_pre;
    g.nsp_pooler_b += d_pool_pre.colwise().sum().transpose();
    Mat<S> d_cls;
    d_cls.noalias() = d_pool_pre * st.nsp_pooler.transpose();
    for (uint32_t b = 0; b < B; ++b) d_final.row(static_cast<size_t>(b) * L) += d_cls.row(b);
  }

  encoder_backward(st, out, in, std::move(d_final), g);
  return g;
}

template <class S>
void encoder_backward(const ModelState<S>& st, const ForwardOutput<S>& out,
                      const ModelInput& in, Mat<S> d_final, ModelState<S>& g) {
  const auto& cfg = st.cfg;
  const uint32_t B = in.batch, L = in.padded_len, H = cfg.hidden, A = cfg.heads;
  const uint32_t dh = cfg.head_dim();
  const size_t rows = static_cast<size_t>(B) * L;
  const double p = out.train_mode ? cfg.dropout : 0.0;
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Encoder layers, reversed.
  Mat<S> dh_out = std::move(d_final);
  for (int l = static_cast<int>(cfg.layers) - 1; l >= 0; --l) {
    const auto& lc = out.layer_caches[l];
    const auto& lp = st.layers[l];
    auto& gl = g.layers[l];

    // Second sublayer: h2 = LN2(h1 + dropout(ffn(h1)))
    Mat<S> dz2 = detail::layer_norm_backward(dh_out, lc.ln2, lp.ln2_g, gl.ln2_g, gl.ln2_b);
    Mat<S> d_ffn_out = dz2;
    detail::dropout_inplace(d_ffn_out, detail::dropout_site_key(out.dropout_key, 3 + 3 * l), p);
    Mat<S> d_h1 = dz2;  // residual branch
    gl.w2.noalias() += lc.ffn_act.transpose() * d_ffn_out;
    gl.b2 += d_ffn_out.colwise().sum().transpose();
    Mat<S> d_act;
    d_act.noalias() = d_ffn_out * lp.w2.transpose();
    Mat<S> d_pre =
        (d_act.array() *
         lc.ffn_pre.unaryExpr([](S v) { return detail::gelu_grad_scalar(v); }).array())
            .matrix();
    gl.w1.noalias() += lc.h1.transpose() * d_pre;
    gl.b1 += d_pre.colwise().sum().transpose();
    d_h1.noalias() += d_pre * lp.w1.transpose();

    // First sublayer: h1 = LN1(x + dropout(attn(x)))
    Mat<S> dz1 = detail::layer_norm_backward(d_h1, lc.ln1, lp.ln1_g, gl.ln1_g, gl.ln1_b);
    Mat<S> d_attn_out = dz1;
    detail::dropout_inplace(d_attn_out, detail::dropout_site_key(out.dropout_key, 2 + 3 * l), p);
    Mat<S> dx = dz1;  // residual branch
    gl.wo.noalias() += lc.ctx.transpose() * d_attn_out;
    gl.bo += d_attn_out.colwise().sum().transpose();
    Mat<S> d_ctx;
    d_ctx.noalias() = d_attn_out * lp.wo.transpose();

    Mat<S> d_q = Mat<S>::Zero(rows, H), d_k = Mat<S>::Zero(rows, H),
           d_v = Mat<S>::Zero(rows, H);
    Mat<S> probs_dropped = lc.probs;
    detail::dropout_inplace(probs_dropped,
                            detail::dropout_site_key(out.dropout_key, 1 + 3 * l), p);
    Mat<S> d_probs(L, L), ds(L, L);
    for (uint32_t b = 0; b < B; ++b) {
      for (uint32_t h = 0; h < A; ++h) {
        const size_t prow = static_cast<size_t>((b * A + h)) * L;
        auto pb = lc.probs.block(prow, 0, L, L);
        auto pbd = probs_dropped.block(prow, 0, L, L);
        auto dctxb =
            d_ctx.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh);
        auto vb = lc.v.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh);
        d_probs.noalias() = dctxb * vb.transpose();
        d_v.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh).noalias() +=
            pbd.transpose() * dctxb;
        // gradient through the attention-prob dropout: same mask, same scale
        {
          const uint64_t key = detail::dropout_site_key(out.dropout_key, 1 + 3 * l);
          if (p > 0.0) {
            const S scale = static_cast<S>(1.0 / (1.0 - p));
            for (uint32_t i = 0; i < L; ++i)
              for (uint32_t j = 0; j < L; ++j) {
                const uint64_t idx = (prow + i) * L + j;
                d_probs(i, j) =
                    hash_uniform(key, idx) < p ? S(0) : d_probs(i, j) * scale;
              }
          }
        }
        // softmax backward: rows of probs are distributions over valid keys
        for (uint32_t i = 0; i < L; ++i) {
          const S dot = (d_probs.row(i).array() * pb.row(i).array()).sum();
          ds.row(i) = (pb.row(i).array() * (d_probs.row(i).array() - dot)).matrix();
        }
        auto qb = lc.q.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh);
        auto kb = lc.k.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh);
        d_q.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh).noalias() +=
            ds * kb * inv_sqrt_dh;
        d_k.block(static_cast<size_t>(b) * L, static_cast<size_t>(h) * dh, L, dh).noalias() +=
            ds.transpose() * qb * inv_sqrt_dh;
      }
    }
    gl.wq.noalias() += lc.x.transpose() * d_q;
    gl.bq += d_q.colwise().sum().transpose();
    gl.wk.noalias() += lc.x.transpose() * d_k;
    gl.bk += d_k.colwise().sum().transpose();
    gl.wv.noalias() += lc.x.transpose() * d_v;
    gl.bv += d_v.colwise().sum().transpose();
    dx.noalias() += d_q * lp.wq.transpose();
    dx.noalias() += d_k * lp.wk.transpose();
    dx.noalias() += d_v * lp.wv.transpose();
    dh_out = std::move(dx);
  }

  // Embedding backward through the embedding dropout.
  detail::dropout_inplace(dh_out, detail::dropout_site_key(out.dropout_key, 0), p);
  for (uint32_t b = 0; b < B; ++b) {
    for (uint32_t i = 0; i < L; ++i) {
      const size_t r = static_cast<size_t>(b) * L + i;
      g.tok_emb.row(in.tokens[r]) += dh_out.row(r);
      g.pos_emb.row(i) += dh_out.row(r);
      g.seg_emb.row(in.segments[r]) += dh_out.row(r);
    }
  }
}

// ---- checkpoint I/O ---------------------------------------------------

namespace detail {

inline constexpr uint32_t kCkptMagic = 0x314B434Du;  // "MCK1"
inline constexpr uint32_t kCkptVersion = 1;

inline void w_u32(std::ofstream& f, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
               static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  f.write(b, 4);
}

inline uint32_t r_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw data_error("checkpoint truncated");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void w_f32(std::ofstream& f, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  w_u32(f, bits);
}

inline float r_f32(std::ifstream& f) {
  const uint32_t bits = r_u32(f);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void w_tensor(std::ofstream& f, const std::string& name, const float* data,
                     std::span<const uint32_t> dims) {
  w_u32(f, static_cast<uint32_t>(name.size()));
  f.write(name.data(), static_cast<std::streamsize>(name.size()));
  w_u32(f, static_cast<uint32_t>(dims.size()));
  size_t n = 1;
  for (uint32_t d : dims) {
    w_u32(f, d);
    n *= d;
  }
  for (size_t i = 0; i < n; ++i) w_f32(f, data[i]);
}

}  // namespace detail

inline void save_checkpoint(const ModelState<float>& st, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write checkpoint: " + path);
  detail::w_u32(f, detail::kCkptMagic);
  detail::w_u32(f, detail::kCkptVersion);
  detail::w_u32(f, st.cfg.layers);
  detail::w_u32(f, st.cfg.hidden);
  detail::w_u32(f, st.cfg.heads);
  detail::w_u32(f, st.cfg.ffn_inner);
  detail::w_u32(f, st.cfg.max_positions);
  detail::w_u32(f, st.cfg.vocab);
  detail::w_f32(f, st.cfg.dropout);
  auto views = param_views(const_cast<ModelState<float>&>(st));
  detail::w_u32(f, static_cast<uint32_t>(views.size()));
  for (const auto& v : views) {
    const uint32_t dims[1] = {static_cast<uint32_t>(v.size)};
    detail::w_tensor(f, v.name, v.data, dims);
  }
}

inline ModelState<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read checkpoint: " + path);
  if (detail::r_u32(f) != detail::kCkptMagic) throw data_error("checkpoint: bad magic");
  if (detail::r_u32(f) != detail::kCkptVersion) throw data_error("checkpoint: bad version");
  ModelConfig cfg;
  cfg.layers = detail::r_u32(f);
  cfg.hidden = detail::r_u32(f);
  cfg.heads = detail::r_u32(f);
  cfg.ffn_inner = detail::r_u32(f);
  cfg.max_positions = detail::r_u32(f);
  cfg.vocab = detail::r_u32(f);
  cfg.dropout = detail::r_f32(f);
  cfg.validate();
  ModelState<float> st = init_params<float>(cfg, 0);
  auto views = param_views(st);
  const uint32_t count = detail::r_u32(f);
  if (count != views.size()) throw data_error("checkpoint: tensor count mismatch");
  for (auto& v : views) {
    const uint32_t name_len = detail::r_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f || name != v.name) throw data_error("checkpoint: tensor name mismatch at " + name);
    const uint32_t ndims = detail::r_u32(f);
    size_t n = 1;
    for (uint32_t d = 0; d < ndims; ++d) n *= detail::r_u32(f);
    if (n != v.size) throw data_error("checkpoint: tensor size mismatch at " + name);
    for (size_t i = 0; i < n; ++i) v.data[i] = detail::r_f32(f);
  }
  return st;
}

template <class S, class S2>
ModelState<S2> cast_state(const ModelState<S>& src) {
  ModelState<S2> dst = init_params<S2>(src.cfg, 0);
  auto sv = param_views(const_cast<ModelState<S>&>(src));
  auto dv = param_views(dst);
  for (size_t i = 0; i < sv.size(); ++i)
    for (size_t j = 0; j < sv[i].size; ++j) dv[i].data[j] = static_cast<S2>(sv[i].data[j]);
  return dst;
}

}  // namespace mlmp
