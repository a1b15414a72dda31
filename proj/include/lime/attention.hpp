#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lime/nn.hpp"

namespace lime {

using kernels::Activation;

/// Query rows processed per block. Blocking bounds the score buffer to
/// kAttentionBlock × n; per-row arithmetic is unchanged by it.
inline constexpr std::size_t kAttentionBlock = 512;

/// Row block for masks whose visible keys grow with the row (causal,
/// candidate-suffix). Keys no row of the block can see are not scored, and
/// FLOP counts cover only the scored keys.
inline constexpr std::size_t kTriangularBlock = 64;

/// Multi-head attention parameters. Head h uses column block h of each
/// projection, i.e. W_Q[:, h·dq:(h+1)·dq]; with qk width equal to d this is
/// the usual d×(d/H) per-head split.
template <class T>
struct MhaParams {
  std::size_t heads = 1;
  Activation activation = Activation::ScaledSoftmax;
  bool pre_norm = true;  ///< layer-norm each input before its projection
  LayerNorm<T> norm_q, norm_k, norm_v;
  Param<T> w_q, w_k, w_v;

  static MhaParams create(ParamSet<T>& ps, const std::string& name, std::size_t d, std::size_t heads,
                          Activation act, std::mt19937_64& rng, std::size_t qk_dim = 0) {
    if (qk_dim == 0) qk_dim = d;
    if (heads == 0 || d % heads != 0 || qk_dim % heads != 0)
      throw std::invalid_argument(name + ": width " + std::to_string(d) + "/" + std::to_string(qk_dim) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    MhaParams p;
    p.heads = heads;
    p.activation = act;
    p.norm_q = LayerNorm<T>::create(ps, name + ".norm_q", d);
    p.norm_k = LayerNorm<T>::create(ps, name + ".norm_k", d);
    p.norm_v = LayerNorm<T>::create(ps, name + ".norm_v", d);
    p.w_q = ps.add(name + ".w_q", lecun_normal<T>(d, qk_dim, rng));
    p.w_k = ps.add(name + ".w_k", lecun_normal<T>(d, qk_dim, rng));
    p.w_v = ps.add(name + ".w_v", lecun_normal<T>(d, d, rng));
    return p;
  }

  std::size_t model_dim() const { return w_q->rows(); }
  std::size_t qk_dim() const { return w_q->cols(); }
  std::size_t value_dim() const { return w_v->cols(); }
  T scale() const { return static_cast<T>(1.0 / std::sqrt(static_cast<double>(qk_dim() / heads))); }
};

namespace detail {

template <class T>
Var<T> project(Binder<T>& b, const LayerNorm<T>& norm, const Param<T>& w, bool pre_norm, const Var<T>& x) {
  FlopTagScope tag(FlopTag::Projection);
  if (x.cols() != w->rows())
    throw ShapeError("attention projection: input " + shape_str(x.shape()) + " vs weight " + shape_str(w->shape()));
  return matmul(pre_norm ? norm(b, x) : x, b(w));
}

}  // namespace detail

template <class T>
Var<T> project_query(Binder<T>& b, const MhaParams<T>& p, const Var<T>& x) {
  return detail::project(b, p.norm_q, p.w_q, p.pre_norm, x);
}
template <class T>
Var<T> project_key(Binder<T>& b, const MhaParams<T>& p, const Var<T>& x) {
  return detail::project(b, p.norm_k, p.w_k, p.pre_norm, x);
}
template <class T>
Var<T> project_value(Binder<T>& b, const MhaParams<T>& p, const Var<T>& x) {
  return detail::project(b, p.norm_v, p.w_v, p.pre_norm, x);
}

namespace detail {

inline std::size_t attention_row_block(const AttentionMask& mask) {
  return mask.pattern() == MaskPattern::Causal || mask.pattern() == MaskPattern::CandidateSuffix ? kTriangularBlock
                                                                                                  : kAttentionBlock;
}

/// Smallest key prefix [0, k) that gives every row of [r0, r1) the same
/// allowed range as all n keys; n when no shorter prefix does.
inline std::size_t visible_keys(const AttentionMask& mask, std::size_t r0, std::size_t r1, std::size_t n) {
  std::size_t k = 0;
  for (std::size_t i = r0; i < r1; ++i) k = std::max(k, mask.key_range(i, n).second);
  if (k == n) return n;
  for (std::size_t i = r0; i < r1; ++i)
    if (mask.key_range(i, k) != mask.key_range(i, n)) return n;
  return k;
}

/// Inference path of attend() for untracked inputs: per-head keys and values
/// are transposed once and scores are written straight into the block.
template <class T>
Tensor<T> attend_untracked(const Tensor<T>& qp, const Tensor<T>& kp, const Tensor<T>& vp, const AttentionMask& mask,
                           std::size_t heads, Activation act, T scale) {
  const std::size_t q = qp.rows(), n = kp.rows(), dq = qp.cols() / heads, dv = vp.cols() / heads;
  Tensor<T> out = Tensor<T>::matrix(q, vp.cols());
  std::vector<Tensor<T>> kt(heads), vt(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    kt[h] = Tensor<T>::matrix(dq, n);
    vt[h] = Tensor<T>::matrix(dv, n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < dq; ++c) kt[h](c, j) = kp(j, h * dq + c);
      for (std::size_t c = 0; c < dv; ++c) vt[h](c, j) = vp(j, h * dv + c);
    }
  }
  const std::size_t block = attention_row_block(mask);
  for (std::size_t r0 = 0; r0 < q; r0 += block) {
    const std::size_t r1 = std::min(q, r0 + block), rows = r1 - r0;
    const std::size_t k = visible_keys(mask, r0, r1, n);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<T> s = Tensor<T>::matrix(rows, k);
      {
        FlopTagScope tag(FlopTag::AttnScore);
        kernels::gemm_strided(qp.data() + r0 * qp.cols() + h * dq, qp.cols(), kt[h].data(), n, s.data(), k, rows, dq, k);
        add_flops(2ull * rows * dq * k);
      }
      Tensor<T> w = kernels::attention_weights(s, act, scale, mask, r0);
      FlopTagScope tag(FlopTag::AttnValue);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t c = 0; c < dv; ++c)
          out(r0 + i, h * dv + c) = kernels::dot(w.data() + i * k, vt[h].data() + c * n, k);
      add_flops(2ull * rows * k * dv);
    }
  }
  return out;
}

}  // namespace detail

/// Attention over already-projected inputs: per head, weights φ(Q̃_h K̃_hᵀ)
/// under `mask`, times Ṽ_h; heads are concatenated. q = qp.rows().
template <class T>
Var<T> attend(const Var<T>& qp, const Var<T>& kp, const Var<T>& vp, const AttentionMask& mask, std::size_t heads,
              Activation act, T scale) {
  const std::size_t q = qp.rows(), n = kp.rows();
  if (kp.cols() != qp.cols() || vp.rows() != n || heads == 0 || qp.cols() % heads != 0 || vp.cols() % heads != 0)
    throw ShapeError("attend: queries " + shape_str(qp.shape()) + ", keys " + shape_str(kp.shape()) + ", values " +
                     shape_str(vp.shape()) + ", heads " + std::to_string(heads));
  mask.check(q, n);
  const std::size_t dq = qp.cols() / heads, dv = vp.cols() / heads;
  if (q == 0) return Var<T>(Tensor<T>::matrix(0, vp.cols()));
  if (!qp.tracked() && !kp.tracked() && !vp.tracked())
    return Var<T>(detail::attend_untracked(qp.value(), kp.value(), vp.value(), mask, heads, act, scale));

  std::vector<Var<T>> kh(heads), vh(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    kh[h] = heads == 1 ? kp : slice_cols(kp, h * dq, (h + 1) * dq);
    vh[h] = heads == 1 ? vp : slice_cols(vp, h * dv, (h + 1) * dv);
  }
  const std::size_t block = detail::attention_row_block(mask);
  std::vector<Var<T>> blocks;
  for (std::size_t r0 = 0; r0 < q; r0 += block) {
    const std::size_t r1 = std::min(q, r0 + block);
    const std::size_t k = detail::visible_keys(mask, r0, r1, n);
    Var<T> qb = (r0 == 0 && r1 == q) ? qp : slice_rows(qp, r0, r1);
    std::vector<Var<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Var<T> qh = heads == 1 ? qb : slice_cols(qb, h * dq, (h + 1) * dq);
      const Var<T> keys = k == n ? kh[h] : slice_rows(kh[h], 0, k);
      const Var<T> values = k == n ? vh[h] : slice_rows(vh[h], 0, k);
      Var<T> s;
      {
        FlopTagScope tag(FlopTag::AttnScore);
        s = matmul_nt(qh, keys);
      }
      Var<T> w = attention_weights(s, act, scale, mask, r0);
      FlopTagScope tag(FlopTag::AttnValue);
      outs.push_back(matmul(w, values));
    }
    blocks.push_back(heads == 1 ? outs[0] : concat_cols<T>(outs));
  }
  return blocks.size() == 1 ? blocks[0] : concat_rows<T>(blocks);
}

/// Masked multi-head attention MHA(Q, K, V; mask; θ) with layer-norm before
/// each projection.
template <class T>
Var<T> mha(Binder<T>& b, const MhaParams<T>& p, const Var<T>& queries, const Var<T>& keys, const Var<T>& values,
           const AttentionMask& mask) {
  if (keys.rows() != values.rows())
    throw ShapeError("mha: keys " + shape_str(keys.shape()) + " and values " + shape_str(values.shape()) +
                     " differ in length");
  return attend(project_query(b, p, queries), project_key(b, p, keys), project_value(b, p, values), mask, p.heads,
                p.activation, p.scale());
}

/// Per-head attention weight matrices (q×n each) for analysis.
template <class T>
std::vector<Tensor<T>> attention_weight_matrices(const Tensor<T>& qp, const Tensor<T>& kp, const AttentionMask& mask,
                                                 std::size_t heads, Activation act, T scale) {
  mask.check(qp.rows(), kp.rows());
  const std::size_t dq = qp.cols() / heads;
  std::vector<Tensor<T>> out;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> s = kernels::matmul_nt(kernels::slice_cols(qp, h * dq, (h + 1) * dq),
                                     kernels::slice_cols(kp, h * dq, (h + 1) * dq), false);
    out.push_back(kernels::attention_weights(s, act, scale, mask));
  }
  return out;
}

class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// XOR attention by brute force: full (h+ℓ)² attention over X = E ⊕ L^C with
/// the Xor mask. Reference and oracle path only.
template <class T>
Var<T> xora_reference(Binder<T>& b, const MhaParams<T>& p, const Var<T>& x, std::size_t history_len) {
  if (history_len == 0 || history_len >= x.rows())
    throw DegenerateInputError("xora: need at least one history row and one link row, got history " +
                               std::to_string(history_len) + " of " + std::to_string(x.rows()) + " rows");
  return mha(b, p, x, x, x, AttentionMask::xor_mask(history_len));
}

/// XOR attention as two cross-attentions: history queries over links and
/// link queries over history. No history×history score block is formed.
template <class T>
std::pair<Var<T>, Var<T>> xora_factored(Binder<T>& b, const MhaParams<T>& p, const Var<T>& history,
                                        const Var<T>& links) {
  if (history.rows() == 0 || links.rows() == 0)
    throw DegenerateInputError("xora: need at least one history row and one link row");
  Var<T> hq = project_query(b, p, history), hk = project_key(b, p, history), hv = project_value(b, p, history);
  Var<T> lq = project_query(b, p, links), lk = project_key(b, p, links), lv = project_value(b, p, links);
  const auto all = AttentionMask::all_ones();
  Var<T> history_out = attend(hq, lk, lv, all, p.heads, p.activation, p.scale());
  Var<T> links_out = attend(lq, hk, hv, all, p.heads, p.activation, p.scale());
  return {history_out, links_out};
}

}  // namespace lime
