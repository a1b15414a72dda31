#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lime/attention.hpp"

namespace lime {

enum class ModelKind { Ttsn, LimeMha, LimeXor, MhaSkyline, HstuSkyline };

inline constexpr ModelKind kAllModelKinds[] = {ModelKind::Ttsn, ModelKind::LimeMha, ModelKind::LimeXor,
                                               ModelKind::MhaSkyline, ModelKind::HstuSkyline};

inline std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Ttsn: return "ttsn";
    case ModelKind::LimeMha: return "lime-mha";
    case ModelKind::LimeXor: return "lime-xor";
    case ModelKind::MhaSkyline: return "mha-sky";
    case ModelKind::HstuSkyline: return "hstu-sky";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  for (ModelKind k : kAllModelKinds)
    if (model_kind_name(k) == s) return k;
  throw std::invalid_argument("unknown model '" + s + "' (expected ttsn, lime-mha, lime-xor, mha-sky, hstu-sky)");
}

inline bool is_lime(ModelKind k) { return k == ModelKind::LimeMha || k == ModelKind::LimeXor; }

/// One categorical item attribute. Ids 1..vocab are valid; 0 is the reserved
/// out-of-vocabulary row.
struct AttributeSpec {
  std::string name;
  std::size_t vocab = 0;
  std::size_t dim = 0;
};

struct ModelConfig {
  ModelKind kind = ModelKind::LimeMha;
  std::size_t d = 32;
  std::size_t links = 16;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t max_seq_len = 256;
  std::size_t context_dim = 8;
  std::size_t qk_dim = 0;          ///< score projection width; 0 means d
  std::size_t context_hidden = 0;  ///< hidden width of the link contextualizer; 0 means d
  std::size_t context_layers = 2;  ///< 1 makes the contextualizer a single linear map
  Activation personalize_activation = Activation::ScaledSoftmax;
  Activation decoupled_activation = Activation::ScaledSoftmax;
  Activation target_activation = Activation::ScaledSoftmax;
  Activation stacked_activation = Activation::Silu;
  std::vector<std::size_t> interaction_widths = {64, 32};
  std::vector<AttributeSpec> item_attributes;  ///< empty: the model takes embeddings directly
  std::vector<std::size_t> encoder_hidden;     ///< hidden widths of the item projection MLP
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 7;

  std::size_t effective_qk_dim() const { return qk_dim ? qk_dim : d; }
  std::size_t effective_context_hidden() const { return context_hidden ? context_hidden : d; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (d == 0) fail("d must be positive");
    if (links == 0) fail("link count must be at least 1");
    if (heads == 0 || d % heads != 0) fail("d=" + std::to_string(d) + " not divisible by heads=" + std::to_string(heads));
    if (effective_qk_dim() % heads != 0) fail("qk_dim not divisible by heads");
    if (layers == 0) fail("layers must be at least 1");
    if (context_dim == 0) fail("context_dim must be at least 1");
    if (context_layers != 1 && context_layers != 2) fail("context_layers must be 1 or 2");
    if (max_seq_len == 0) fail("max_seq_len must be positive");
    for (std::size_t w : interaction_widths)
      if (w == 0) fail("interaction widths must be positive");
    for (const auto& a : item_attributes)
      if (a.vocab == 0 || a.dim == 0) fail("attribute '" + a.name + "' needs positive vocab and dim");
    if (!(learning_rate >= 0)) fail("learning_rate must be non-negative");
    if (batch_size == 0) fail("batch_size must be positive");
  }
};

/// Inputs of one scoring call, already embedded.
template <class T>
struct RankingRequest {
  Tensor<T> history;     ///< N×d, oldest first
  Tensor<T> context;     ///< 1×d_c
  Tensor<T> candidates;  ///< M×d
  std::vector<std::uint64_t> candidate_ids;
  std::uint64_t request_id = 0;
};

/// Everything the candidate stage needs about one user. Fields unused by a
/// model kind stay empty.
template <class T>
struct UserState {
  ModelKind kind = ModelKind::LimeMha;
  std::uint64_t request_id = 0;
  Var<T> context;             ///< 1×d_c
  Var<T> personalized_links;  ///< ℓ×d (LIME)
  Var<T> link_values;         ///< ℓ×d, personalized links through W_V (LIME)
  Var<T> pooled_history;      ///< 1×d (TTSN)
  std::vector<Var<T>> keys, values;  ///< projected history per layer (skylines)
};

namespace detail {
template <class T>
bool same_bytes(const Var<T>& a, const Var<T>& b) {
  const auto& x = a.value();
  const auto& y = b.value();
  return x.shape() == y.shape() && std::memcmp(x.data(), y.data(), x.size() * sizeof(T)) == 0;
}
}  // namespace detail

template <class T>
bool bitwise_equal(const UserState<T>& a, const UserState<T>& b) {
  if (a.kind != b.kind || a.request_id != b.request_id || a.keys.size() != b.keys.size() ||
      a.values.size() != b.values.size())
    return false;
  if (!detail::same_bytes(a.context, b.context) || !detail::same_bytes(a.personalized_links, b.personalized_links) ||
      !detail::same_bytes(a.link_values, b.link_values) || !detail::same_bytes(a.pooled_history, b.pooled_history))
    return false;
  for (std::size_t i = 0; i < a.keys.size(); ++i)
    if (!detail::same_bytes(a.keys[i], b.keys[i]) || !detail::same_bytes(a.values[i], b.values[i])) return false;
  return true;
}

/// Maps a continuous value to a 1-based bucket id given sorted boundaries;
/// a value equal to a boundary lands in the lower bucket.
class Bucketizer {
 public:
  Bucketizer() = default;
  explicit Bucketizer(std::vector<double> boundaries) : b_(std::move(boundaries)) {
    if (!std::is_sorted(b_.begin(), b_.end()) || std::adjacent_find(b_.begin(), b_.end()) != b_.end())
      throw std::invalid_argument("bucketizer boundaries must be strictly increasing");
  }

  std::size_t bucket(double v) const {
    return static_cast<std::size_t>(std::lower_bound(b_.begin(), b_.end(), v) - b_.begin()) + 1;
  }
  std::size_t bucket_count() const { return b_.size() + 1; }
  const std::vector<double>& boundaries() const { return b_; }

 private:
  std::vector<double> b_;
};

/// Attribute ids of one item, one per configured attribute.
using ItemFeatures = std::vector<std::size_t>;

template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t d = cfg_.d, qk = cfg_.effective_qk_dim();

    if (!cfg_.item_attributes.empty()) {
      std::size_t width = 0;
      for (const auto& a : cfg_.item_attributes) {
        tables_.push_back(ps_.add("item." + a.name, randn<T>({a.vocab + 1, a.dim}, rng, T(0.1))));
        width += a.dim;
      }
      auto widths = cfg_.encoder_hidden;
      widths.push_back(d);
      encoder_ = Mlp<T>::create(ps_, "item.mlp", width, widths, rng);
    }

    switch (cfg_.kind) {
      case ModelKind::Ttsn:
        break;
      case ModelKind::LimeMha:
      case ModelKind::LimeXor:
        links_ = ps_.add("links", randn<T>({cfg_.links, d}, rng));
        contextualizer_ = Mlp<T>::create(ps_, "context", d + cfg_.context_dim,
                                         cfg_.context_layers == 1 ? std::vector<std::size_t>{d}
                                                                  : std::vector<std::size_t>{cfg_.effective_context_hidden(), d},
                                         rng);
        if (cfg_.kind == ModelKind::LimeMha) {
          personalize_ = MhaParams<T>::create(ps_, "personalize", d, cfg_.heads, cfg_.personalize_activation, rng, qk);
        } else {
          for (std::size_t j = 0; j < cfg_.layers; ++j) {
            const std::string n = "xor." + std::to_string(j);
            stack_attn_.push_back(MhaParams<T>::create(ps_, n + ".attn", d, cfg_.heads, cfg_.stacked_activation, rng, qk));
            stack_mlp_.push_back(GatedMlp<T>::create(ps_, n + ".mlp", d, rng));
          }
        }
        decoupled_ = MhaParams<T>::create(ps_, "decoupled", d, 1, cfg_.decoupled_activation, rng, qk);
        break;
      case ModelKind::MhaSkyline:
        target_ = MhaParams<T>::create(ps_, "target", d, cfg_.heads, cfg_.target_activation, rng, qk);
        break;
      case ModelKind::HstuSkyline:
        for (std::size_t j = 0; j < cfg_.layers; ++j) {
          const std::string n = "hstu." + std::to_string(j);
          stack_attn_.push_back(MhaParams<T>::create(ps_, n + ".attn", d, cfg_.heads, cfg_.stacked_activation, rng, qk));
          stack_mlp_.push_back(GatedMlp<T>::create(ps_, n + ".mlp", d, rng));
        }
        break;
    }
    auto widths = cfg_.interaction_widths;
    widths.push_back(1);
    interaction_ = Mlp<T>::create(ps_, "interaction", 2 * d + cfg_.context_dim, widths, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  ModelKind kind() const noexcept { return cfg_.kind; }
  ParamSet<T>& params() noexcept { return ps_; }
  const ParamSet<T>& params() const noexcept { return ps_; }

  /// Deep copy at another precision.
  template <class U>
  Model<U> cast() const {
    Model<U> out(cfg_);
    copy_params_into(out);
    return out;
  }

  template <class U>
  void copy_params_into(Model<U>& dst) const {
    for (const auto& [name, p] : ps_.items()) {
      auto q = dst.params().find(name);
      if (!q || q->shape() != p->shape()) throw std::invalid_argument("parameter layout mismatch at " + name);
      *q = p->template cast<U>();
    }
  }

  Model clone() const { return cast<T>(); }

  // --- item side -----------------------------------------------------------

  Var<T> embed_items(Binder<T>& b, const std::vector<ItemFeatures>& items) const {
    if (tables_.empty()) throw std::logic_error("model has no item encoder (no item attributes configured)");
    std::vector<Var<T>> parts;
    for (std::size_t a = 0; a < tables_.size(); ++a) {
      std::vector<std::size_t> ids(items.size());
      for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].size() != tables_.size())
          throw ShapeError("item " + std::to_string(i) + " has " + std::to_string(items[i].size()) +
                           " attributes, expected " + std::to_string(tables_.size()));
        const std::size_t id = items[i][a];
        ids[i] = id <= cfg_.item_attributes[a].vocab ? id : 0;
      }
      parts.push_back(gather_rows(b(tables_[a]), std::span<const std::size_t>(ids)));
    }
    Var<T> x = parts.size() == 1 ? parts[0] : concat_cols<T>(parts);
    return encoder_(b, x);
  }

  const Mlp<T>& encoder() const { return encoder_; }
  const std::vector<Param<T>>& attribute_tables() const { return tables_; }

  // --- LIME stages ---------------------------------------------------------

  /// L^C = MLP(L ⊕ E^C) with E^C repeated on every link row.
  Var<T> contextualize_links(Binder<T>& b, const Var<T>& context) const {
    require_lime("contextualize_links");
    check_context(context);
    Var<T> l = b(links_);
    return contextualizer_(b, concat_cols(l, broadcast_rows(context, l.rows())));
  }

  /// L^P = MHA(L^C, E, E) over all history keys.
  Var<T> personalize_links_mha(Binder<T>& b, const Var<T>& lc, const Var<T>& history) const {
    if (history.rows() == 0) return lc;
    return mha(b, personalize_, lc, history, history, AttentionMask::all_ones());
  }

  /// Stacked XOR layers; each layer's gated output is added back to both
  /// streams and its link block is summed into L^P. The last layer only
  /// computes the link direction since nothing reads its history block.
  Var<T> personalize_links_xor(Binder<T>& b, const Var<T>& lc, const Var<T>& history) const {
    if (history.rows() == 0) return lc;
    Var<T> e = history, l = lc, lp;
    for (std::size_t j = 0; j < stack_attn_.size(); ++j) {
      const auto& p = stack_attn_[j];
      Var<T> gl;
      if (j + 1 < stack_attn_.size()) {
        auto [ye, yl] = xora_factored(b, p, e, l);
        gl = stack_mlp_[j](b, yl);
        e = add(e, stack_mlp_[j](b, ye));
      } else {
        Var<T> yl = attend(project_query(b, p, l), project_key(b, p, e), project_value(b, p, e),
                           AttentionMask::all_ones(), p.heads, p.activation, p.scale());
        gl = stack_mlp_[j](b, yl);
      }
      l = add(l, gl);
      lp = j == 0 ? gl : add(lp, gl);
    }
    return lp;
  }

  /// Same computation over the concatenated sequence with the Xor mask.
  Var<T> personalize_links_xor_reference(Binder<T>& b, const Var<T>& lc, const Var<T>& history) const {
    if (history.rows() == 0) return lc;
    const std::size_t n = history.rows();
    Var<T> x = concat_rows(history, lc), lp;
    for (std::size_t j = 0; j < stack_attn_.size(); ++j) {
      Var<T> g = stack_mlp_[j](b, xora_reference(b, stack_attn_[j], x, n));
      x = add(x, g);
      Var<T> gl = slice_rows(g, n, g.rows());
      lp = j == 0 ? gl : add(lp, gl);
    }
    return lp;
  }

  Var<T> personalize_links(Binder<T>& b, const Var<T>& lc, const Var<T>& history) const {
    return cfg_.kind == ModelKind::LimeXor ? personalize_links_xor(b, lc, history)
                                           : personalize_links_mha(b, lc, history);
  }

  /// Candidate-to-link weights φ((T W_Q)(L W_K)ᵀ), M×ℓ. Item-side only; this
  /// is the row the cache stores.
  Var<T> decoupled_weights(Binder<T>& b, const Var<T>& candidates) const {
    require_lime("decoupled_weights");
    Var<T> q = project_query(b, decoupled_, candidates);
    Var<T> k = project_key(b, decoupled_, b(links_));
    Var<T> s;
    {
      FlopTagScope tag(FlopTag::AttnScore);
      s = matmul_nt(q, k);
    }
    return attention_weights(s, decoupled_.activation, decoupled_.scale(), AttentionMask::all_ones());
  }

  /// L^P W_V, ℓ×d.
  Var<T> link_values(Binder<T>& b, const Var<T>& lp) const {
    require_lime("link_values");
    return project_value(b, decoupled_, lp);
  }

  /// O = weights · link values.
  static Var<T> mix_links(const Var<T>& weights, const Var<T>& values) {
    FlopTagScope tag(FlopTag::AttnValue);
    return matmul(weights, values);
  }

  Var<T> decoupled_interaction(Binder<T>& b, const Var<T>& candidates, const Var<T>& lp) const {
    return mix_links(decoupled_weights(b, candidates), link_values(b, lp));
  }

  // --- scoring -------------------------------------------------------------

  /// Candidate logits (M×1) from the per-candidate representation O.
  Var<T> interaction_logits(Binder<T>& b, const Var<T>& o, const Var<T>& candidates, const Var<T>& context) const {
    const std::size_t m = candidates.rows();
    Var<T> x = concat_cols<T>(std::vector<Var<T>>{o, candidates, broadcast_rows(context, m)});
    return interaction_(b, x);
  }

  /// Stage 2: everything that depends on the user but not on candidates.
  UserState<T> user_state(Binder<T>& b, const Var<T>& history_in, const Var<T>& context,
                          std::uint64_t request_id = 0) const {
    check_history(history_in);
    const Var<T> history = history_in.rows() ? history_in : Var<T>(Tensor<T>::matrix(0, cfg_.d));
    check_context(context);
    UserState<T> st;
    st.kind = cfg_.kind;
    st.request_id = request_id;
    st.context = context;
    switch (cfg_.kind) {
      case ModelKind::Ttsn:
        st.pooled_history = history.rows() ? col_sum(history) : Var<T>(Tensor<T>::matrix(1, cfg_.d));
        break;
      case ModelKind::LimeMha:
      case ModelKind::LimeXor:
        st.personalized_links = personalize_links(b, contextualize_links(b, context), history);
        st.link_values = link_values(b, st.personalized_links);
        break;
      case ModelKind::MhaSkyline:
        st.keys.push_back(project_key(b, target_, history));
        st.values.push_back(project_value(b, target_, history));
        break;
      case ModelKind::HstuSkyline: {
        Var<T> x = history;
        for (std::size_t j = 0; j < stack_attn_.size(); ++j) {
          const auto& p = stack_attn_[j];
          Var<T> k = project_key(b, p, x), v = project_value(b, p, x);
          st.keys.push_back(k);
          st.values.push_back(v);
          if (j + 1 < stack_attn_.size() && x.rows() > 0) {
            Var<T> y = attend(project_query(b, p, x), k, v, AttentionMask::causal(), p.heads, p.activation, p.scale());
            x = add(x, stack_mlp_[j](b, y));
          }
        }
        break;
      }
    }
    return st;
  }

  /// Stage 3 without a cache: candidate logits (M×1) given a user state.
  Var<T> candidate_logits(Binder<T>& b, const UserState<T>& st, const Var<T>& candidates) const {
    check_candidates(candidates);
    if (st.kind != cfg_.kind) throw std::invalid_argument("user state was built by a different model kind");
    const std::size_t m = candidates.rows();
    Var<T> o;
    switch (cfg_.kind) {
      case ModelKind::Ttsn:
        o = broadcast_rows(st.pooled_history, m);
        break;
      case ModelKind::LimeMha:
      case ModelKind::LimeXor:
        o = mix_links(decoupled_weights(b, candidates), st.link_values);
        break;
      case ModelKind::MhaSkyline:
        o = attend(project_query(b, target_, candidates), st.keys[0], st.values[0], AttentionMask::all_ones(),
                   target_.heads, target_.activation, target_.scale());
        break;
      case ModelKind::HstuSkyline: {
        Var<T> z = candidates;
        for (std::size_t j = 0; j < stack_attn_.size(); ++j) {
          const auto& p = stack_attn_[j];
          Var<T> y = attend(project_query(b, p, z), st.keys[j], st.values[j], AttentionMask::all_ones(), p.heads,
                            p.activation, p.scale());
          z = add(z, stack_mlp_[j](b, y));
        }
        o = z;
        break;
      }
    }
    return interaction_logits(b, o, candidates, st.context);
  }

  /// Monolithic forward pass, M×1 logits.
  Var<T> forward(Binder<T>& b, const Var<T>& history, const Var<T>& context, const Var<T>& candidates) const {
    return candidate_logits(b, user_state(b, history, context), candidates);
  }

  /// HSTU skyline computed over the concatenated history ⊕ candidates with
  /// the candidate-suffix mask. Reference path for tests.
  Var<T> hstu_reference_logits(Binder<T>& b, const Var<T>& history, const Var<T>& context,
                               const Var<T>& candidates) const {
    if (cfg_.kind != ModelKind::HstuSkyline) throw std::logic_error("hstu_reference_logits on " + model_kind_name(cfg_.kind));
    const std::size_t n = history.rows();
    Var<T> x = concat_rows(history, candidates);
    for (std::size_t j = 0; j < stack_attn_.size(); ++j) {
      Var<T> y = mha(b, stack_attn_[j], x, x, x, AttentionMask::candidate_suffix(n));
      x = add(x, stack_mlp_[j](b, y));
    }
    return interaction_logits(b, slice_rows(x, n, x.rows()), candidates, context);
  }

  /// Inference entry point: one logit per candidate, shape {M}.
  Tensor<T> score(const RankingRequest<T>& req) const {
    validate(req);
    Binder<T> b;
    Var<T> logits = forward(b, req.history, req.context, req.candidates);
    return logits.value().reshaped({logits.rows()});
  }

  void validate(const RankingRequest<T>& req) const {
    check_history(req.history);
    check_context(req.context);
    check_candidates(req.candidates);
    if (!req.history.all_finite() || !req.context.all_finite() || !req.candidates.all_finite())
      throw std::invalid_argument("ranking request contains non-finite embeddings");
    if (!req.candidate_ids.empty() && req.candidate_ids.size() != req.candidates.rows())
      throw std::invalid_argument("ranking request has " + std::to_string(req.candidate_ids.size()) + " ids for " +
                                  std::to_string(req.candidates.rows()) + " candidates");
  }

  // --- parameter access for the pipeline and analysis ----------------------

  const Param<T>& links() const { return links_; }
  const Mlp<T>& contextualizer() const { return contextualizer_; }
  const MhaParams<T>& personalizer() const { return personalize_; }
  const MhaParams<T>& decoupled() const { return decoupled_; }
  const MhaParams<T>& target() const { return target_; }
  const std::vector<MhaParams<T>>& stack_attention() const { return stack_attn_; }
  const std::vector<GatedMlp<T>>& stack_mlp() const { return stack_mlp_; }
  const Mlp<T>& interaction() const { return interaction_; }

  // Mutable handles so tests can install exact weights.
  Mlp<T>& contextualizer_mut() { return contextualizer_; }
  MhaParams<T>& personalizer_mut() { return personalize_; }
  MhaParams<T>& decoupled_mut() { return decoupled_; }
  std::vector<MhaParams<T>>& stack_attention_mut() { return stack_attn_; }

 private:
  void require_lime(const char* what) const {
    if (!is_lime(cfg_.kind)) throw std::logic_error(std::string(what) + " on non-LIME model " + model_kind_name(cfg_.kind));
  }
  void check_history(const Var<T>& h) const {
    if (h.rows() > 0 && h.cols() != cfg_.d)
      throw ShapeError("history width " + std::to_string(h.cols()) + " != d=" + std::to_string(cfg_.d));
    if (h.rows() > cfg_.max_seq_len)
      throw std::invalid_argument("history length " + std::to_string(h.rows()) + " exceeds max_seq_len " +
                                  std::to_string(cfg_.max_seq_len));
  }
  void check_context(const Var<T>& c) const {
    if (c.rows() != 1 || c.cols() != cfg_.context_dim)
      throw ShapeError("context " + shape_str(c.shape()) + " is not 1×" + std::to_string(cfg_.context_dim));
  }
  void check_candidates(const Var<T>& c) const {
    if (c.rows() == 0) throw std::invalid_argument("ranking request needs at least one candidate");
    if (c.cols() != cfg_.d)
      throw ShapeError("candidate width " + std::to_string(c.cols()) + " != d=" + std::to_string(cfg_.d));
  }

  ModelConfig cfg_;
  ParamSet<T> ps_;
  std::vector<Param<T>> tables_;
  Mlp<T> encoder_;
  Param<T> links_;
  Mlp<T> contextualizer_;
  MhaParams<T> personalize_, decoupled_, target_;
  std::vector<MhaParams<T>> stack_attn_;
  std::vector<GatedMlp<T>> stack_mlp_;
  Mlp<T> interaction_;
};

}  // namespace lime
