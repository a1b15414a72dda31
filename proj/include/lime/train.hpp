#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "lime/data.hpp"
#include "lime/metrics.hpp"
#include "lime/model.hpp"

namespace lime {

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with bias correction. Parameters that receive no gradient in a step
/// are left untouched, moments included.
template <class T>
class Adam {
 public:
  Adam(ParamSet<T>& ps, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : ps_(ps), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (!(lr >= 0)) throw std::invalid_argument("learning rate must be non-negative");
    for (const auto& [_, p] : ps.items()) {
      m_.emplace_back(p->shape(), T{0});
      v_.emplace_back(p->shape(), T{0});
      t_.push_back(0);
    }
  }

  double learning_rate() const noexcept { return lr_; }

  /// `grads[i]` belongs to the i-th parameter of the set, or is null.
  void step(const std::vector<const Tensor<T>*>& grads) {
    const auto& items = ps_.items();
    if (grads.size() != items.size()) throw std::invalid_argument("Adam::step: one gradient slot per parameter");
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!grads[i]) continue;
      const Tensor<T>& g = *grads[i];
      Tensor<T>& p = *items[i].second;
      const int t = ++t_[i];
      const double c1 = 1 - std::pow(b1_, t), c2 = 1 - std::pow(b2_, t);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        const double m = b1_ * m_[i][k] + (1 - b1_) * gk;
        const double v = b2_ * v_[i][k] + (1 - b2_) * gk * gk;
        m_[i][k] = static_cast<T>(m);
        v_[i][k] = static_cast<T>(v);
        p[k] = static_cast<T>(p[k] - lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    }
  }

 private:
  ParamSet<T>& ps_;
  double lr_, b1_, b2_, eps_;
  std::vector<Tensor<T>> m_, v_;
  std::vector<int> t_;
};

/// Model inputs for a group of sessions. Each distinct item in the group is
/// embedded once and gathered per session.
template <class T>
struct SessionInputs {
  std::vector<Var<T>> history, candidates, context;
};

template <class T>
void check_compatible(const Model<T>& model, const Catalog& catalog, std::size_t context_width) {
  const auto& attrs = model.config().item_attributes;
  if (attrs.size() != catalog.attributes().size())
    throw std::invalid_argument("model has " + std::to_string(attrs.size()) + " item attributes, data has " +
                                std::to_string(catalog.attributes().size()));
  for (std::size_t a = 0; a < attrs.size(); ++a)
    if (attrs[a].name != catalog.attributes()[a])
      throw std::invalid_argument("item attribute " + std::to_string(a) + " is '" + catalog.attributes()[a] +
                                  "' in the data but '" + attrs[a].name + "' in the model");
  if (context_width != model.config().context_dim)
    throw std::invalid_argument("data context width " + std::to_string(context_width) + " != model context_dim " +
                                std::to_string(model.config().context_dim));
}

template <class T>
SessionInputs<T> session_inputs(Binder<T>& b, const Model<T>& model, const Catalog& catalog,
                                std::span<const Session* const> sessions) {
  const std::size_t keep = model.config().max_seq_len;
  std::unordered_map<std::uint64_t, std::size_t> row;
  std::vector<ItemFeatures> feats;
  auto slot = [&](std::uint64_t id) {
    auto [it, fresh] = row.try_emplace(id, feats.size());
    if (fresh) feats.push_back(catalog.features(id));
    return it->second;
  };
  std::vector<std::vector<std::size_t>> hist_rows, cand_rows;
  for (const Session* s : sessions) {
    const std::size_t begin = s->history.size() > keep ? s->history.size() - keep : 0;
    auto& h = hist_rows.emplace_back();
    for (std::size_t i = begin; i < s->history.size(); ++i) h.push_back(slot(s->history[i]));
    auto& c = cand_rows.emplace_back();
    for (std::uint64_t id : s->items) c.push_back(slot(id));
  }
  const Var<T> table = model.embed_items(b, feats);
  SessionInputs<T> in;
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    in.history.push_back(gather_rows(table, std::span<const std::size_t>(hist_rows[i])));
    in.candidates.push_back(gather_rows(table, std::span<const std::size_t>(cand_rows[i])));
    Tensor<T> ctx({1, sessions[i]->context.size()});
    for (std::size_t c = 0; c < ctx.size(); ++c) ctx[c] = static_cast<T>(sessions[i]->context[c]);
    in.context.push_back(Var<T>(std::move(ctx)));
  }
  return in;
}

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  ///< 0: no cap
  bool shuffle = true;
  /// Called after each step with (step, loss).
  std::function<void(std::size_t, double)> on_step;
};

struct TrainResult {
  std::vector<double> losses;  ///< mean batch loss per step
  std::size_t steps = 0;
  std::size_t examples_seen = 0;
};

/// Mini-batches are runs of whole sessions holding at least batch_size
/// examples. Learning rate, batch size and shuffle seed come from the model
/// config.
template <class T>
TrainResult train(Model<T>& model, const Dataset& data, const TrainOptions& opt = {}) {
  const ModelConfig& cfg = model.config();
  if (data.sessions.empty()) throw std::invalid_argument("train: empty dataset");
  check_compatible(model, data.catalog, data.sessions.front().context.size());
  Adam<T> adam(model.params(), cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(data.sessions.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult res;
  const auto& items = model.params().items();
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    if (opt.shuffle) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();) {
      if (opt.max_steps && res.steps >= opt.max_steps) return res;
      std::vector<const Session*> batch;
      std::vector<T> labels;
      while (start < order.size() && (batch.empty() || labels.size() < cfg.batch_size)) {
        const Session& s = data.sessions[order[start++]];
        batch.push_back(&s);
        for (int l : s.labels) labels.push_back(static_cast<T>(l));
      }

      Tape<T> tape;
      Binder<T> b(&tape);
      auto in = session_inputs(b, model, data.catalog, std::span<const Session* const>(batch));
      std::vector<Var<T>> logits;
      for (std::size_t i = 0; i < batch.size(); ++i)
        logits.push_back(model.forward(b, in.history[i], in.context[i], in.candidates[i]));
      Var<T> all = logits.size() == 1 ? logits[0] : concat_rows<T>(logits);
      Var<T> loss = bce_with_logits_mean(all, std::span<const T>(labels));
      const double lv = static_cast<double>(loss.value()[0]);
      tape.backward(loss);

      std::vector<const Tensor<T>*> grads(items.size(), nullptr);
      for (std::size_t i = 0; i < items.size(); ++i)
        if (const Var<T>* v = b.find(items[i].second)) grads[i] = tape.grad(*v);
      bool finite = std::isfinite(lv);
      for (const auto* g : grads) finite = finite && (!g || g->all_finite());
      if (!finite) {
        std::ostringstream msg;
        msg << "training diverged at step " << res.steps << ": loss=" << lv << " lr=" << adam.learning_rate()
            << " grad norms:";
        for (std::size_t i = 0; i < items.size(); ++i) {
          if (!grads[i]) continue;
          double n2 = 0;
          for (std::size_t k = 0; k < grads[i]->size(); ++k) n2 += double((*grads[i])[k]) * double((*grads[i])[k]);
          msg << ' ' << items[i].first << '=' << std::sqrt(n2);
        }
        throw TrainingDivergedError(msg.str());
      }
      adam.step(grads);
      res.losses.push_back(lv);
      res.examples_seen += labels.size();
      if (opt.on_step) opt.on_step(res.steps, lv);
      ++res.steps;
    }
  }
  return res;
}

struct Predictions {
  std::vector<double> probs;
  std::vector<int> labels;
};

/// Click probabilities for every example, in session order.
template <class T>
Predictions predict(const Model<T>& model, const Dataset& data, std::size_t chunk = 256) {
  Predictions out;
  if (data.sessions.empty()) return out;
  check_compatible(model, data.catalog, data.sessions.front().context.size());
  for (std::size_t start = 0; start < data.sessions.size(); start += chunk) {
    std::vector<const Session*> batch;
    for (std::size_t i = start; i < std::min(start + chunk, data.sessions.size()); ++i) batch.push_back(&data.sessions[i]);
    Binder<T> b;
    auto in = session_inputs(b, model, data.catalog, std::span<const Session* const>(batch));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto logits = model.forward(b, in.history[i], in.context[i], in.candidates[i]).value();
      for (std::size_t k = 0; k < logits.size(); ++k) {
        out.probs.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(logits[k]))));
        out.labels.push_back(batch[i]->labels[k]);
      }
    }
  }
  return out;
}

/// Probabilities are clamped away from 0 and 1 so NE stays finite for
/// saturated logits.
template <class T>
EvalReport evaluate(const Model<T>& model, const Dataset& data) {
  auto p = predict(model, data);
  for (auto& x : p.probs) x = std::clamp(x, 1e-12, 1 - 1e-12);
  return evaluate_predictions(model_kind_name(model.kind()), p.probs, p.labels);
}

}  // namespace lime
