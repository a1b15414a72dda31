#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lime {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void check_metric_inputs(std::span<const double> preds, std::span<const int> labels, const char* what) {
  if (preds.size() != labels.size())
    throw MetricError(std::string(what) + ": " + std::to_string(preds.size()) + " predictions for " +
                      std::to_string(labels.size()) + " labels");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw MetricError(std::string(what) + ": labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  if (pos == 0 || pos == labels.size())
    throw MetricError(std::string(what) + ": undefined when all labels are " + (pos == 0 ? "negative" : "positive"));
}

}  // namespace detail

/// Mean log loss divided by the entropy of the base rate, so predicting the
/// base rate everywhere scores exactly 1.
inline double normalized_entropy(std::span<const double> preds, std::span<const int> labels) {
  detail::check_metric_inputs(preds, labels, "normalized_entropy");
  double loss = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double p = preds[i];
    if (!(p > 0 && p < 1)) throw MetricError("normalized_entropy: prediction " + std::to_string(i) + " outside (0,1)");
    loss -= labels[i] ? std::log(p) : std::log1p(-p);
    pos += static_cast<std::size_t>(labels[i]);
  }
  const double n = static_cast<double>(preds.size());
  const double r = static_cast<double>(pos) / n;
  return (loss / n) / -(r * std::log(r) + (1 - r) * std::log1p(-r));
}

/// Probability a random positive outranks a random negative, ties counting
/// half, from the rank sum of positives under average ranks.
inline double auc(std::span<const double> preds, std::span<const int> labels) {
  detail::check_metric_inputs(preds, labels, "auc");
  const std::size_t n = preds.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return preds[a] < preds[b]; });
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && preds[idx[j]] == preds[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) {
        rank_sum += avg;
        ++pos;
      }
    i = j;
  }
  const double np = static_cast<double>(pos), nn = static_cast<double>(n - pos);
  return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

struct EvalReport {
  std::string model;
  std::size_t examples = 0;
  double positive_rate = 0;
  double ne = 0;
  double auc = 0;
  double logloss = 0;

  std::string key_values() const {
    std::ostringstream o;
    o.precision(6);
    o << "model=" << model << " examples=" << examples << " positive_rate=" << positive_rate << " ne=" << ne
      << " auc=" << auc << " logloss=" << logloss;
    return o.str();
  }
  static std::string csv_header() { return "model,examples,positive_rate,ne,auc,logloss"; }
  std::string csv_row() const {
    std::ostringstream o;
    o.precision(9);
    o << model << ',' << examples << ',' << positive_rate << ',' << ne << ',' << auc << ',' << logloss;
    return o.str();
  }
};

inline EvalReport evaluate_predictions(std::string model, std::span<const double> preds, std::span<const int> labels) {
  EvalReport r;
  r.model = std::move(model);
  r.examples = preds.size();
  r.ne = normalized_entropy(preds, labels);
  r.auc = auc(preds, labels);
  double loss = 0, pos = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    loss -= labels[i] ? std::log(preds[i]) : std::log1p(-preds[i]);
    pos += labels[i];
  }
  r.logloss = loss / double(preds.size());
  r.positive_rate = pos / double(preds.size());
  return r;
}

}  // namespace lime
