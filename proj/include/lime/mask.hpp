#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "lime/tensor.hpp"

namespace lime {

enum class MaskPattern { AllOnes, Causal, Xor, CandidateSuffix, None };

/// Symbolic attention mask. Every supported pattern allows a single contiguous
/// key range per query row, which is what the kernels consume; a dense 0/1
/// matrix is only built on request for reference paths and tests.
///
///  - AllOnes:          every query sees every key.
///  - Causal:           row i sees keys j <= i.
///  - Xor(h):           rows < h see keys >= h and rows >= h see keys < h, so
///                      history and link blocks only attend across.
///  - CandidateSuffix(h): causal over the first h rows; rows >= h see only
///                      the first h keys (candidates never see each other).
///  - None:             no key is visible; every output row is zero.
class AttentionMask {
 public:
  static AttentionMask all_ones() { return AttentionMask(MaskPattern::AllOnes, 0); }
  static AttentionMask causal() { return AttentionMask(MaskPattern::Causal, 0); }
  static AttentionMask xor_mask(std::size_t history_len) { return AttentionMask(MaskPattern::Xor, history_len); }
  static AttentionMask candidate_suffix(std::size_t history_len) {
    return AttentionMask(MaskPattern::CandidateSuffix, history_len);
  }
  static AttentionMask none() { return AttentionMask(MaskPattern::None, 0); }

  MaskPattern pattern() const noexcept { return pattern_; }
  std::size_t history_len() const noexcept { return history_len_; }
  bool is_all_ones() const noexcept { return pattern_ == MaskPattern::AllOnes; }

  /// Allowed key range [first, second) for absolute query row `i` over `n` keys.
  std::pair<std::size_t, std::size_t> key_range(std::size_t i, std::size_t n) const noexcept {
    switch (pattern_) {
      case MaskPattern::AllOnes:
        return {0, n};
      case MaskPattern::Causal:
        return {0, std::min(n, i + 1)};
      case MaskPattern::Xor:
        return i < history_len_ ? std::pair{std::min(history_len_, n), n} : std::pair{std::size_t{0}, std::min(history_len_, n)};
      case MaskPattern::CandidateSuffix:
        return i < history_len_ ? std::pair{std::size_t{0}, std::min(n, i + 1)}
                                : std::pair{std::size_t{0}, std::min(history_len_, n)};
      case MaskPattern::None:
        return {0, 0};
    }
    return {0, 0};
  }

  bool allowed(std::size_t i, std::size_t j, std::size_t n) const noexcept {
    auto [lo, hi] = key_range(i, n);
    return j >= lo && j < hi;
  }

  /// Throws ShapeError when the pattern cannot be laid over a q×n score grid.
  void check(std::size_t q, std::size_t n) const {
    switch (pattern_) {
      case MaskPattern::AllOnes:
      case MaskPattern::Causal:
      case MaskPattern::None:
        return;
      case MaskPattern::Xor:
      case MaskPattern::CandidateSuffix:
        if (q != n || history_len_ > n)
          throw ShapeError(name() + " mask over history " + std::to_string(history_len_) +
                           " does not fit score grid " + shape_str({q, n}));
        return;
    }
  }

  template <class T = double>
  Tensor<T> materialize(std::size_t q, std::size_t n) const {
    check(q, n);
    Tensor<T> m = Tensor<T>::matrix(q, n);
    for (std::size_t i = 0; i < q; ++i) {
      auto [lo, hi] = key_range(i, n);
      for (std::size_t j = lo; j < hi; ++j) m(i, j) = T{1};
    }
    return m;
  }

  std::string name() const {
    switch (pattern_) {
      case MaskPattern::AllOnes: return "all-ones";
      case MaskPattern::Causal: return "causal";
      case MaskPattern::Xor: return "xor";
      case MaskPattern::CandidateSuffix: return "candidate-suffix";
      case MaskPattern::None: return "none";
    }
    return "?";
  }

 private:
  AttentionMask(MaskPattern p, std::size_t h) : pattern_(p), history_len_(h) {}

  MaskPattern pattern_;
  std::size_t history_len_;
};

}  // namespace lime
