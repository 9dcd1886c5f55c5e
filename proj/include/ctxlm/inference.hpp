#pragma once

#include <span>
#include <vector>

#include "ctxlm/model.hpp"
#include "ctxlm/trainer.hpp"

namespace ctxlm {

/// Incremental single-stream decoder with a per-layer key/value cache.
///
/// All arithmetic runs in fixed-order loops, so the logits for a position
/// do not depend on whether earlier positions came from the cache or were
/// recomputed. Each session owns its cache; many sessions may share one
/// read-only checkpoint.
class InferenceSession {
 public:
  explicit InferenceSession(const Checkpoint& ckpt);

  void reset() { pos_ = 0; }
  std::size_t position() const { return pos_; }
  std::size_t capacity() const { return cfg_.seq_len; }

  /// Appends one token and returns the next-token logits.
  const std::vector<float>& step(TokenId token);
  /// Appends all tokens; returns logits after the last one.
  const std::vector<float>& feed(std::span<const TokenId> tokens);

 private:
  const LMConfig& cfg_;
  const Parameters<float>& p_;
  RopeTable rope_;
  std::vector<std::vector<float>> k_cache_, v_cache_;  // per layer, [seq_len x hidden]
  std::size_t pos_ = 0;

  std::vector<float> x_, n_, q_, k_, v_, att_, proj_, gate_, up_, scores_, logits_;
};

}  // namespace ctxlm
