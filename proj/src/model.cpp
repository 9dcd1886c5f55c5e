#include "ctxlm/model.hpp"

namespace ctxlm {

TokenBatch TokenBatch::from_sequences(std::span<const TokenizedSequence> seqs) {
  CTXLM_REQUIRE(!seqs.empty(), "empty batch");
  TokenBatch b;
  b.batch = seqs.size();
  b.length = seqs.front().tokens.size();
  b.tokens.reserve(b.batch * b.length);
  b.loss_mask.reserve(b.batch * (b.length - 1));
  for (const auto& s : seqs) {
    CTXLM_REQUIRE(s.tokens.size() == b.length && s.loss_mask.size() + 1 == b.length,
                  "batch sequences must share one length");
    b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
    b.loss_mask.insert(b.loss_mask.end(), s.loss_mask.begin(), s.loss_mask.end());
  }
  return b;
}

TokenBatch TokenBatch::from_ids(std::span<const TokenId> ids, std::size_t batch, std::size_t length) {
  CTXLM_REQUIRE(ids.size() == batch * length && length >= 1, "ids do not match batch x length");
  TokenBatch b;
  b.batch = batch;
  b.length = length;
  b.tokens.assign(ids.begin(), ids.end());
  b.loss_mask.assign(batch * (length - 1), 1);
  return b;
}

double lr_at(std::size_t step, const LMConfig& cfg) {
  CTXLM_REQUIRE(step <= cfg.total_steps, "step beyond total_steps");
  if (step < cfg.warmup_steps)
    return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ctxlm
