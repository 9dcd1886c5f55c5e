#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "ctxlm/config.hpp"
#include "ctxlm/corpus.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/tensor.hpp"

namespace ctxlm {

/// Full training state: config, parameters, AdamW moments, counters and
/// the RNG state after initialization.
struct Checkpoint {
  LMConfig config;
  Parameters<float> params;
  Parameters<float> adam_m;
  Parameters<float> adam_v;
  std::uint64_t step = 0;
  std::uint64_t tokens_consumed = 0;
  std::uint64_t data_cursor = 0;  ///< next sequence index in the training stream
  std::string rng_state;

  Transformer<float> model() const { return Transformer<float>(config, params); }
};

Checkpoint init_model(const LMConfig& cfg);

struct StepMetrics {
  std::uint64_t step = 0;  ///< step index after the update (1-based)
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  ///< before clipping
  std::uint64_t tokens_consumed = 0;
};

/// One AdamW update with decoupled weight decay at lr_at(step + 1).
/// Every batch token counts towards tokens_consumed. Throws RuntimeFailure
/// on a non-finite loss or gradient, leaving `ckpt` untouched.
StepMetrics train_step(Checkpoint& ckpt, std::span<const TokenizedSequence> batch);

/// Cycles through `data` in stored order from ckpt.data_cursor.
StepMetrics train_on_stream(Checkpoint& ckpt, std::span<const TokenizedSequence> data);

/// Self-describing container: "CTXK", u32 version, u64 header length,
/// JSON header (config, counters, RNG state, tensor directory with name,
/// dtype, shape, offset), then raw little-endian f32 tensor data.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace ctxlm
