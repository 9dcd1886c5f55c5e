#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace ctxlm {

/// Transformer and optimizer hyperparameters. The defaults are the desk
/// (toy) configuration; reference() holds the 1.5B-parameter recipe.
struct LMConfig {
  std::size_t n_layers = 4;
  std::size_t hidden_size = 128;
  std::size_t n_heads = 4;
  std::size_t ffn_hidden = 512;  ///< gated feed-forward width
  std::size_t seq_len = 256;
  std::size_t vocab_size = 600;
  std::size_t batch_size_sequences = 16;
  double max_lr = 1e-3;
  double min_lr = 1e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  ///< global-norm clip; 0 disables
  double norm_eps = 1e-5;
  double rope_theta = 10000.0;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  /// 16 layers, hidden 2048, seq_len 4096, batch 504, AdamW(0.1),
  /// lr 3e-4 -> 3e-5 with 2000 warmup steps over 100B tokens.
  static LMConfig reference();

  std::size_t head_dim() const { return hidden_size / n_heads; }
  /// Throws ValidationError.
  void validate() const;

  bool operator==(const LMConfig&) const = default;
};

/// Closed-form count for pre-norm, tied-embedding, gated-FFN layout.
std::uint64_t parameter_count(const LMConfig& cfg);

nlohmann::json to_json(const LMConfig& cfg);
/// Missing keys keep defaults from `base`; unknown keys are rejected.
LMConfig lm_config_from_json(const nlohmann::json& j, const LMConfig& base = {});
LMConfig load_lm_config(const std::string& path);

}  // namespace ctxlm
