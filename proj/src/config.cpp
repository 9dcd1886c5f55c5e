#include "ctxlm/config.hpp"

#include <fstream>

#include "ctxlm/error.hpp"

namespace ctxlm {

LMConfig LMConfig::reference() {
  LMConfig c;
  c.n_layers = 16;
  c.hidden_size = 2048;
  c.n_heads = 16;
  c.ffn_hidden = 8192;
  c.seq_len = 4096;
  c.vocab_size = 131074;  // Nemo tokenizer + <boc>/<eoc>
  c.batch_size_sequences = 504;
  c.max_lr = 3e-4;
  c.min_lr = 3e-5;
  c.warmup_steps = 2000;
  c.total_steps = 48441;  // 100B tokens / (504 * 4096)
  c.weight_decay = 0.1;
  return c;
}

void LMConfig::validate() const {
  CTXLM_REQUIRE(n_layers > 0, "n_layers must be positive");
  CTXLM_REQUIRE(hidden_size > 0 && n_heads > 0, "hidden_size and n_heads must be positive");
  CTXLM_REQUIRE(hidden_size % n_heads == 0, "hidden_size must be divisible by n_heads");
  CTXLM_REQUIRE(head_dim() % 2 == 0, "head dimension must be even for rotary embeddings");
  CTXLM_REQUIRE(ffn_hidden > 0, "ffn_hidden must be positive");
  CTXLM_REQUIRE(seq_len >= 4, "seq_len must be at least 4");
  CTXLM_REQUIRE(vocab_size > 4, "vocab_size must exceed the reserved ids");
  CTXLM_REQUIRE(batch_size_sequences > 0, "batch_size_sequences must be positive");
  CTXLM_REQUIRE(warmup_steps < total_steps, "warmup_steps must be below total_steps");
  CTXLM_REQUIRE(min_lr >= 0.0 && min_lr <= max_lr, "need 0 <= min_lr <= max_lr");
  CTXLM_REQUIRE(weight_decay >= 0.0, "weight_decay must be non-negative");
  CTXLM_REQUIRE(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  CTXLM_REQUIRE(adam_eps > 0.0 && norm_eps > 0.0, "epsilons must be positive");
  CTXLM_REQUIRE(grad_clip >= 0.0, "grad_clip must be non-negative");
  CTXLM_REQUIRE(init_std > 0.0, "init_std must be positive");
}

std::uint64_t parameter_count(const LMConfig& c) {
  const std::uint64_t d = c.hidden_size, f = c.ffn_hidden, v = c.vocab_size;
  const std::uint64_t per_layer = 2 * d + 4 * d * d + 3 * d * f;
  return v * d + c.n_layers * per_layer + d;
}

nlohmann::json to_json(const LMConfig& c) {
  return {{"n_layers", c.n_layers},
          {"hidden_size", c.hidden_size},
          {"n_heads", c.n_heads},
          {"ffn_hidden", c.ffn_hidden},
          {"seq_len", c.seq_len},
          {"vocab_size", c.vocab_size},
          {"batch_size_sequences", c.batch_size_sequences},
          {"max_lr", c.max_lr},
          {"min_lr", c.min_lr},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"norm_eps", c.norm_eps},
          {"rope_theta", c.rope_theta},
          {"init_std", c.init_std},
          {"seed", c.seed}};
}

LMConfig lm_config_from_json(const nlohmann::json& j, const LMConfig& base) {
  CTXLM_REQUIRE(j.is_object(), "model config must be an object");
  LMConfig c = base;
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items()) CTXLM_REQUIRE(known.contains(key), "unknown model config key: " + key);
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("n_layers", c.n_layers);
    get("hidden_size", c.hidden_size);
    get("n_heads", c.n_heads);
    get("ffn_hidden", c.ffn_hidden);
    get("seq_len", c.seq_len);
    get("vocab_size", c.vocab_size);
    get("batch_size_sequences", c.batch_size_sequences);
    get("max_lr", c.max_lr);
    get("min_lr", c.min_lr);
    get("warmup_steps", c.warmup_steps);
    get("total_steps", c.total_steps);
    get("weight_decay", c.weight_decay);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("grad_clip", c.grad_clip);
    get("norm_eps", c.norm_eps);
    get("rope_theta", c.rope_theta);
    get("init_std", c.init_std);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad model config value: ") + e.what());
  }
  return c;
}

LMConfig load_lm_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed config " + path + ": " + e.what());
  }
  return lm_config_from_json(j.contains("model") ? j.at("model") : j);
}

}  // namespace ctxlm
