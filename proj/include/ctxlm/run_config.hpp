#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "ctxlm/config.hpp"
#include "ctxlm/corpus.hpp"
#include "ctxlm/decode.hpp"
#include "ctxlm/metadata.hpp"

namespace ctxlm {

struct RunPaths {
  std::string corpus;       ///< JSONL documents
  std::string dataset;      ///< packed sequences
  std::string vocab;        ///< vocabulary JSON; empty means byte-level
  std::string checkpoint;   ///< checkpoint file to read (generate, eval, serve, resume)
  std::string checkpoints;  ///< directory for periodic training checkpoints
  std::string reports;      ///< directory for evaluation reports

  bool operator==(const RunPaths&) const = default;
};

struct DecodeDefaults {
  double gamma = kDefaultGamma;
  double temperature = kDefaultTemperature;
  std::optional<std::size_t> top_k = kDefaultTopK;
  std::size_t max_tokens = kDefaultMaxTokens;

  bool operator==(const DecodeDefaults&) const = default;
};

/// Everything a subcommand reads from the config file. Keys are the JSON
/// names below; every key has a matching command-line flag
/// (snake_case -> --kebab-case) that overrides it.
///
///   { "seed": 0,
///     "paths":   { corpus, dataset, vocab, checkpoint, checkpoints, reports },
///     "model":   { LMConfig keys },
///     "context": { fields_included, rendering_mode, mixture_probability,
///                  schedule, cooldown_fraction, max_context_tokens },
///     "decode":  { gamma, temperature, top_k, max_tokens },
///     "synth":   { n_docs, n_topics, doc_len, n_words, informativeness, block_mass } }
struct RunConfig {
  std::uint64_t seed = 0;  ///< also the model seed
  RunPaths paths;
  LMConfig model;
  ContextSpec context;
  DecodeDefaults decode;
  SynthSpec synth;

  /// Copies `seed` into the model and synth blocks and validates.
  void resolve();
};

nlohmann::json to_json(const ContextSpec& c);
ContextSpec context_spec_from_json(const nlohmann::json& j, const ContextSpec& base = {});

nlohmann::json to_json(const RunConfig& c);
/// Strict: unknown sections or keys throw ValidationError. Missing keys
/// keep the values of `base`.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = {});
RunConfig load_run_config(const std::string& path);

/// Stable hash of the canonical JSON form.
std::string config_fingerprint(const nlohmann::json& j);

}  // namespace ctxlm
