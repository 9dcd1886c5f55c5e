#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxlm/random.hpp"
#include "ctxlm/trainer.hpp"
#include "ctxlm/vocab.hpp"

namespace ctxlm {

enum class DecodeMode { CtxFree, CtxConditioned, CtxGuided };

std::string to_string(DecodeMode m);
/// Accepts "ctx_free" / "ctx-free" and likewise for the other modes.
DecodeMode parse_decode_mode(std::string_view s);

inline constexpr double kDefaultGamma = 1.5;
inline constexpr double kDefaultTemperature = 1.0;
inline constexpr std::size_t kDefaultTopK = 50;
inline constexpr std::size_t kDefaultMaxTokens = 64;

struct GuidanceRequest {
  std::string prompt;
  std::string context;
  /// Context of the "free" stream in guided mode; empty reproduces plain
  /// classifier-free guidance against the empty frame.
  std::string baseline_context;
  DecodeMode mode = DecodeMode::CtxConditioned;
  double gamma = kDefaultGamma;
  double temperature = kDefaultTemperature;
  std::optional<std::size_t> top_k = kDefaultTopK;  ///< nullopt: full vocabulary
  std::size_t max_tokens = kDefaultMaxTokens;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Strict parse: unknown keys and ill-typed values throw ValidationError;
/// missing keys take the defaults above. "top_k": null disables top-k.
GuidanceRequest request_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GuidanceRequest& r);

using LogitVector = std::vector<double>;

/// bos <boc> encode(context) <eoc> encode(prompt).
std::vector<TokenId> build_conditioned_input(std::string_view context, std::string_view prompt,
                                             const Vocabulary& vocab);

/// free + gamma * (ctx - free), evaluated as (1 - gamma) * free + gamma * ctx
/// so that gamma = 0 and gamma = 1 return the inputs bit-for-bit.
LogitVector combine_guided(std::span<const double> free, std::span<const double> ctx, double gamma);

/// Numerically stable softmax in double.
std::vector<double> softmax(std::span<const double> logits);

std::vector<double> guided_distribution(std::span<const double> free, std::span<const double> ctx, double gamma);

/// softmax(logits / temperature) restricted to the top_k largest logits
/// (ties by lowest id), renormalized, and sampled with one uniform draw.
/// Throws ValidationError on non-finite logits.
TokenId sample_token(std::span<const double> logits, double temperature, std::optional<std::size_t> top_k, Rng& rng);

struct TopEntry {
  TokenId id = 0;
  double prob = 0.0;
};

/// The k most probable ids, by probability then lowest id.
std::vector<TopEntry> top_entries(std::span<const double> probs, std::size_t k = 5);

/// Per generated token: top-5 of each distribution that was computed.
/// `combined` is the distribution the sampler filtered (before temperature
/// and top-k); `free` and `conditioned` are filled in guided mode and in
/// the mode whose single stream they describe.
struct StepRecord {
  TokenId token = 0;
  std::vector<TopEntry> free, conditioned, combined;
};

struct GenerationResult {
  GuidanceRequest request;     ///< resolved request
  std::vector<TokenId> tokens;  ///< generated ids, excluding the stop token
  std::string text;
  std::vector<StepRecord> steps;
  std::string stop_reason;  ///< "max_tokens", "eos" or "length"
  /// Full conditioning input of each stream, generated suffix included.
  std::vector<TokenId> conditioned_stream, free_stream;
};

struct GenerateOptions {
  /// Recompute every step from scratch instead of using the key/value
  /// cache; slow, exists to check the cache.
  bool recompute = false;
};

/// Generates a continuation. Reentrant over a const checkpoint; all
/// randomness comes from Rng(req.seed). Throws ValidationError when the
/// request is invalid or the conditioning input does not fit in seq_len.
GenerationResult generate(const Checkpoint& ckpt, const Vocabulary& vocab, const GuidanceRequest& req,
                          const GenerateOptions& opts = {});

nlohmann::json to_json(const GenerationResult& r);

}  // namespace ctxlm
