#include "ctxlm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxlm/inference.hpp"

namespace ctxlm {

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::CtxFree: return "ctx_free";
    case DecodeMode::CtxConditioned: return "ctx_conditioned";
    case DecodeMode::CtxGuided: return "ctx_guided";
  }
  return "?";
}

DecodeMode parse_decode_mode(std::string_view s) {
  std::string k(s);
  std::replace(k.begin(), k.end(), '-', '_');
  if (k == "ctx_free") return DecodeMode::CtxFree;
  if (k == "ctx_conditioned") return DecodeMode::CtxConditioned;
  if (k == "ctx_guided") return DecodeMode::CtxGuided;
  throw ValidationError("unknown decode mode: " + std::string(s) + " (ctx_free, ctx_conditioned, ctx_guided)");
}

void GuidanceRequest::validate() const {
  CTXLM_REQUIRE(std::isfinite(gamma), "gamma must be finite");
  CTXLM_REQUIRE(std::isfinite(temperature) && temperature > 0.0, "temperature must be > 0");
  CTXLM_REQUIRE(!top_k || *top_k >= 1, "top_k must be >= 1");
  if (mode == DecodeMode::CtxGuided)
    CTXLM_REQUIRE(!context.empty(), "ctx_guided requires a non-empty context");
  else
    CTXLM_REQUIRE(!prompt.empty(), "prompt must be non-empty for " + to_string(mode));
}

namespace {

/// Byte-fallback tokens can split multi-byte characters; the wire record
/// carries U+FFFD in their place (token ids stay exact).
std::string valid_utf8(const std::string& s) {
  const auto quoted = nlohmann::json(s).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  return nlohmann::json::parse(quoted).get<std::string>();
}

template <typename T>
T get_as(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("field '") + key + "' has the wrong type");
  }
}

std::size_t get_count(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  CTXLM_REQUIRE(v.is_number_integer() && v.get<std::int64_t>() >= 0,
                std::string("field '") + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

}  // namespace

GuidanceRequest request_from_json(const nlohmann::json& j) {
  CTXLM_REQUIRE(j.is_object(), "request must be an object");
  static const std::vector<std::string> known = {"prompt", "context",    "baseline_context", "mode", "gamma",
                                                 "temperature", "top_k", "max_tokens",       "seed"};
  for (const auto& [k, _] : j.items())
    CTXLM_REQUIRE(std::find(known.begin(), known.end(), k) != known.end(), "unknown request field: " + k);
  GuidanceRequest r;
  if (j.contains("prompt")) r.prompt = get_as<std::string>(j, "prompt");
  if (j.contains("context")) r.context = get_as<std::string>(j, "context");
  if (j.contains("baseline_context")) r.baseline_context = get_as<std::string>(j, "baseline_context");
  if (j.contains("mode")) r.mode = parse_decode_mode(get_as<std::string>(j, "mode"));
  if (j.contains("gamma") && !j.at("gamma").is_null()) {
    CTXLM_REQUIRE(j.at("gamma").is_number(), "field 'gamma' must be a number");
    r.gamma = j.at("gamma").get<double>();
  }
  if (j.contains("temperature")) {
    CTXLM_REQUIRE(j.at("temperature").is_number(), "field 'temperature' must be a number");
    r.temperature = j.at("temperature").get<double>();
  }
  if (j.contains("top_k")) r.top_k = j.at("top_k").is_null() ? std::nullopt : std::optional(get_count(j, "top_k"));
  if (j.contains("max_tokens")) r.max_tokens = get_count(j, "max_tokens");
  if (j.contains("seed")) {
    CTXLM_REQUIRE(j.at("seed").is_number_integer(), "field 'seed' must be an integer");
    r.seed = j.at("seed").is_number_unsigned() ? j.at("seed").get<std::uint64_t>()
                                               : static_cast<std::uint64_t>(j.at("seed").get<std::int64_t>());
  }
  r.validate();
  return r;
}

nlohmann::json to_json(const GuidanceRequest& r) {
  return {{"prompt", valid_utf8(r.prompt)},
          {"context", valid_utf8(r.context)},
          {"baseline_context", valid_utf8(r.baseline_context)},
          {"mode", to_string(r.mode)},
          {"gamma", r.gamma},
          {"temperature", r.temperature},
          {"top_k", r.top_k ? nlohmann::json(*r.top_k) : nlohmann::json(nullptr)},
          {"max_tokens", r.max_tokens},
          {"seed", r.seed}};
}

std::vector<TokenId> build_conditioned_input(std::string_view context, std::string_view prompt,
                                             const Vocabulary& vocab) {
  std::vector<TokenId> ids{Vocabulary::kBos, Vocabulary::kBoc};
  const auto c = vocab.encode(context);
  ids.insert(ids.end(), c.begin(), c.end());
  ids.push_back(Vocabulary::kEoc);
  const auto p = vocab.encode(prompt);
  ids.insert(ids.end(), p.begin(), p.end());
  return ids;
}

LogitVector combine_guided(std::span<const double> free, std::span<const double> ctx, double gamma) {
  CTXLM_REQUIRE(free.size() == ctx.size(), "logit vectors differ in length");
  LogitVector out(free.size());
  const double a = 1.0 - gamma;
  for (std::size_t i = 0; i < free.size(); ++i) out[i] = a * free[i] + gamma * ctx[i];
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  CTXLM_REQUIRE(!logits.empty(), "softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += p[i] = std::exp(logits[i] - mx);
  for (double& x : p) x /= sum;
  return p;
}

std::vector<double> guided_distribution(std::span<const double> free, std::span<const double> ctx, double gamma) {
  return softmax(combine_guided(free, ctx, gamma));
}

TokenId sample_token(std::span<const double> logits, double temperature, std::optional<std::size_t> top_k, Rng& rng) {
  CTXLM_REQUIRE(!logits.empty(), "cannot sample from an empty logit vector");
  CTXLM_REQUIRE(std::isfinite(temperature) && temperature > 0.0, "temperature must be > 0");
  for (double x : logits) CTXLM_REQUIRE(std::isfinite(x), "non-finite logit");

  std::vector<TokenId> cand(logits.size());
  std::iota(cand.begin(), cand.end(), TokenId{0});
  if (top_k && *top_k < cand.size()) {
    const auto k = static_cast<std::ptrdiff_t>(*top_k);
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), [&](TokenId a, TokenId b) {
      return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
    });
    cand.resize(*top_k);
    std::sort(cand.begin(), cand.end());
  }
  double mx = -INFINITY;
  for (TokenId c : cand) mx = std::max(mx, logits[c] / temperature);
  std::vector<double> w(cand.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) sum += w[i] = std::exp(logits[cand[i]] / temperature - mx);
  const double u = rng.uniform() * sum;
  double acc = 0.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    acc += w[i];
    if (u < acc) return cand[i];
  }
  // u landed in the rounding slack past the last partial sum
  for (std::size_t i = cand.size(); i-- > 0;)
    if (w[i] > 0.0) return cand[i];
  return cand.back();
}

std::vector<TopEntry> top_entries(std::span<const double> probs, std::size_t k) {
  std::vector<TokenId> ids(probs.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  k = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](TokenId a, TokenId b) { return probs[a] != probs[b] ? probs[a] > probs[b] : a < b; });
  std::vector<TopEntry> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({ids[i], probs[ids[i]]});
  return out;
}

namespace {

/// One conditioning stream: a cache-backed session plus its token history.
class Stream {
 public:
  Stream(const Checkpoint& ckpt, std::vector<TokenId> input, bool recompute)
      : session_(ckpt), ids_(std::move(input)), recompute_(recompute) {}

  LogitVector logits() {
    const std::vector<float>* l;
    if (recompute_) {
      session_.reset();
      l = &session_.feed(ids_);
    } else {
      l = &session_.feed(std::span(ids_).subspan(session_.position()));
    }
    return LogitVector(l->begin(), l->end());
  }

  void push(TokenId t) { ids_.push_back(t); }
  std::size_t size() const { return ids_.size(); }
  const std::vector<TokenId>& ids() const { return ids_; }

 private:
  InferenceSession session_;
  std::vector<TokenId> ids_;
  bool recompute_;
};

}  // namespace

GenerationResult generate(const Checkpoint& ckpt, const Vocabulary& vocab, const GuidanceRequest& req,
                          const GenerateOptions& opts) {
  req.validate();
  const LMConfig& cfg = ckpt.config;
  CTXLM_REQUIRE(vocab.size() == cfg.vocab_size, "vocabulary size " + std::to_string(vocab.size()) +
                                                     " does not match the checkpoint's " +
                                                     std::to_string(cfg.vocab_size));
  GenerationResult res;
  res.request = req;

  const bool guided = req.mode == DecodeMode::CtxGuided;
  const std::string& main_ctx = req.mode == DecodeMode::CtxFree ? std::string() : req.context;
  std::vector<Stream> streams;
  streams.reserve(2);
  streams.emplace_back(ckpt, build_conditioned_input(main_ctx, req.prompt, vocab), opts.recompute);
  if (guided) streams.emplace_back(ckpt, build_conditioned_input(req.baseline_context, req.prompt, vocab), opts.recompute);
  for (const auto& s : streams)
    CTXLM_REQUIRE(s.size() < cfg.seq_len, "context and prompt take " + std::to_string(s.size()) +
                                              " tokens; the model's context budget is " +
                                              std::to_string(cfg.seq_len - 1));

  Rng rng(req.seed);
  res.stop_reason = "max_tokens";
  for (std::size_t step = 0; step < req.max_tokens; ++step) {
    StepRecord rec;
    LogitVector combined;
    if (guided) {
      const LogitVector lc = streams[0].logits();
      const LogitVector lf = streams[1].logits();
      combined = combine_guided(lf, lc, req.gamma);
      rec.conditioned = top_entries(softmax(lc));
      rec.free = top_entries(softmax(lf));
      rec.combined = top_entries(softmax(combined));
    } else {
      combined = streams[0].logits();
      rec.combined = top_entries(softmax(combined));
      (req.mode == DecodeMode::CtxFree ? rec.free : rec.conditioned) = rec.combined;
    }
    const TokenId t = sample_token(combined, req.temperature, req.top_k, rng);
    rec.token = t;
    res.steps.push_back(std::move(rec));
    if (t == vocab.eos()) {
      res.stop_reason = "eos";
      break;
    }
    res.tokens.push_back(t);
    for (auto& s : streams) s.push(t);
    if (std::any_of(streams.begin(), streams.end(), [&](const Stream& s) { return s.size() > cfg.seq_len; })) {
      res.stop_reason = "length";
      break;
    }
  }
  res.text = vocab.decode(res.tokens, false);
  res.conditioned_stream = streams[0].ids();
  if (guided) res.free_stream = streams[1].ids();
  return res;
}

nlohmann::json to_json(const GenerationResult& r) {
  auto tops = [](const std::vector<TopEntry>& v) {
    auto a = nlohmann::json::array();
    for (const auto& e : v) a.push_back({{"id", e.id}, {"prob", e.prob}});
    return a;
  };
  auto steps = nlohmann::json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"token", s.token},
                     {"free", tops(s.free)},
                     {"conditioned", tops(s.conditioned)},
                     {"combined", tops(s.combined)}});
  return {{"request", to_json(r.request)},
          {"tokens", r.tokens},
          {"text", valid_utf8(r.text)},
          {"stop_reason", r.stop_reason},
          {"steps", std::move(steps)}};
}

}  // namespace ctxlm
