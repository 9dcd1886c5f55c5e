#include "ctxlm/run_config.hpp"

#include <fstream>

#include "ctxlm/hash.hpp"

namespace ctxlm {

namespace {

void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& where) {
  CTXLM_REQUIRE(j.is_object(), where + " must be an object");
  for (const auto& [k, _] : j.items())
    CTXLM_REQUIRE(known.contains(k), "unknown key '" + k + "' in " + where);
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + "." + key + " has the wrong type");
  }
}

}  // namespace

nlohmann::json to_json(const ContextSpec& c) {
  auto fields = nlohmann::json::array();
  for (auto f : c.fields_included) fields.push_back(to_string(f));
  return {{"fields_included", fields},
          {"rendering_mode", to_string(c.rendering_mode)},
          {"mixture_probability", c.mixture_probability},
          {"schedule", to_string(c.schedule)},
          {"cooldown_fraction", c.cooldown_fraction},
          {"max_context_tokens", c.max_context_tokens}};
}

ContextSpec context_spec_from_json(const nlohmann::json& j, const ContextSpec& base) {
  reject_unknown(j, to_json(base), "context");
  ContextSpec c = base;
  if (j.contains("fields_included")) {
    const auto& f = j.at("fields_included");
    if (f.is_string()) {
      c.fields_included = parse_field_list(f.get<std::string>());
    } else {
      CTXLM_REQUIRE(f.is_array(), "context.fields_included must be a list or a comma-separated string");
      c.fields_included.clear();
      for (const auto& x : f) {
        CTXLM_REQUIRE(x.is_string(), "context.fields_included entries must be strings");
        c.fields_included.push_back(parse_context_field(x.get<std::string>()));
      }
    }
  }
  std::string s;
  if (j.contains("rendering_mode")) {
    take(j, "rendering_mode", s, "context");
    c.rendering_mode = parse_rendering_mode(s);
  }
  if (j.contains("schedule")) {
    take(j, "schedule", s, "context");
    c.schedule = parse_mixture_schedule(s);
  }
  take(j, "mixture_probability", c.mixture_probability, "context");
  take(j, "cooldown_fraction", c.cooldown_fraction, "context");
  take(j, "max_context_tokens", c.max_context_tokens, "context");
  c.validate();
  return c;
}

namespace {

nlohmann::json paths_json(const RunPaths& p) {
  return {{"corpus", p.corpus},         {"dataset", p.dataset},         {"vocab", p.vocab},
          {"checkpoint", p.checkpoint}, {"checkpoints", p.checkpoints}, {"reports", p.reports}};
}

nlohmann::json decode_json(const DecodeDefaults& d) {
  return {{"gamma", d.gamma},
          {"temperature", d.temperature},
          {"top_k", d.top_k ? nlohmann::json(*d.top_k) : nlohmann::json(nullptr)},
          {"max_tokens", d.max_tokens}};
}

nlohmann::json synth_json(const SynthSpec& s) {
  return {{"n_docs", s.n_docs},
          {"n_topics", s.n_topics},
          {"doc_len", s.doc_len},
          {"n_words", s.vocab_size},
          {"informativeness", s.informativeness},
          {"block_mass", s.block_mass}};
}

}  // namespace

nlohmann::json to_json(const RunConfig& c) {
  auto model = to_json(c.model);
  model.erase("seed");
  return {{"seed", c.seed},
          {"paths", paths_json(c.paths)},
          {"model", model},
          {"context", to_json(c.context)},
          {"decode", decode_json(c.decode)},
          {"synth", synth_json(c.synth)}};
}

RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base) {
  reject_unknown(j, to_json(base), "config");
  RunConfig c = base;
  if (j.contains("seed")) {
    CTXLM_REQUIRE(j.at("seed").is_number_unsigned(), "seed must be a non-negative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    reject_unknown(p, paths_json(c.paths), "paths");
    take(p, "corpus", c.paths.corpus, "paths");
    take(p, "dataset", c.paths.dataset, "paths");
    take(p, "vocab", c.paths.vocab, "paths");
    take(p, "checkpoint", c.paths.checkpoint, "paths");
    take(p, "checkpoints", c.paths.checkpoints, "paths");
    take(p, "reports", c.paths.reports, "paths");
  }
  if (j.contains("model")) {
    CTXLM_REQUIRE(!j.at("model").contains("seed"), "model.seed is not configurable; set the top-level seed");
    c.model = lm_config_from_json(j.at("model"), c.model);
  }
  if (j.contains("context")) c.context = context_spec_from_json(j.at("context"), c.context);
  if (j.contains("decode")) {
    const auto& d = j.at("decode");
    reject_unknown(d, decode_json(c.decode), "decode");
    take(d, "gamma", c.decode.gamma, "decode");
    take(d, "temperature", c.decode.temperature, "decode");
    take(d, "max_tokens", c.decode.max_tokens, "decode");
    if (d.contains("top_k")) {
      if (d.at("top_k").is_null()) {
        c.decode.top_k.reset();
      } else {
        std::size_t k = 0;
        take(d, "top_k", k, "decode");
        c.decode.top_k = k;
      }
    }
  }
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    reject_unknown(s, synth_json(c.synth), "synth");
    take(s, "n_docs", c.synth.n_docs, "synth");
    take(s, "n_topics", c.synth.n_topics, "synth");
    take(s, "doc_len", c.synth.doc_len, "synth");
    take(s, "n_words", c.synth.vocab_size, "synth");
    take(s, "informativeness", c.synth.informativeness, "synth");
    take(s, "block_mass", c.synth.block_mass, "synth");
  }
  return c;
}

void RunConfig::resolve() {
  model.seed = seed;
  synth.seed = seed;
  context.validate();
  CTXLM_REQUIRE(std::isfinite(decode.gamma), "decode.gamma must be finite");
  CTXLM_REQUIRE(decode.temperature > 0.0, "decode.temperature must be > 0");
  CTXLM_REQUIRE(!decode.top_k || *decode.top_k >= 1, "decode.top_k must be >= 1");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string config_fingerprint(const nlohmann::json& j) { return fingerprint(j.dump()); }

}  // namespace ctxlm
