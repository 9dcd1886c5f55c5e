#include "ctxlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace ctxlm {

std::string to_string(Conditioning c) { return c == Conditioning::WithContext ? "with_context" : "empty_context"; }

// ---------------------------------------------------------------------------
// perplexity

PerplexityResult perplexity(const Checkpoint& ckpt, std::span<const TokenizedSequence> data, Conditioning c) {
  const auto& cfg = ckpt.config;
  const auto model = ckpt.model();
  PerplexityResult r;
  double total = 0.0;
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size_sequences);
  std::vector<TokenizedSequence> batch;
  for (std::size_t i = 0; i < data.size(); i += bs) {
    batch.clear();
    for (std::size_t j = i; j < std::min(data.size(), i + bs); ++j) {
      CTXLM_REQUIRE(data[j].seq_len() == cfg.seq_len, "dataset seq_len " + std::to_string(data[j].seq_len()) +
                                                          " does not match the checkpoint's " +
                                                          std::to_string(cfg.seq_len));
      batch.push_back(c == Conditioning::EmptyContext ? data[j].without_context() : data[j]);
    }
    const auto loss = model.loss(TokenBatch::from_sequences(batch));
    for (double x : loss.per_position) total += x;
    r.targets += loss.unmasked;
  }
  r.sequences = data.size();
  r.mean_nll = r.targets ? total / static_cast<double>(r.targets) : 0.0;
  r.perplexity = std::exp(r.mean_nll);
  return r;
}

PerplexityResult perplexity(const Checkpoint& ckpt, const std::string& packed_path, Conditioning c) {
  PackedReader reader(packed_path);
  CTXLM_REQUIRE(reader.vocab_size() == ckpt.config.vocab_size,
                "dataset vocab_size " + std::to_string(reader.vocab_size()) + " does not match the checkpoint's " +
                    std::to_string(ckpt.config.vocab_size));
  CTXLM_REQUIRE(reader.seq_len() == ckpt.config.seq_len, "dataset seq_len " + std::to_string(reader.seq_len()) +
                                                             " does not match the checkpoint's " +
                                                             std::to_string(ckpt.config.seq_len));
  const auto data = reader.read_all();
  return perplexity(ckpt, data, c);
}

std::vector<double> TransformerScorer::token_logprobs(std::span<const TokenId> ids) const {
  CTXLM_REQUIRE(ids.size() >= 2 && ids.size() <= max_length(), "sequence length outside [2, seq_len]");
  const Mat<float> logits = ckpt_.model().forward(ids, 1, ids.size());
  std::vector<double> out;
  out.reserve(ids.size() - 1);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index v = 0; v < row.size(); ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
    out.push_back(static_cast<double>(row[static_cast<Eigen::Index>(ids[i + 1])]) - mx - std::log(sum));
  }
  return out;
}

// ---------------------------------------------------------------------------
// multiple choice

void MCTask::validate() const {
  CTXLM_REQUIRE(!items.empty(), "task '" + name + "' has no items");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    CTXLM_REQUIRE(!it.options.empty(), "item " + std::to_string(i) + " has no options");
    CTXLM_REQUIRE(it.gold < it.options.size(), "item " + std::to_string(i) + " gold index out of range");
    for (const auto& o : it.options) CTXLM_REQUIRE(!o.empty(), "item " + std::to_string(i) + " has an empty option");
  }
}

MCTask load_mc_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open task file: " + path);
  MCTask task;
  task.name = std::filesystem::path(path).stem().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      MCItem it;
      it.question = j.at("question").get<std::string>();
      it.options = j.at("options").get<std::vector<std::string>>();
      const auto& g = j.at("gold");
      CTXLM_REQUIRE(g.is_number_integer() && g.get<std::int64_t>() >= 0, "gold must be a non-negative integer");
      it.gold = g.get<std::size_t>();
      if (j.contains("context") && !j.at("context").is_null()) it.context = j.at("context").get<std::string>();
      task.items.push_back(std::move(it));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  task.validate();
  return task;
}

std::string to_string(ShotMode m) { return m == ShotMode::ZeroShot ? "zero_shot" : "k_shot"; }
std::string to_string(ContextPolicy p) { return p == ContextPolicy::None ? "none" : "task_context"; }

ShotMode parse_shot_mode(std::string_view s) {
  if (s == "zero_shot" || s == "zero-shot" || s == "0") return ShotMode::ZeroShot;
  if (s == "k_shot" || s == "k-shot") return ShotMode::KShot;
  throw ValidationError("unknown shot mode: " + std::string(s) + " (zero_shot, k_shot)");
}

ContextPolicy parse_context_policy(std::string_view s) {
  if (s == "none") return ContextPolicy::None;
  if (s == "task_context" || s == "task-context") return ContextPolicy::TaskContext;
  throw ValidationError("unknown context policy: " + std::string(s) + " (none, task_context)");
}

std::vector<std::size_t> select_exemplars(std::size_t n_items, std::size_t item, std::size_t k, std::uint64_t seed) {
  CTXLM_REQUIRE(item < n_items, "item index out of range");
  CTXLM_REQUIRE(k < n_items, "k-shot needs more items than shots: " + std::to_string(k) + " shots, " +
                                 std::to_string(n_items) + " items");
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n_items; ++i)
    if (i != item) pool.push_back(i);
  Rng rng(mix_seed(seed, 0xE7, item));
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.uniform_int(pool.size() - i)]);
  pool.resize(k);
  return pool;
}

std::vector<TokenId> assemble_mc_prompt(const MCTask& task, std::size_t item, const MCOptions& opts,
                                        const Vocabulary& vocab) {
  const auto& it = task.items.at(item);
  std::string ctx;
  if (opts.policy == ContextPolicy::TaskContext) ctx = it.context.value_or(task.context);
  std::vector<TokenId> ids{Vocabulary::kBos, Vocabulary::kBoc};
  auto append = [&](std::string_view s) {
    const auto e = vocab.encode(s);
    ids.insert(ids.end(), e.begin(), e.end());
  };
  append(ctx);
  ids.push_back(Vocabulary::kEoc);
  if (opts.mode == ShotMode::KShot)
    for (std::size_t e : select_exemplars(task.items.size(), item, opts.shots, opts.seed)) {
      const auto& ex = task.items[e];
      append(ex.question);
      append(ex.options[ex.gold]);
      append(task.separator);
    }
  append(it.question);
  return ids;
}

MCResult mc_eval(const ScoringModel& model, const Vocabulary& vocab, const MCTask& task, const MCOptions& opts) {
  task.validate();
  CTXLM_REQUIRE(vocab.size() == model.vocab_size(), "vocabulary does not match the model");
  MCResult res;
  for (std::size_t i = 0; i < task.items.size(); ++i) {
    const auto& it = task.items[i];
    const auto prompt = assemble_mc_prompt(task, i, opts, vocab);
    MCItemResult ir;
    for (const auto& opt : it.options) {
      const auto cont = vocab.encode(opt);
      if (prompt.size() + cont.size() > model.max_length()) {
        ir.skipped = true;
        break;
      }
      std::vector<TokenId> ids = prompt;
      ids.insert(ids.end(), cont.begin(), cont.end());
      const auto lp = model.token_logprobs(ids);
      double s = 0.0;
      for (std::size_t k = prompt.size() - 1; k < lp.size(); ++k) s += lp[k];
      ir.scores.push_back(s / static_cast<double>(cont.size()));
    }
    if (ir.skipped) {
      ir.scores.clear();
      ++res.skipped;
    } else {
      ir.predicted = 0;
      for (std::size_t o = 1; o < ir.scores.size(); ++o)
        if (ir.scores[o] > ir.scores[ir.predicted]) ir.predicted = o;
      ++res.scored;
      if (ir.predicted == it.gold) ++res.correct;
    }
    res.items.push_back(std::move(ir));
  }
  res.accuracy = res.scored ? static_cast<double>(res.correct) / static_cast<double>(res.scored) : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// curves and the speedup experiment

std::optional<double> tokens_to_target(std::span<const CurvePoint> curve, double target) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i].perplexity > target) continue;
    if (i == 0) return static_cast<double>(curve[0].tokens_consumed);
    const auto& a = curve[i - 1];
    const auto& b = curve[i];
    const double t = (a.perplexity - target) / (a.perplexity - b.perplexity);
    return static_cast<double>(a.tokens_consumed) +
           t * (static_cast<double>(b.tokens_consumed) - static_cast<double>(a.tokens_consumed));
  }
  return std::nullopt;
}

ArmResult run_arm(const std::string& name, const LMConfig& cfg, std::span<const TokenizedSequence> train,
                  std::span<const TokenizedSequence> heldout, Conditioning eval, std::size_t eval_every,
                  std::size_t steps, bool track_empty) {
  CTXLM_REQUIRE(eval_every >= 1, "eval_every must be >= 1");
  CTXLM_REQUIRE(steps <= cfg.total_steps, "arm steps exceed the schedule's total_steps");
  ArmResult arm;
  arm.name = name;
  Checkpoint ck = init_model(cfg);
  auto record = [&] {
    arm.curve.push_back({ck.tokens_consumed, perplexity(ck, heldout, eval).perplexity});
    if (track_empty)
      arm.empty_curve.push_back({ck.tokens_consumed, perplexity(ck, heldout, Conditioning::EmptyContext).perplexity});
  };
  record();
  try {
    while (ck.step < steps) {
      arm.losses.push_back(train_on_stream(ck, train).loss);
      if (ck.step % eval_every == 0 || ck.step == steps) {
        record();
        if (!std::isfinite(arm.curve.back().perplexity)) throw RuntimeFailure("held-out perplexity is not finite");
      }
    }
  } catch (const RuntimeFailure& e) {
    arm.diverged = true;
    arm.failure = e.what();
  }
  arm.final_perplexity = arm.curve.back().perplexity;
  return arm;
}

ArmData speedup_data(const SpeedupConfig& cfg, bool conditioned) {
  ArmData d{{}, {}, synth_vocabulary(cfg.corpus.vocab_size, cfg.corpus.n_topics)};
  const auto docs = synth_corpus(cfg.corpus);
  SynthSpec held = cfg.corpus;
  held.n_docs = cfg.heldout_docs;
  held.seed = mix_seed(cfg.corpus.seed, 0x4E1D);
  const auto held_docs = synth_corpus(held);

  const std::size_t L = cfg.model.seq_len;
  auto packed = pack_sequences(docs, cfg.context, d.vocab, L, cfg.corpus.seed);
  ContextSpec always = cfg.context;
  always.schedule = MixtureSchedule::Uniform;
  always.mixture_probability = 1.0;
  auto held_packed = pack_sequences(held_docs, always, d.vocab, L, held.seed);
  CTXLM_REQUIRE(packed.sequences.size() == docs.size() && held_packed.sequences.size() == held_docs.size(),
                "every document must fit in one sequence with its context; raise seq_len or shorten doc_len");
  d.train = std::move(packed.sequences);
  d.heldout = std::move(held_packed.sequences);
  if (!conditioned) {
    for (auto& s : d.train) s = s.without_context();
    for (auto& s : d.heldout) s = s.without_context();
  }
  return d;
}

SpeedupResult compare_arms(ArmResult standard, ArmResult conditioned) {
  SpeedupResult r;
  r.target_perplexity = standard.final_perplexity;
  r.standard_tokens = static_cast<double>(standard.curve.back().tokens_consumed);
  // the standard arm may touch its final value earlier on a noisy curve
  if (const auto s = tokens_to_target(standard.curve, r.target_perplexity)) r.standard_tokens = *s;
  r.conditioned_tokens = tokens_to_target(conditioned.curve, r.target_perplexity);
  r.ratio = r.conditioned_tokens && r.standard_tokens > 0 ? *r.conditioned_tokens / r.standard_tokens
                                                          : std::numeric_limits<double>::infinity();
  r.conditioned_empty_perplexity = std::numeric_limits<double>::quiet_NaN();
  const auto budget = standard.curve.back().tokens_consumed;
  for (const auto& p : conditioned.empty_curve)
    if (p.tokens_consumed == budget) r.conditioned_empty_perplexity = p.perplexity;
  r.standard = std::move(standard);
  r.conditioned = std::move(conditioned);
  return r;
}

std::size_t SpeedupConfig::horizon_steps() const {
  return static_cast<std::size_t>(std::ceil(horizon * static_cast<double>(model.total_steps) - 1e-9));
}

void SpeedupConfig::validate() const {
  CTXLM_REQUIRE(horizon >= 1.0 && std::isfinite(horizon), "horizon must be >= 1");
  CTXLM_REQUIRE(model.total_steps >= 1, "total_steps must be >= 1");
  CTXLM_REQUIRE(eval_every >= 1, "eval_every must be >= 1");
  // both arms then share a curve point at the standard arm's last step
  CTXLM_REQUIRE(model.total_steps % eval_every == 0, "total_steps must be a multiple of eval_every");
  CTXLM_REQUIRE(heldout_docs >= 1, "heldout_docs must be >= 1");
  corpus.validate();
  context.validate();
}

SpeedupResult speedup_experiment(const SpeedupConfig& cfg) {
  cfg.validate();
  LMConfig model = cfg.model;
  model.seed = cfg.corpus.seed;
  model.total_steps = cfg.horizon_steps();
  const auto std_data = speedup_data(cfg, false);
  const auto cond_data = speedup_data(cfg, true);
  model.vocab_size = std_data.vocab.size();
  model.validate();
  auto standard = run_arm("standard", model, std_data.train, std_data.heldout, Conditioning::WithContext,
                          cfg.eval_every, cfg.model.total_steps);
  auto conditioned = run_arm("conditioned", model, cond_data.train, cond_data.heldout, Conditioning::WithContext,
                             cfg.eval_every, model.total_steps, true);
  return compare_arms(std::move(standard), std::move(conditioned));
}

// ---------------------------------------------------------------------------
// gamma sweep

std::vector<SweepRow> gamma_sweep(const Checkpoint& ckpt, const Vocabulary& vocab,
                                  std::span<const std::string> prompts, const std::string& context,
                                  std::span<const double> gammas, const GuidanceRequest& base) {
  std::vector<SweepRow> rows;
  for (std::size_t p = 0; p < prompts.size(); ++p)
    for (double g : gammas) {
      GuidanceRequest r = base;
      r.mode = DecodeMode::CtxGuided;
      r.prompt = prompts[p];
      r.context = context;
      r.gamma = g;
      const auto out = generate(ckpt, vocab, r);
      rows.push_back({p, prompts[p], g, r.seed, out.tokens, out.text, std::nullopt});
    }
  return rows;
}

std::size_t import_judge_scores(std::vector<SweepRow>& rows, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open judge score file: " + path);
  std::string line;
  std::size_t matched = 0, lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto p = j.at("prompt_index").get<std::size_t>();
      const auto g = j.at("gamma").get<double>();
      const auto s = j.at("score").get<double>();
      for (auto& r : rows)
        if (r.prompt_index == p && r.gamma == g) {
          r.judge_score = s;
          ++matched;
        }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return matched;
}

// ---------------------------------------------------------------------------
// reports

void EvalReport::add_curve(const std::string& arm, std::vector<CurvePoint> curve) {
  for (std::size_t i = 1; i < curve.size(); ++i)
    CTXLM_REQUIRE(curve[i].tokens_consumed > curve[i - 1].tokens_consumed,
                  "curve '" + arm + "' is not increasing in tokens_consumed");
  curves[arm] = std::move(curve);
}

std::string EvalReport::to_jsonl() const {
  std::ostringstream os;
  os << nlohmann::json{{"record", "header"}, {"run_id", run_id}, {"fingerprints", fingerprints}, {"seeds", seeds},
                       {"option_normalization", kOptionNormalization}}
            .dump()
     << '\n';
  for (const auto& [arm, pts] : curves)
    for (const auto& p : pts)
      os << nlohmann::json{{"record", "curve"}, {"arm", arm}, {"tokens_consumed", p.tokens_consumed},
                           {"ppl", p.perplexity}}
                .dump()
         << '\n';
  for (const auto& [k, v] : scalars) os << nlohmann::json{{"record", "scalar"}, {"name", k}, {"value", v}}.dump() << '\n';
  for (const auto& t : tasks)
    os << nlohmann::json{{"record", "task"},          {"task", t.task},
                         {"mode", t.mode},            {"context_policy", t.policy},
                         {"accuracy", t.result.accuracy}, {"correct", t.result.correct},
                         {"scored", t.result.scored}, {"skipped", t.result.skipped}}
              .dump()
       << '\n';
  for (const auto& r : sweep) {
    nlohmann::json j{{"record", "sweep"}, {"prompt_index", r.prompt_index}, {"gamma", r.gamma},
                     {"seed", r.seed},    {"tokens", r.tokens},             {"text", r.text}};
    j["judge_score"] = r.judge_score ? nlohmann::json(*r.judge_score) : nlohmann::json(nullptr);
    os << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  }
  return os.str();
}

std::string EvalReport::summary() const {
  std::ostringstream os;
  os << "run " << run_id << "\n";
  os << std::fixed << std::setprecision(4);
  if (!curves.empty()) {
    os << "\n" << std::left << std::setw(24) << "arm" << std::right << std::setw(16) << "tokens" << std::setw(12)
       << "final ppl" << "\n";
    for (const auto& [arm, pts] : curves)
      if (!pts.empty())
        os << std::left << std::setw(24) << arm << std::right << std::setw(16) << pts.back().tokens_consumed
           << std::setw(12) << pts.back().perplexity << "\n";
  }
  if (!scalars.empty()) {
    os << "\n";
    for (const auto& [k, v] : scalars) os << std::left << std::setw(40) << k << std::right << v << "\n";
  }
  if (!tasks.empty()) {
    os << "\n" << std::left << std::setw(20) << "task" << std::setw(12) << "mode" << std::setw(14) << "context"
       << std::right << std::setw(10) << "accuracy" << std::setw(8) << "scored" << std::setw(8) << "skipped"
       << "\n";
    for (const auto& t : tasks)
      os << std::left << std::setw(20) << t.task << std::setw(12) << t.mode << std::setw(14) << t.policy
         << std::right << std::setw(10) << t.result.accuracy << std::setw(8) << t.result.scored << std::setw(8)
         << t.result.skipped << "\n";
    os << "option scores: " << kOptionNormalization << "\n";
  }
  if (!sweep.empty()) {
    os << "\n" << std::right << std::setw(6) << "prompt" << std::setw(8) << "gamma" << std::setw(8) << "score"
       << "  text\n";
    for (const auto& r : sweep) {
      os << std::setw(6) << r.prompt_index << std::setw(8) << std::setprecision(2) << r.gamma << std::setw(8);
      if (r.judge_score)
        os << *r.judge_score;
      else
        os << "-";
      os << "  " << r.text << "\n";
    }
  }
  return os.str();
}

std::string EvalReport::curves_csv() const {
  std::ostringstream os;
  os << "tokens_consumed,ppl,arm\n" << std::setprecision(10);
  for (const auto& [arm, pts] : curves)
    for (const auto& p : pts) os << p.tokens_consumed << ',' << p.perplexity << ',' << arm << '\n';
  return os.str();
}

void EvalReport::write(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& body) {
    std::ofstream out(std::filesystem::path(dir) / name, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write " + (std::filesystem::path(dir) / name).string());
    out << body;
  };
  put("report.jsonl", to_jsonl());
  put("summary.txt", summary());
  put("curves.csv", curves_csv());
}

}  // namespace ctxlm
