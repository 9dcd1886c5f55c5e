// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Each check compares the library against an oracle
// written here, not against another library path.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ctxlm/decode.hpp"
#include "ctxlm/eval.hpp"
#include "ctxlm/trainer.hpp"
#include "test_util.hpp"

using namespace ctxlm;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass;
  std::string detail;
};

std::vector<double> random_logits(Rng& rng, std::size_t n, double sd = 3.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0, sd);
  return v;
}

// 1. combine_guided at gamma 0 and 1 reproduces its inputs exactly.
Outcome guidance_boundaries() {
  Rng rng(1);
  const auto t0 = Clock::now();
  std::size_t mismatches = 0;
  for (int pair = 0; pair < 1000; ++pair) {
    const auto free = random_logits(rng, 64), ctx = random_logits(rng, 64);
    const auto g0 = combine_guided(free, ctx, 0.0), g1 = combine_guided(free, ctx, 1.0);
    for (std::size_t i = 0; i < 64; ++i) mismatches += (g0[i] != free[i]) + (g1[i] != ctx[i]);
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "1000 pairs, " << mismatches << " inexact entries, " << secs << " s";
  return {mismatches == 0 && secs < 1.0, os.str()};
}

// 2. softmax(combined) == normalized P_free^(1-g) P_ctx^g, in long double.
Outcome geometric_mixture() {
  Rng rng(2);
  double worst = 0;
  for (double g : {-2.0, 0.5, 1.5, 4.0})
    for (int pair = 0; pair < 100; ++pair) {
      const auto free = random_logits(rng, 64), ctx = random_logits(rng, 64);
      const auto pf = testutil::softmax_ld(free), pc = testutil::softmax_ld(ctx);
      std::vector<long double> mix(64);
      long double z = 0;
      for (std::size_t i = 0; i < 64; ++i)
        z += mix[i] = std::pow(static_cast<long double>(pf[i]), 1 - g) * std::pow(static_cast<long double>(pc[i]), g);
      const auto got = softmax(combine_guided(free, ctx, g));
      for (std::size_t i = 0; i < 64; ++i) worst = std::max(worst, std::abs(got[i] - static_cast<double>(mix[i] / z)));
    }
  std::ostringstream os;
  os << "max |diff| " << worst << " over 400 pairs";
  return {worst < 1e-6, os.str()};
}

// 3. Context, frame and pad targets contribute exactly zero; the scalar
// matches a long-double softmax oracle over text targets.
Outcome loss_masking() {
  SynthSpec ss;
  ss.n_docs = 40;
  ss.doc_len = 18;
  ss.n_topics = 4;
  ss.vocab_size = 64;
  ss.seed = 3;
  const auto vocab = synth_vocabulary(ss.vocab_size, ss.n_topics);
  ContextSpec spec;
  spec.mixture_probability = 0.7;
  const auto seqs = pack_sequences(synth_corpus(ss), spec, vocab, 32, 3).sequences;
  LMConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_size = 32;
  cfg.n_heads = 4;
  cfg.ffn_hidden = 48;
  cfg.seq_len = 32;
  cfg.vocab_size = vocab.size();
  cfg.init_std = 0.2;
  const auto ck = init_model(cfg);
  const auto model = ck.model();
  std::size_t nonzero_masked = 0, batches = 0, checked_zero = 0;
  double worst = 0;
  for (std::size_t start = 0; start + 4 <= seqs.size(); start += 4, ++batches) {
    const std::span<const TokenizedSequence> chunk(seqs.data() + start, 4);
    const auto b = TokenBatch::from_sequences(chunk);
    const auto r = model.loss(b);
    const auto logits = model.forward(b.tokens, b.batch, b.length);
    // oracle mask from the layout alone: a target counts iff it lies
    // after <eoc> and is not <pad>
    std::vector<TokenId> targets(b.batch * b.length, 0);
    std::vector<std::uint8_t> mask(b.batch * b.length, 0);
    for (std::size_t s = 0; s < b.batch; ++s) {
      const auto* t = &b.tokens[s * b.length];
      bool after_eoc = false;
      for (std::size_t i = 0; i + 1 < b.length; ++i) {
        if (t[i] == Vocabulary::kEoc) after_eoc = true;
        targets[s * b.length + i] = t[i + 1];
        mask[s * b.length + i] = after_eoc && t[i + 1] != Vocabulary::kPad;
      }
    }
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!mask[i]) {
        ++checked_zero;
        nonzero_masked += r.per_position[i] != 0.0;
      }
    worst = std::max(worst, std::abs(r.loss - testutil::brute_force_masked_nll(logits, targets, mask)));
  }
  std::ostringstream os;
  os << batches << " batches, " << nonzero_masked << "/" << checked_zero << " masked targets nonzero, scalar |diff| "
     << worst;
  return {batches > 0 && nonzero_masked == 0 && worst < 1e-6, os.str()};
}

// 4. Empty-context share at p = 0.9 over 10,000 documents; cooldown flips
// exactly once, at 90% progress.
Outcome mixture_statistics() {
  SynthSpec ss;
  ss.n_docs = 10000;
  ss.doc_len = 8;
  ss.n_topics = 4;
  ss.vocab_size = 32;
  ss.seed = 4;
  const auto docs = synth_corpus(ss);
  const auto vocab = synth_vocabulary(ss.vocab_size, ss.n_topics);
  ContextSpec spec;
  spec.mixture_probability = 0.9;
  const auto path = testutil::temp_file("acceptance_mix.ctxp");
  const auto stats = pack_dataset(docs, spec, vocab, 32, 4, path);
  const double frac = stats.empty_context_fraction();

  ContextSpec cool = spec;
  cool.schedule = MixtureSchedule::Cooldown;
  cool.cooldown_fraction = 0.1;
  int flips = 0;
  double flip_at = -1;
  bool prev = assign_context_mode(0, cool, 4, 0.0);
  for (int k = 1; k <= 100000; ++k) {
    const double progress = k / 100000.0;
    const bool cur = assign_context_mode(static_cast<std::uint64_t>(k), cool, 4, progress);
    if (cur != prev) {
      ++flips;
      flip_at = progress;
    }
    prev = cur;
  }
  std::ostringstream os;
  os << "empty-context fraction " << frac << " over " << stats.n_docs << " docs; cooldown flips " << flips << " at "
     << flip_at;
  return {stats.n_docs == 10000 && std::abs(frac - 0.1) <= 0.01 && flips == 1 && std::abs(flip_at - 0.9) < 1e-9,
          os.str()};
}

// 5. Analytic vs central-difference gradients on the toy model.
Outcome gradient_correctness() {
  LMConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_size = 16;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 24;
  cfg.seq_len = 12;
  cfg.vocab_size = 40;
  cfg.seed = 5;
  const auto ck = init_model(cfg);
  Rng rng(5);
  std::vector<TokenId> ids(24);
  for (auto& t : ids) t = static_cast<TokenId>(rng.uniform_int(40));
  auto b = TokenBatch::from_ids(ids, 2, 12);
  for (std::size_t i = 0; i < b.loss_mask.size(); ++i) b.loss_mask[i] = i % 5 != 2;
  const auto t0 = Clock::now();
  const auto rep = testutil::gradient_check(cfg, ck.params.cast<double>(), b, 200, 55);
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << rep.checked << " parameters, max rel err " << rep.max_rel_error << ", " << secs << " s";
  return {rep.checked >= 100 && rep.max_rel_error < 1e-3 && secs < 120, os.str()};
}

// 6 and 7 share the training runs.
struct SpeedupRuns {
  std::vector<SpeedupResult> informative, control;
  double max_pair_seconds = 0;
};

SpeedupConfig speedup_config(std::uint64_t seed, double informativeness) {
  SpeedupConfig c;
  c.model.n_layers = 4;
  c.model.hidden_size = 256;
  c.model.n_heads = 4;
  c.model.ffn_hidden = 688;
  c.model.seq_len = 64;
  c.model.batch_size_sequences = 16;
  c.model.total_steps = 50;
  c.model.warmup_steps = 5;
  c.model.max_lr = 3e-4;
  c.model.min_lr = 3e-4;
  c.corpus.doc_len = 56;
  c.corpus.n_topics = 8;
  c.corpus.vocab_size = 256;
  c.corpus.block_mass = 0.9;
  c.corpus.informativeness = informativeness;
  c.corpus.seed = seed;
  c.context.fields_included = {ContextField::Url};
  c.context.rendering_mode = RenderingMode::Raw;
  c.context.mixture_probability = 0.9;
  c.horizon = 1.25;
  c.eval_every = 5;
  c.heldout_docs = 200;
  c.corpus.n_docs = c.horizon_steps() * c.model.batch_size_sequences;
  return c;
}

SpeedupRuns run_speedups() {
  SpeedupRuns r;
  for (std::uint64_t seed = 0; seed < 3; ++seed)
    for (double inf : {1.0, 0.0}) {
      const auto t0 = Clock::now();
      auto res = speedup_experiment(speedup_config(seed, inf));
      r.max_pair_seconds = std::max(r.max_pair_seconds, seconds_since(t0));
      std::printf("  seed %llu informativeness %.1f: standard ppl %.3f, ratio %.4f, empty-context ppl %.3f\n",
                  static_cast<unsigned long long>(seed), inf, res.target_perplexity, res.ratio,
                  res.conditioned_empty_perplexity);
      std::fflush(stdout);
      (inf == 1.0 ? r.informative : r.control).push_back(std::move(res));
    }
  return r;
}

Outcome directional_speedup(const SpeedupRuns& r) {
  bool ok = r.max_pair_seconds <= 30 * 60;
  std::ostringstream os;
  os << "informative ratios";
  for (const auto& s : r.informative) {
    os << " " << s.ratio;
    ok = ok && !s.standard.diverged && !s.conditioned.diverged && s.ratio <= 0.95;
  }
  os << "; control ratios";
  for (const auto& s : r.control) {
    os << " " << s.ratio;
    ok = ok && !s.standard.diverged && !s.conditioned.diverged && s.ratio >= 0.98 && s.ratio <= 1.02;
  }
  os << "; slowest pair " << r.max_pair_seconds << " s";
  return {ok && r.informative.size() == 3 && r.control.size() == 3, os.str()};
}

Outcome context_free_usability(const SpeedupRuns& r) {
  bool ok = !r.informative.empty();
  std::ostringstream os;
  os << "empty-context / standard ppl";
  for (const auto& s : r.informative) {
    const double rel = s.conditioned_empty_perplexity / s.target_perplexity;
    os << " " << rel;
    ok = ok && std::isfinite(rel) && std::abs(rel - 1.0) <= 0.05;
  }
  return {ok, os.str()};
}

// 8. MC scoring against an enumerated unigram oracle, plus a task where
// the matched context changes the oracle's choice.
class UnigramModel : public ScoringModel {
 public:
  UnigramModel(std::vector<double> plain, std::vector<double> triggered = {}, TokenId trigger = 0)
      : plain_(std::move(plain)), trig_(std::move(triggered)), trigger_(trigger) {}
  std::size_t vocab_size() const override { return plain_.size(); }
  std::size_t max_length() const override { return 4096; }
  std::vector<double> token_logprobs(std::span<const TokenId> ids) const override {
    bool in_frame = false, hit = false;
    for (TokenId t : ids) {
      if (t == Vocabulary::kBoc) in_frame = true;
      else if (t == Vocabulary::kEoc) break;
      else if (in_frame && t == trigger_ && !trig_.empty()) hit = true;
    }
    const auto& p = hit ? trig_ : plain_;
    std::vector<double> out;
    for (std::size_t i = 1; i < ids.size(); ++i) out.push_back(std::log(p[ids[i]]));
    return out;
  }

 private:
  std::vector<double> plain_, trig_;
  TokenId trigger_;
};

std::vector<double> random_distribution(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  double z = 0;
  for (auto& x : p) z += x = 0.05 + rng.uniform();
  for (auto& x : p) x /= z;
  return p;
}

std::size_t oracle_choice(const std::vector<double>& p, const Vocabulary& v, const MCItem& it) {
  std::size_t best = 0;
  long double best_s = -INFINITY;
  for (std::size_t o = 0; o < it.options.size(); ++o) {
    const auto ids = v.encode(it.options[o]);
    long double s = 0;
    for (auto id : ids) s += std::log(static_cast<long double>(p[id]));
    s /= static_cast<long double>(ids.size());
    if (s > best_s) {
      best_s = s;
      best = o;
    }
  }
  return best;
}

Outcome mc_oracle() {
  const Vocabulary v({" cat", " dog", " sun", " rain", " tree", " stone", "Topic: ", "Pets"});
  const std::vector<std::string> words = {" cat", " dog", " sun", " rain", " tree", " stone", "ab", "xyz"};
  Rng rng(8);
  const auto p = random_distribution(v.size(), rng);
  MCTask task;
  task.name = "toy";
  for (int i = 0; i < 20; ++i) {
    MCItem it;
    it.question = "Q" + std::to_string(i) + ":";
    for (int o = 0; o < 2; ++o) {
      std::string opt;
      for (std::size_t k = 0, n = 1 + rng.uniform_int(3); k < n; ++k) opt += words[rng.uniform_int(words.size())];
      it.options.push_back(opt);
    }
    it.gold = rng.uniform_int(2);
    task.items.push_back(it);
  }
  const auto r = mc_eval(UnigramModel(p), v, task, {});
  std::size_t mismatches = 0, correct = 0;
  for (std::size_t i = 0; i < task.items.size(); ++i) {
    const auto expect = oracle_choice(p, v, task.items[i]);
    mismatches += r.items[i].predicted != expect;
    correct += expect == task.items[i].gold;
  }
  const bool acc_ok = r.scored == 20 && r.correct == correct;

  // context flip: the triggered table prefers " dog"; the plain one " cat"
  const TokenId cat = v.encode(" cat")[0], dog = v.encode(" dog")[0], pets = v.encode("Pets")[0];
  auto plain = p, trig = p;
  plain[cat] = 0.3, plain[dog] = 0.01;
  trig[cat] = 0.01, trig[dog] = 0.3;
  const UnigramModel cm(plain, trig, pets);
  MCTask flip;
  flip.items = {{"Which pet?", {" cat", " dog"}, 1, std::string("Topic: Pets")}};
  MCOptions none, with;
  with.policy = ContextPolicy::TaskContext;
  const auto a = mc_eval(cm, v, flip, none).items[0].predicted;
  const auto b = mc_eval(cm, v, flip, with).items[0].predicted;
  const auto oracle_a = oracle_choice(plain, v, flip.items[0]), oracle_b = oracle_choice(trig, v, flip.items[0]);
  const bool flipped = oracle_a != oracle_b && a == oracle_a && b == oracle_b;
  std::ostringstream os;
  os << mismatches << " mismatches over 20 items, accuracy " << r.accuracy << "; context flip "
     << (flipped ? "observed" : "missing");
  return {mismatches == 0 && acc_ok && flipped, os.str()};
}

// 9. Packed file round trip and checkpoint resume over 20 steps.
Outcome format_round_trips() {
  SynthSpec ss;
  ss.n_docs = 60;
  ss.doc_len = 30;
  ss.n_topics = 4;
  ss.vocab_size = 64;
  ss.seed = 9;
  const auto vocab = synth_vocabulary(ss.vocab_size, ss.n_topics);
  ContextSpec spec;
  const auto path = testutil::temp_file("acceptance_rt.ctxp");
  const auto mem = pack_sequences(synth_corpus(ss), spec, vocab, 24, 9).sequences;
  pack_dataset(synth_corpus(ss), spec, vocab, 24, 9, path);
  const auto loaded = PackedReader(path).read_all();
  const bool pack_ok = loaded == mem;

  LMConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_size = 32;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 48;
  cfg.seq_len = 24;
  cfg.vocab_size = vocab.size();
  cfg.batch_size_sequences = 4;
  cfg.warmup_steps = 3;
  cfg.total_steps = 20;
  cfg.seed = 9;
  auto unbroken = init_model(cfg);
  std::vector<double> a, b;
  for (int s = 0; s < 20; ++s) a.push_back(train_on_stream(unbroken, loaded).loss);
  auto first = init_model(cfg);
  for (int s = 0; s < 10; ++s) b.push_back(train_on_stream(first, loaded).loss);
  const auto ck_path = testutil::temp_file("acceptance_resume.ctxk");
  save_checkpoint(first, ck_path);
  auto resumed = load_checkpoint(ck_path);
  for (int s = 0; s < 10; ++s) b.push_back(train_on_stream(resumed, loaded).loss);
  // training is deterministic in a single thread, so the documented
  // tolerance is zero
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += a[i] != b[i];
  std::ostringstream os;
  os << "pack->load " << (pack_ok ? "bit-exact" : "DIFFERS") << " (" << mem.size() << " sequences); resume: "
     << differ << "/20 losses differ";
  return {pack_ok && differ == 0, os.str()};
}

// 10. generate is byte-identical across 5 runs for every mode and gamma.
Outcome determinism() {
  const auto vocab = synth_vocabulary(64, 4);
  LMConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_size = 32;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 48;
  cfg.seq_len = 48;
  cfg.vocab_size = vocab.size();
  cfg.init_std = 0.3;
  cfg.seed = 10;
  const auto ck = init_model(cfg);
  std::size_t variants = 0, differ = 0;
  for (auto mode : {DecodeMode::CtxFree, DecodeMode::CtxConditioned, DecodeMode::CtxGuided})
    for (double g : {-2.0, 1.5, 4.0}) {
      GuidanceRequest r;
      r.prompt = " w1 w2";
      r.context = "www.topic1.com";
      r.mode = mode;
      r.gamma = g;
      r.max_tokens = 24;
      r.seed = 1234;
      const std::string first = to_json(generate(ck, vocab, r)).dump();
      for (int run = 1; run < 5; ++run) differ += to_json(generate(ck, vocab, r)).dump() != first;
      ++variants;
    }
  std::ostringstream os;
  os << variants << " (mode, gamma) variants x 5 runs, " << differ << " differing outputs";
  return {differ == 0, os.str()};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };
  report(1, "guidance boundary identities", guidance_boundaries);
  report(2, "geometric-mixture equivalence", geometric_mixture);
  report(3, "loss masking", loss_masking);
  report(4, "mixture statistics", mixture_statistics);
  report(5, "gradient correctness", gradient_correctness);
  SpeedupRuns runs;
  std::string speedup_error;
  try {
    runs = run_speedups();
  } catch (const std::exception& e) {
    speedup_error = e.what();
  }
  auto guarded = [&](Outcome (*f)(const SpeedupRuns&)) {
    return [&, f]() -> Outcome {
      if (!speedup_error.empty()) return {false, "exception: " + speedup_error};
      return f(runs);
    };
  };
  report(6, "directional speedup", guarded(directional_speedup));
  report(7, "context-free usability", guarded(context_free_usability));
  report(8, "mc-eval oracle equivalence", mc_oracle);
  report(9, "format round-trips", format_round_trips);
  report(10, "determinism", determinism);
  std::printf("%d/10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
