#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "ctxlm/eval.hpp"
#include "test_util.hpp"

using namespace ctxlm;

namespace {

/// Next-token distribution that ignores the prefix. Log-probabilities are
/// taken from a fixed table and optionally scaled.
class UnigramModel : public ScoringModel {
 public:
  UnigramModel(std::vector<double> probs, double scale = 1.0) : p_(std::move(probs)), scale_(scale) {}
  std::size_t vocab_size() const override { return p_.size(); }
  std::size_t max_length() const override { return max_len_; }
  std::vector<double> token_logprobs(std::span<const TokenId> ids) const override {
    std::vector<double> out;
    for (std::size_t i = 1; i < ids.size(); ++i) out.push_back(scale_ * std::log(p_[ids[i]]));
    return out;
  }
  std::size_t max_len_ = 1000;

 private:
  std::vector<double> p_;
  double scale_;
};

/// Unigram table switched by whether `trigger` occurs inside the context
/// frame (between <boc> and <eoc>).
class ContextUnigramModel : public ScoringModel {
 public:
  ContextUnigramModel(std::vector<double> plain, std::vector<double> triggered, TokenId trigger)
      : plain_(std::move(plain)), trig_(std::move(triggered)), trigger_(trigger) {}
  std::size_t vocab_size() const override { return plain_.size(); }
  std::size_t max_length() const override { return 1000; }
  std::vector<double> token_logprobs(std::span<const TokenId> ids) const override {
    bool in_frame = false, hit = false;
    for (TokenId t : ids) {
      if (t == Vocabulary::kBoc) in_frame = true;
      else if (t == Vocabulary::kEoc) break;
      else if (in_frame && t == trigger_) hit = true;
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

std::vector<double> random_distribution(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> p(n);
  double z = 0;
  for (auto& x : p) z += x = 0.05 + rng.uniform();
  for (auto& x : p) x /= z;
  return p;
}

/// Hand oracle: mean log-probability of the option's own ids.
std::size_t brute_force_choice(const std::vector<double>& p, const Vocabulary& v, const MCItem& it) {
  std::size_t best = 0;
  double best_s = -INFINITY;
  for (std::size_t o = 0; o < it.options.size(); ++o) {
    const auto ids = v.encode(it.options[o]);
    long double s = 0;
    for (auto id : ids) s += std::log(static_cast<long double>(p[id]));
    const double m = static_cast<double>(s / ids.size());
    if (m > best_s) {
      best_s = m;
      best = o;
    }
  }
  return best;
}

MCTask random_task(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> words = {" cat", " dog", " sun", " rain", " tree", " stone", "ab", "xyz"};
  Rng rng(seed);
  MCTask t;
  t.name = "toy";
  for (std::size_t i = 0; i < n; ++i) {
    MCItem it;
    it.question = "Q" + std::to_string(i) + ":";
    for (int o = 0; o < 2; ++o) {
      std::string opt;
      const auto len = 1 + rng.uniform_int(3);
      for (std::size_t k = 0; k < len; ++k) opt += words[rng.uniform_int(words.size())];
      it.options.push_back(opt);
    }
    it.gold = rng.uniform_int(2);
    t.items.push_back(std::move(it));
  }
  return t;
}

LMConfig small_config(std::size_t vocab) {
  LMConfig c;
  c.n_layers = 1;
  c.hidden_size = 16;
  c.n_heads = 2;
  c.ffn_hidden = 24;
  c.seq_len = 16;
  c.vocab_size = vocab;
  c.batch_size_sequences = 3;
  c.total_steps = 100;
  c.warmup_steps = 2;
  return c;
}

std::vector<TokenizedSequence> some_sequences(const Vocabulary& v, std::size_t seq_len, std::size_t n) {
  SynthSpec s;
  s.n_docs = n;
  s.doc_len = 8;
  s.vocab_size = 64;
  s.n_topics = 4;
  const auto docs = synth_corpus(s);
  ContextSpec spec;
  spec.rendering_mode = RenderingMode::Raw;
  return pack_sequences(docs, spec, v, seq_len, 1).sequences;
}

}  // namespace

// --- perplexity -------------------------------------------------------------

TEST(Perplexity, UniformModelGivesVocabSize) {
  const auto v = synth_vocabulary(64, 4);
  auto ck = init_model(small_config(v.size()));
  for (std::size_t t = 0; t < ck.params.size(); ++t) ck.params[t].setZero();
  const auto data = some_sequences(v, 16, 10);
  for (auto c : {Conditioning::WithContext, Conditioning::EmptyContext})
    EXPECT_NEAR(perplexity(ck, data, c).perplexity, static_cast<double>(v.size()), 1e-6 * v.size());
}

TEST(Perplexity, EqualsExpOfMaskedLossOnOneBatch) {
  const auto v = synth_vocabulary(64, 4);
  auto cfg = small_config(v.size());
  cfg.batch_size_sequences = 8;
  const auto ck = init_model(cfg);
  const auto data = some_sequences(v, 16, 8);
  ASSERT_EQ(data.size(), 8u);
  const auto batch = TokenBatch::from_sequences(data);
  const double loss = ck.model().loss(batch).loss;
  EXPECT_NEAR(perplexity(ck, data, Conditioning::WithContext).perplexity, std::exp(loss), 1e-6);
}

TEST(Perplexity, ArmsScoreTheSameTargets) {
  const auto v = synth_vocabulary(64, 4);
  const auto ck = init_model(small_config(v.size()));
  const auto data = some_sequences(v, 16, 20);
  const auto a = perplexity(ck, data, Conditioning::WithContext);
  const auto b = perplexity(ck, data, Conditioning::EmptyContext);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_GT(a.targets, 0u);
  EXPECT_NE(a.perplexity, b.perplexity);
}

TEST(Perplexity, PackedFileChecksShape) {
  const auto v = synth_vocabulary(64, 4);
  const auto ck = init_model(small_config(v.size()));
  const auto data = some_sequences(v, 16, 5);
  const auto path = testutil::temp_file("ppl.ctxp");
  {
    PackedWriter w(path, static_cast<std::uint32_t>(v.size()), 16);
    for (const auto& s : data) w.write(s);
    w.close();
  }
  EXPECT_DOUBLE_EQ(perplexity(ck, path, Conditioning::WithContext).perplexity,
                   perplexity(ck, data, Conditioning::WithContext).perplexity);
  {
    PackedWriter w(path, static_cast<std::uint32_t>(v.size() + 1), 16);
    for (const auto& s : data) w.write(s);
    w.close();
  }
  EXPECT_THROW(perplexity(ck, path, Conditioning::WithContext), ValidationError);
  const auto longer = some_sequences(v, 20, 2);
  EXPECT_THROW(perplexity(ck, longer, Conditioning::WithContext), ValidationError);
}

TEST(TransformerScorer, MatchesMaskedLossPerPosition) {
  const auto v = synth_vocabulary(64, 4);
  const auto ck = init_model(small_config(v.size()));
  const std::vector<TokenId> ids{0, 1, 2, 270, 280, 300, 271};
  const auto lp = TransformerScorer(ck).token_logprobs(ids);
  const auto loss = ck.model().loss(TokenBatch::from_ids(ids, 1, ids.size()));
  ASSERT_EQ(lp.size(), ids.size() - 1);
  for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(-lp[i], loss.per_position[i], 1e-6);
}

// --- multiple choice --------------------------------------------------------

TEST(McEval, UnigramMatchesBruteForceRanking) {
  const Vocabulary v({" cat", " dog", " sun", " rain", " tree", " stone", "ab", "xyz"});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = random_distribution(v.size(), seed);
    const UnigramModel m(p);
    const auto task = random_task(20, seed + 100);
    const auto r = mc_eval(m, v, task, {});
    std::size_t correct = 0;
    for (std::size_t i = 0; i < task.items.size(); ++i) {
      const auto expect = brute_force_choice(p, v, task.items[i]);
      EXPECT_EQ(r.items[i].predicted, expect) << "item " << i;
      correct += expect == task.items[i].gold;
    }
    EXPECT_EQ(r.correct, correct);
    EXPECT_EQ(r.scored, 20u);
    EXPECT_DOUBLE_EQ(r.accuracy, correct / 20.0);
  }
}

TEST(McEval, ScalingLogLikelihoodsKeepsChoices) {
  const Vocabulary v({" cat", " dog", " sun", " rain", " tree", " stone", "ab", "xyz"});
  const auto p = random_distribution(v.size(), 9);
  const auto task = random_task(20, 5);
  const auto a = mc_eval(UnigramModel(p), v, task, {});
  const auto b = mc_eval(UnigramModel(p, 3.7), v, task, {});
  for (std::size_t i = 0; i < task.items.size(); ++i) EXPECT_EQ(a.items[i].predicted, b.items[i].predicted);
}

TEST(McEval, SingleOptionIsAlwaysRight) {
  const Vocabulary v({" cat", " dog"});
  MCTask t;
  t.items = {{"q", {" cat"}, 0, std::nullopt}, {"r", {" dog dog"}, 0, std::nullopt}};
  EXPECT_DOUBLE_EQ(mc_eval(UnigramModel(random_distribution(v.size(), 1)), v, t, {}).accuracy, 1.0);
}

TEST(McEval, TiesGoToLowestIndex) {
  const Vocabulary v({" cat", " dog"});
  std::vector<double> p(v.size(), 1.0 / v.size());
  MCTask t;
  t.items = {{"q", {" cat", " dog"}, 1, std::nullopt}};
  const auto r = mc_eval(UnigramModel(p), v, t, {});
  EXPECT_EQ(r.items[0].predicted, 0u);
  EXPECT_EQ(r.correct, 0u);
}

TEST(McEval, MatchedContextFlipsTheChoice) {
  const Vocabulary v({" cat", " dog", "Topic: ", "Pets"});
  const TokenId cat = v.encode(" cat")[0], dog = v.encode(" dog")[0], pets = v.encode("Pets")[0];
  auto plain = random_distribution(v.size(), 2), trig = plain;
  plain[cat] = 0.02, plain[dog] = 0.05;
  trig[cat] = 0.05, trig[dog] = 0.02;
  const ContextUnigramModel m(plain, trig, pets);
  MCTask t;
  t.context = "Topic: Pets";
  t.items = {{"Which?", {" dog", " cat"}, 1, std::nullopt}, {"Other?", {" cat", " dog"}, 1, "Topic: Cars"}};
  MCOptions none, ctx;
  ctx.policy = ContextPolicy::TaskContext;
  const auto a = mc_eval(m, v, t, none), b = mc_eval(m, v, t, ctx);
  EXPECT_EQ(a.items[0].predicted, 0u);  // dog without the frame
  EXPECT_EQ(b.items[0].predicted, 1u);  // cat with "Topic: Pets"
  EXPECT_EQ(b.items[1].predicted, 1u);  // item context overrides, no trigger
  EXPECT_EQ(a.correct, 1u);
  EXPECT_EQ(b.correct, 2u);
}

TEST(McEval, ZeroShotUsesEmptyFrame) {
  const Vocabulary v({" cat"});
  MCTask t;
  t.context = "ignored";
  t.items = {{" cat", {" cat"}, 0, std::nullopt}};
  const auto ids = assemble_mc_prompt(t, 0, {}, v);
  EXPECT_EQ(std::vector<TokenId>(ids.begin(), ids.begin() + 3),
            (std::vector<TokenId>{Vocabulary::kBos, Vocabulary::kBoc, Vocabulary::kEoc}));
  EXPECT_EQ(ids.size(), 4u);
}

TEST(McEval, KShotLayoutHasOneFrameBeforeExemplars) {
  const Vocabulary v({" cat", " dog"});
  MCTask t = random_task(6, 3);
  t.context = "Topic: X";
  MCOptions o;
  o.mode = ShotMode::KShot;
  o.shots = 3;
  o.policy = ContextPolicy::TaskContext;
  const auto ids = assemble_mc_prompt(t, 2, o, v);
  EXPECT_EQ(std::count(ids.begin(), ids.end(), Vocabulary::kBoc), 1);
  EXPECT_EQ(std::count(ids.begin(), ids.end(), Vocabulary::kEoc), 1);
  EXPECT_EQ(ids[1], Vocabulary::kBoc);
  const auto ctx = v.encode("Topic: X");
  EXPECT_EQ(ids[2 + ctx.size()], Vocabulary::kEoc);

  std::vector<TokenId> expect{Vocabulary::kBos, Vocabulary::kBoc};
  expect.insert(expect.end(), ctx.begin(), ctx.end());
  expect.push_back(Vocabulary::kEoc);
  const auto ex = select_exemplars(6, 2, 3, o.seed);
  for (auto e : ex) {
    for (const auto& s : {t.items[e].question, t.items[e].options[t.items[e].gold], t.separator}) {
      const auto enc = v.encode(s);
      expect.insert(expect.end(), enc.begin(), enc.end());
    }
  }
  const auto q = v.encode(t.items[2].question);
  expect.insert(expect.end(), q.begin(), q.end());
  EXPECT_EQ(ids, expect);
}

TEST(McEval, ExemplarsExcludeScoredItemAndAreSeeded) {
  for (std::size_t item = 0; item < 10; ++item) {
    const auto ex = select_exemplars(10, item, 5, 7);
    EXPECT_EQ(ex.size(), 5u);
    EXPECT_EQ(std::count(ex.begin(), ex.end(), item), 0);
    EXPECT_EQ(std::set<std::size_t>(ex.begin(), ex.end()).size(), 5u);
    EXPECT_EQ(ex, select_exemplars(10, item, 5, 7));
  }
  EXPECT_THROW(select_exemplars(3, 0, 3, 0), ValidationError);
}

TEST(McEval, OverlongItemsAreSkipped) {
  const Vocabulary v({" cat", " dog"});
  UnigramModel m(random_distribution(v.size(), 4));
  m.max_len_ = 8;
  MCTask t;
  t.items = {{"q", {" cat", " dog"}, 0, std::nullopt},
             {"a much longer question", {" cat", " dog"}, 0, std::nullopt}};
  const auto r = mc_eval(m, v, t, {});
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.scored, 1u);
  EXPECT_TRUE(r.items[1].skipped);
}

TEST(McEval, TaskFileParsingAndValidation) {
  const auto path = testutil::temp_file("task.jsonl");
  testutil::spit(path,
                 "{\"question\":\"Q1\",\"options\":[\" a\",\" b\"],\"gold\":1}\n\n"
                 "{\"question\":\"Q2\",\"options\":[\" c\"],\"gold\":0,\"context\":\"Topic: Health\"}\n");
  const auto t = load_mc_task(path);
  EXPECT_EQ(t.name, "task");
  ASSERT_EQ(t.items.size(), 2u);
  EXPECT_EQ(t.items[0].gold, 1u);
  EXPECT_EQ(t.items[1].context, std::optional<std::string>("Topic: Health"));
  testutil::spit(path, "{\"question\":\"Q1\",\"options\":[\" a\"],\"gold\":1}\n");
  EXPECT_THROW(load_mc_task(path), ValidationError);
  testutil::spit(path, "{\"question\":\"Q1\",\"options\":[],\"gold\":0}\n");
  EXPECT_THROW(load_mc_task(path), ValidationError);
  testutil::spit(path, "not json\n");
  EXPECT_THROW(load_mc_task(path), ValidationError);
}

TEST(McEval, TransformerScorerAgreesWithDirectForward) {
  const auto v = synth_vocabulary(64, 4);
  auto cfg = small_config(v.size());
  cfg.seq_len = 32;
  cfg.init_std = 0.3;
  const auto ck = init_model(cfg);
  MCTask t;
  t.items = {{" w1 w2", {" w3", " w40 w41"}, 0, std::nullopt}, {" w5", {" w6 w7", " w60"}, 1, std::nullopt}};
  const auto r = mc_eval(TransformerScorer(ck), v, t, {});
  for (std::size_t i = 0; i < t.items.size(); ++i) {
    const auto prompt = assemble_mc_prompt(t, i, {}, v);
    for (std::size_t o = 0; o < 2; ++o) {
      auto ids = prompt;
      const auto cont = v.encode(t.items[i].options[o]);
      ids.insert(ids.end(), cont.begin(), cont.end());
      const Mat<float> logits = ck.model().forward(ids, 1, ids.size());
      double s = 0;
      for (std::size_t k = prompt.size(); k < ids.size(); ++k) {
        std::vector<double> row(logits.cols());
        for (Eigen::Index c = 0; c < logits.cols(); ++c) row[c] = logits(static_cast<Eigen::Index>(k - 1), c);
        s += std::log(testutil::softmax_ld(row)[ids[k]]);
      }
      EXPECT_NEAR(r.items[i].scores[o], s / cont.size(), 1e-6);
    }
  }
}

// --- curves ------------------------------------------------------------------

TEST(TokensToTarget, LinearInterpolation) {
  const std::vector<CurvePoint> c{{0, 100}, {100, 50}, {200, 40}, {300, 35}};
  EXPECT_DOUBLE_EQ(*tokens_to_target(c, 50), 100);
  EXPECT_DOUBLE_EQ(*tokens_to_target(c, 45), 150);
  EXPECT_DOUBLE_EQ(*tokens_to_target(c, 100), 0);
  EXPECT_DOUBLE_EQ(*tokens_to_target(c, 37.5), 250);
  EXPECT_FALSE(tokens_to_target(c, 30));
}

TEST(Speedup, IdenticalArmsGiveRatioOne) {
  const auto v = synth_vocabulary(64, 4);
  auto cfg = small_config(v.size());
  cfg.total_steps = 12;
  cfg.min_lr = cfg.max_lr;
  const auto data = some_sequences(v, 16, 30);
  const auto held = some_sequences(v, 16, 6);
  const auto a = run_arm("a", cfg, data, held, Conditioning::WithContext, 3, 9);
  const auto b = run_arm("b", cfg, data, held, Conditioning::WithContext, 3, 12);
  ASSERT_EQ(a.curve.size(), 4u);  // 0, 3, 6, 9
  EXPECT_EQ(a.curve[3].tokens_consumed, 9u * 3 * 16);
  const auto r = compare_arms(a, b);
  EXPECT_EQ(r.ratio, 1.0);
  EXPECT_FALSE(a.diverged);
}

TEST(Speedup, DataArmsDifferOnlyInContext) {
  SpeedupConfig c;
  c.model.seq_len = 32;
  c.corpus.n_docs = 40;
  c.corpus.doc_len = 20;
  c.heldout_docs = 10;
  const auto s = speedup_data(c, false), k = speedup_data(c, true);
  ASSERT_EQ(s.train.size(), k.train.size());
  std::size_t with_ctx = 0;
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    EXPECT_EQ(s.train[i].text_tokens(), k.train[i].text_tokens());
    EXPECT_EQ(s.train[i].context_length(), 0u);
    EXPECT_EQ(k.train[i].without_context(), s.train[i]);
    with_ctx += k.train[i].context_length() > 0;
  }
  EXPECT_GT(with_ctx, 0u);
  for (const auto& h : k.heldout) EXPECT_GT(h.context_length(), 0u);
  c.corpus.doc_len = 40;
  EXPECT_THROW(speedup_data(c, true), ValidationError);
}

// --- gamma sweep and reports ------------------------------------------------

TEST(GammaSweep, BoundaryRowsAndDeterminism) {
  const auto v = synth_vocabulary(64, 4);
  auto cfg = small_config(v.size());
  cfg.seq_len = 40;
  cfg.init_std = 0.3;
  const auto ck = init_model(cfg);
  GuidanceRequest base;
  base.max_tokens = 8;
  base.seed = 5;
  const std::vector<std::string> prompts{" w1 w2", " w30"};
  const std::vector<double> gammas{-2, 0, 1, 2, 4};
  const auto rows = gamma_sweep(ck, v, prompts, "https://topic-01.synth/", gammas, base);
  ASSERT_EQ(rows.size(), 10u);
  EXPECT_EQ(rows, gamma_sweep(ck, v, prompts, "https://topic-01.synth/", gammas, base));
  for (const auto& r : rows)
    if (r.gamma == 0.0) {
      GuidanceRequest f = base;
      f.mode = DecodeMode::CtxFree;
      f.prompt = r.prompt;
      EXPECT_EQ(r.tokens, generate(ck, v, f).tokens);
    }

  auto scored = rows;
  const auto path = testutil::temp_file("judge.jsonl");
  testutil::spit(path, "{\"prompt_index\":1,\"gamma\":2,\"score\":4.5}\n{\"prompt_index\":9,\"gamma\":2,\"score\":1}\n");
  EXPECT_EQ(import_judge_scores(scored, path), 1u);
  EXPECT_EQ(scored[8].judge_score, std::optional<double>(4.5));
  testutil::spit(path, "{\"prompt_index\":1}\n");
  EXPECT_THROW(import_judge_scores(scored, path), ValidationError);
}

TEST(EvalReport, CurvesMustIncreaseAndSerialize) {
  EvalReport r;
  r.run_id = "r1";
  r.seeds = {3};
  EXPECT_THROW(r.add_curve("a", {{0, 10}, {0, 9}}), ValidationError);
  r.add_curve("standard", {{0, 10}, {64, 8.5}});
  r.scalars["ratio"] = 0.9;
  MCResult m;
  m.accuracy = 0.5;
  r.tasks.push_back({"toy", "zero_shot", "none", m});
  EXPECT_EQ(r.curves_csv(), "tokens_consumed,ppl,arm\n0,10,standard\n64,8.5,standard\n");
  std::istringstream in(r.to_jsonl());
  std::string line;
  std::map<std::string, int> kinds;
  while (std::getline(in, line)) ++kinds[nlohmann::json::parse(line).at("record").get<std::string>()];
  EXPECT_EQ(kinds["header"], 1);
  EXPECT_EQ(kinds["curve"], 2);
  EXPECT_EQ(kinds["scalar"], 1);
  EXPECT_EQ(kinds["task"], 1);
  EXPECT_NE(r.summary().find("mean_token_logprob"), std::string::npos);
}
