#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxlm/corpus.hpp"
#include "ctxlm/decode.hpp"
#include "ctxlm/trainer.hpp"

namespace ctxlm {

// --- perplexity ---------------------------------------------------------------

enum class Conditioning { WithContext, EmptyContext };
std::string to_string(Conditioning c);

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::uint64_t targets = 0;  ///< text targets scored
  std::uint64_t sequences = 0;
};

/// exp of the mean NLL over text targets. The empty-context arm reframes
/// every sequence with an empty context first; the scored targets are the
/// same in both arms.
PerplexityResult perplexity(const Checkpoint& ckpt, std::span<const TokenizedSequence> data, Conditioning c);
/// Same over a packed dataset file, which must match the checkpoint's
/// seq_len and vocab_size.
PerplexityResult perplexity(const Checkpoint& ckpt, const std::string& packed_path, Conditioning c);

// --- likelihood scoring -----------------------------------------------------------

/// Anything that assigns next-token log-probabilities to an id sequence.
class ScoringModel {
 public:
  virtual ~ScoringModel() = default;
  virtual std::size_t vocab_size() const = 0;
  /// Longest id sequence the model accepts.
  virtual std::size_t max_length() const = 0;
  /// log p(ids[i] | ids[0..i)) for i = 1 .. ids.size() - 1.
  virtual std::vector<double> token_logprobs(std::span<const TokenId> ids) const = 0;
};

class TransformerScorer final : public ScoringModel {
 public:
  explicit TransformerScorer(const Checkpoint& ckpt) : ckpt_(ckpt) {}
  std::size_t vocab_size() const override { return ckpt_.config.vocab_size; }
  std::size_t max_length() const override { return ckpt_.config.seq_len; }
  std::vector<double> token_logprobs(std::span<const TokenId> ids) const override;

 private:
  const Checkpoint& ckpt_;
};

// --- multiple choice --------------------------------------------------------------

struct MCItem {
  std::string question;
  std::vector<std::string> options;
  std::size_t gold = 0;
  std::optional<std::string> context;  ///< overrides the task context
};

struct MCTask {
  std::string name;
  std::vector<MCItem> items;
  std::string context;  ///< used by context_policy = task_context
  std::string separator = "\n";

  void validate() const;
};

/// JSON lines with question, options, gold and optional context.
MCTask load_mc_task(const std::string& path);

enum class ShotMode { ZeroShot, KShot };
enum class ContextPolicy { None, TaskContext };
std::string to_string(ShotMode m);
std::string to_string(ContextPolicy p);
ShotMode parse_shot_mode(std::string_view s);
ContextPolicy parse_context_policy(std::string_view s);

struct MCOptions {
  ShotMode mode = ShotMode::ZeroShot;
  std::size_t shots = 5;
  ContextPolicy policy = ContextPolicy::None;
  std::uint64_t seed = 0;  ///< exemplar selection
};

inline constexpr const char* kOptionNormalization = "mean_token_logprob";

struct MCItemResult {
  bool skipped = false;
  std::size_t predicted = 0;
  std::vector<double> scores;  ///< per option, mean token log-prob
};

struct MCResult {
  double accuracy = 0.0;  ///< correct / scored; 0 when nothing was scored
  std::size_t correct = 0;
  std::size_t scored = 0;
  std::size_t skipped = 0;
  std::vector<MCItemResult> items;
};

/// Prompt ids: bos <boc> context <eoc>, then exemplars (question, gold
/// option, separator), then the question. The option ids follow.
std::vector<TokenId> assemble_mc_prompt(const MCTask& task, std::size_t item, const MCOptions& opts,
                                        const Vocabulary& vocab);

/// k distinct exemplar indices for `item`, never `item` itself.
std::vector<std::size_t> select_exemplars(std::size_t n_items, std::size_t item, std::size_t k, std::uint64_t seed);

/// Scores every option by its mean token log-likelihood after the prompt
/// and picks the best (lowest index on ties). Items whose prompt plus
/// option exceeds the model's length are skipped.
MCResult mc_eval(const ScoringModel& model, const Vocabulary& vocab, const MCTask& task, const MCOptions& opts);

// --- training curves ----------------------------------------------------------------

struct CurvePoint {
  std::uint64_t tokens_consumed = 0;
  double perplexity = 0.0;
};

/// Tokens needed to reach `target` perplexity by linear interpolation
/// between curve points; nullopt if the curve never gets there.
std::optional<double> tokens_to_target(std::span<const CurvePoint> curve, double target);

struct ArmResult {
  std::string name;
  std::vector<CurvePoint> curve;        ///< held-out perplexity, starting at 0 tokens
  std::vector<CurvePoint> empty_curve;  ///< same points, empty-context frames (if tracked)
  std::vector<double> losses;           ///< training loss per step
  double final_perplexity = 0.0;
  bool diverged = false;
  std::string failure;
};

/// Trains a fresh model from `cfg` on `train` (in order, cycling) for
/// `steps` steps (at most cfg.total_steps, which fixes the schedule),
/// scoring `heldout` under `eval` every `eval_every` steps and at the end.
ArmResult run_arm(const std::string& name, const LMConfig& cfg, std::span<const TokenizedSequence> train,
                  std::span<const TokenizedSequence> heldout, Conditioning eval, std::size_t eval_every,
                  std::size_t steps, bool track_empty = false);

struct SpeedupConfig {
  LMConfig model;             ///< total_steps is the standard arm's budget
  SynthSpec corpus;           ///< training documents; seed also seeds the model
  std::size_t heldout_docs = 200;
  ContextSpec context;        ///< conditioned arm; the standard arm uses empty contexts
  std::size_t eval_every = 25;
  /// The conditioned arm may train this many times longer, so that a
  /// ratio above 1 is measurable. Both arms follow the same schedule,
  /// laid out over the longer horizon.
  double horizon = 1.25;

  std::size_t horizon_steps() const;
  void validate() const;
};

struct SpeedupResult {
  ArmResult standard, conditioned;
  double target_perplexity = 0.0;  ///< standard arm's final held-out perplexity
  std::optional<double> conditioned_tokens;
  double standard_tokens = 0.0;
  /// conditioned_tokens / standard_tokens; +inf when the target is never reached.
  double ratio = 0.0;
  /// Conditioned arm scored with empty frames after the standard arm's
  /// token budget (NaN unless its empty curve was tracked).
  double conditioned_empty_perplexity = 0.0;
};

/// Both arms see the same documents in the same order with the same model
/// seed; only the context segment differs. The conditioned arm is scored
/// with each held-out document's context, the standard arm with empty
/// frames.
SpeedupResult speedup_experiment(const SpeedupConfig& cfg);

/// Builds the train/held-out sequences for one arm of the experiment.
struct ArmData {
  std::vector<TokenizedSequence> train, heldout;
  Vocabulary vocab;
};
ArmData speedup_data(const SpeedupConfig& cfg, bool conditioned);

/// Compares two already-trained arms.
SpeedupResult compare_arms(ArmResult standard, ArmResult conditioned);

// --- gamma sweep --------------------------------------------------------------------

struct SweepRow {
  std::size_t prompt_index = 0;
  std::string prompt;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  std::vector<TokenId> tokens;
  std::string text;
  std::optional<double> judge_score;

  bool operator==(const SweepRow&) const = default;
};

/// One guided generation per (prompt, gamma) with `base`'s knobs and seed.
std::vector<SweepRow> gamma_sweep(const Checkpoint& ckpt, const Vocabulary& vocab,
                                  std::span<const std::string> prompts, const std::string& context,
                                  std::span<const double> gammas, const GuidanceRequest& base);

/// Reads JSON lines {prompt_index, gamma, score} produced by an external
/// judge and attaches them to matching rows; returns how many matched.
std::size_t import_judge_scores(std::vector<SweepRow>& rows, const std::string& path);

// --- reports ------------------------------------------------------------------------

struct TaskAccuracy {
  std::string task;
  std::string mode;
  std::string policy;
  MCResult result;
};

struct EvalReport {
  std::string run_id;
  std::map<std::string, std::string> fingerprints;
  std::map<std::string, std::vector<CurvePoint>> curves;  ///< per arm
  std::map<std::string, double> scalars;
  std::vector<TaskAccuracy> tasks;
  std::vector<SweepRow> sweep;
  std::vector<std::uint64_t> seeds;

  /// Rejects curves whose tokens_consumed is not strictly increasing.
  void add_curve(const std::string& arm, std::vector<CurvePoint> curve);

  /// One JSON record per line: header, curve points, scalars, tasks, sweep rows.
  std::string to_jsonl() const;
  std::string summary() const;
  /// tokens_consumed,ppl,arm
  std::string curves_csv() const;
  void write(const std::string& dir) const;  ///< report.jsonl, summary.txt, curves.csv
};

}  // namespace ctxlm
