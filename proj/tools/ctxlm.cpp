// ctxlm: command-line entry point.
//
// Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
// request), 2 runtime failure (I/O, corrupt files, divergence).

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ctxlm/eval.hpp"
#include "ctxlm/hash.hpp"
#include "ctxlm/run_config.hpp"
#include "ctxlm/serve.hpp"

namespace fs = std::filesystem;
using namespace ctxlm;
using nlohmann::json;

namespace {

std::string kebab(std::string s) {
  for (char& c : s)
    if (c == '_') c = '-';
  return s;
}

std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "";
  Fnv1a h;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
  return hex64(h.value());
}

void write_text(const fs::path& p, const std::string& body) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + p.string());
  out << body;
}

/// State shared by all subcommands: config file, flag overrides, run dir.
struct Invocation {
  std::vector<std::string> argv;
  std::string command;
  std::string config_path;
  std::string run_dir;
  json overrides = json::object();
  json inputs = json::object();  ///< command-specific arguments, recorded in the manifest
  RunConfig cfg;
  std::vector<std::string> outputs;

  void set(const std::string& section, const std::string& key, json v) {
    if (section.empty())
      overrides[key] = std::move(v);
    else
      overrides[section][key] = std::move(v);
  }

  /// Loads the config file, applies flag overrides and picks the run dir.
  void resolve() {
    RunConfig base = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    cfg = run_config_from_json(overrides, base);
    cfg.resolve();
    if (run_dir.empty()) {
      const char* home = std::getenv("CTXLM_HOME");
      const json id{{"command", command}, {"config", to_json(cfg)}, {"inputs", inputs}};
      run_dir = (fs::path(home && *home ? home : "ctxlm_runs") / "runs" /
                 (kebab(command) + "-" + config_fingerprint(id).substr(0, 12)))
                    .string();
    }
    fs::create_directories(run_dir);
  }

  std::string in_run(const std::string& name) const { return (fs::path(run_dir) / name).string(); }

  void write_manifest() const {
    json files = json::object();
    for (const auto& p : {cfg.paths.corpus, cfg.paths.dataset, cfg.paths.vocab, cfg.paths.checkpoint})
      if (!p.empty() && fs::is_regular_file(p)) files[p] = file_fingerprint(p);
    json outs = json::object();
    for (const auto& p : outputs)
      if (fs::is_regular_file(p)) outs[p] = file_fingerprint(p);
    const json config = to_json(cfg);
    const json m{{"command", command},
                 {"argv", argv},
                 {"version", CTXLM_VERSION},
                 {"config", config},
                 {"config_fingerprint", config_fingerprint(config)},
                 {"seed", cfg.seed},
                 {"inputs", inputs},
                 {"input_fingerprints", files},
                 {"outputs", outs}};
    write_text(in_run("manifest.json"), m.dump(2) + "\n");
  }
};

// --- flag registration ----------------------------------------------------------

template <typename T>
void key_flag(CLI::App* app, Invocation& inv, const std::string& section, const std::string& key,
              const std::string& help, const std::string& alias = "") {
  std::string name = "--" + kebab(key);
  if (!alias.empty()) name += "," + alias;
  app->add_option_function<T>(
      name, [&inv, section, key](const T& v) { inv.set(section, key, v); }, help);
}

void common_flags(CLI::App* app, Invocation& inv) {
  app->add_option("--config", inv.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--run-dir", inv.run_dir, "output directory (default: $CTXLM_HOME/runs/<command>-<hash>)");
  key_flag<std::uint64_t>(app, inv, "", "seed", "seed for every random choice");
}

void path_flag(CLI::App* app, Invocation& inv, const std::string& key, const std::string& help) {
  key_flag<std::string>(app, inv, "paths", key, help);
}

void model_flags(CLI::App* app, Invocation& inv) {
  const char* sizes[] = {"n_layers",   "hidden_size",          "n_heads",      "ffn_hidden",
                         "seq_len",    "vocab_size",           "warmup_steps", "total_steps",
                         "batch_size_sequences"};
  for (const char* k : sizes) key_flag<std::size_t>(app, inv, "model", k, std::string("model.") + k);
  const char* reals[] = {"max_lr", "min_lr",   "weight_decay", "beta1",      "beta2",
                         "adam_eps", "grad_clip", "norm_eps",   "rope_theta", "init_std"};
  for (const char* k : reals) key_flag<double>(app, inv, "model", k, std::string("model.") + k);
}

void context_flags(CLI::App* app, Invocation& inv) {
  key_flag<std::string>(app, inv, "context", "fields_included", "context fields, e.g. url,qs,di", "--fields");
  key_flag<std::string>(app, inv, "context", "rendering_mode", "labeled | raw");
  key_flag<double>(app, inv, "context", "mixture_probability", "probability a document keeps its context",
                   "--mixture");
  key_flag<std::string>(app, inv, "context", "schedule", "uniform | cooldown");
  key_flag<double>(app, inv, "context", "cooldown_fraction", "final fraction trained without context");
  key_flag<std::size_t>(app, inv, "context", "max_context_tokens", "context token cap");
}

void decode_flags(CLI::App* app, Invocation& inv) {
  key_flag<double>(app, inv, "decode", "gamma", "guidance strength (default 1.5)");
  key_flag<double>(app, inv, "decode", "temperature", "sampling temperature (default 1.0)");
  app->add_option_function<std::string>(
      "--top-k",
      [&inv](const std::string& v) {
        if (v == "none" || v == "0")
          inv.set("decode", "top_k", nullptr);
        else
          inv.set("decode", "top_k", std::stoull(v));
      },
      "top-k filter (default 50; 'none' disables)");
  key_flag<std::size_t>(app, inv, "decode", "max_tokens", "tokens to generate (default 64)");
}

void synth_flags(CLI::App* app, Invocation& inv) {
  for (const char* k : {"n_docs", "n_topics", "doc_len", "n_words"})
    key_flag<std::size_t>(app, inv, "synth", k, std::string("synth.") + k);
  key_flag<double>(app, inv, "synth", "informativeness", "probability metadata names the true topic");
  key_flag<double>(app, inv, "synth", "block_mass", "probability a word comes from the topic's block");
}

// --- shared loaders ---------------------------------------------------------------

Vocabulary load_vocab(const RunConfig& cfg, const std::string& fallback_dir = "") {
  if (!cfg.paths.vocab.empty()) return Vocabulary::load(cfg.paths.vocab);
  if (!fallback_dir.empty()) {
    const auto p = fs::path(fallback_dir) / "vocab.json";
    if (fs::is_regular_file(p)) return Vocabulary::load(p.string());
  }
  return Vocabulary();
}

std::string checkpoint_dir(const RunConfig& cfg) {
  return fs::path(cfg.paths.checkpoint).parent_path().string();
}

LoadedModel load_model(Invocation& inv) {
  CTXLM_REQUIRE(!inv.cfg.paths.checkpoint.empty(), "--checkpoint is required");
  LoadedModel m{load_checkpoint(inv.cfg.paths.checkpoint), load_vocab(inv.cfg, checkpoint_dir(inv.cfg)),
                inv.cfg.paths.checkpoint};
  CTXLM_REQUIRE(m.vocab.size() == m.checkpoint.config.vocab_size,
                "vocabulary has " + std::to_string(m.vocab.size()) + " ids but the checkpoint expects " +
                    std::to_string(m.checkpoint.config.vocab_size) + "; pass --vocab");
  if (inv.cfg.paths.vocab.empty()) {
    const auto p = fs::path(checkpoint_dir(inv.cfg)) / "vocab.json";
    if (fs::is_regular_file(p)) inv.cfg.paths.vocab = p.string();
  }
  return m;
}

GuidanceRequest request_from(const Invocation& inv, const std::string& prompt, const std::string& context,
                             const std::string& baseline, const std::string& mode) {
  GuidanceRequest r;
  r.prompt = prompt;
  r.context = context;
  r.baseline_context = baseline;
  r.mode = parse_decode_mode(mode);
  r.gamma = inv.cfg.decode.gamma;
  r.temperature = inv.cfg.decode.temperature;
  r.top_k = inv.cfg.decode.top_k;
  r.max_tokens = inv.cfg.decode.max_tokens;
  r.seed = inv.cfg.seed;
  r.validate();
  return r;
}

// --- subcommands --------------------------------------------------------------------

int cmd_synth(Invocation& inv) {
  auto& c = inv.cfg;
  if (c.paths.corpus.empty()) c.paths.corpus = inv.in_run("corpus.jsonl");
  if (c.paths.vocab.empty()) c.paths.vocab = inv.in_run("vocab.json");
  const auto docs = synth_corpus(c.synth);
  write_corpus(c.paths.corpus, docs);
  synth_vocabulary(c.synth.vocab_size, c.synth.n_topics).save(c.paths.vocab);
  inv.outputs = {c.paths.corpus, c.paths.vocab};
  std::cout << "wrote " << docs.size() << " documents to " << c.paths.corpus << "\nvocabulary: " << c.paths.vocab
            << "\n";
  return 0;
}

json stats_json(const PackStats& s) {
  return {{"n_docs", s.n_docs},
          {"n_sequences", s.n_sequences},
          {"masked_targets", s.masked_targets},
          {"unmasked_targets", s.unmasked_targets},
          {"empty_context_docs", s.empty_context_docs},
          {"empty_context_fraction", s.empty_context_fraction()},
          {"rejected_docs", s.rejected_docs},
          {"diagnostics", s.diagnostics}};
}

int cmd_pack(Invocation& inv) {
  auto& c = inv.cfg;
  CTXLM_REQUIRE(!c.paths.corpus.empty(), "--corpus is required");
  if (c.paths.dataset.empty()) c.paths.dataset = inv.in_run("dataset.ctxp");
  const auto vocab = load_vocab(c);
  const auto docs = read_corpus(c.paths.corpus);
  const auto stats = pack_dataset(docs, c.context, vocab, c.model.seq_len, c.seed, c.paths.dataset);
  const auto sj = stats_json(stats);
  write_text(inv.in_run("pack_stats.json"), sj.dump(2) + "\n");
  inv.outputs = {c.paths.dataset, inv.in_run("pack_stats.json")};
  std::cout << sj.dump(2) << "\n";
  return 0;
}

int cmd_train(Invocation& inv, const std::string& resume, std::size_t log_every, std::size_t checkpoint_every) {
  auto& c = inv.cfg;
  const Vocabulary vocab = load_vocab(c);
  std::vector<TokenizedSequence> data;
  if (!c.paths.corpus.empty()) {
    CTXLM_REQUIRE(c.paths.dataset.empty(), "pass either --corpus or --dataset, not both");
    c.paths.dataset = inv.in_run("dataset.ctxp");
    const auto stats = pack_dataset(read_corpus(c.paths.corpus), c.context, vocab, c.model.seq_len, c.seed,
                                    c.paths.dataset);
    std::cout << "packed " << stats.n_sequences << " sequences, empty-context fraction "
              << stats.empty_context_fraction() << "\n";
  } else {
    CTXLM_REQUIRE(!c.paths.dataset.empty(), "--dataset or --corpus is required");
    CTXLM_REQUIRE(!inv.overrides.contains("context"),
                  "context flags apply when packing from --corpus; the dataset is already packed");
  }
  PackedReader reader(c.paths.dataset);
  data = reader.read_all();
  CTXLM_REQUIRE(!data.empty(), "dataset is empty");
  CTXLM_REQUIRE(reader.seq_len() == c.model.seq_len, "dataset seq_len " + std::to_string(reader.seq_len()) +
                                                         " differs from model.seq_len " +
                                                         std::to_string(c.model.seq_len));
  const bool vocab_given = inv.overrides.contains("model") && inv.overrides["model"].contains("vocab_size");
  CTXLM_REQUIRE(!vocab_given || c.model.vocab_size == reader.vocab_size(),
                "model.vocab_size differs from the dataset's " + std::to_string(reader.vocab_size()));
  c.model.vocab_size = reader.vocab_size();
  CTXLM_REQUIRE(vocab.size() == c.model.vocab_size, "vocabulary has " + std::to_string(vocab.size()) +
                                                        " ids but the dataset was packed with " +
                                                        std::to_string(c.model.vocab_size));
  c.model.validate();

  Checkpoint ck;
  if (!resume.empty()) {
    ck = load_checkpoint(resume);
    LMConfig a = ck.config, b = c.model;
    a.total_steps = b.total_steps = 0;
    CTXLM_REQUIRE(a == b, "checkpoint config differs from the run config (only total_steps may change)");
    ck.config.total_steps = c.model.total_steps;
  } else {
    ck = init_model(c.model);
  }
  const std::string ckdir = c.paths.checkpoints.empty() ? inv.in_run("checkpoints") : c.paths.checkpoints;
  vocab.save(inv.in_run("vocab.json"));
  std::ofstream log(inv.in_run("train_log.jsonl"), resume.empty() ? std::ios::trunc : std::ios::app);
  std::cout << "training " << parameter_count(c.model) << " parameters for " << c.model.total_steps << " steps\n";
  while (ck.step < c.model.total_steps) {
    const auto m = train_on_stream(ck, data);
    const json rec{{"step", m.step}, {"loss", m.loss}, {"lr", m.lr}, {"grad_norm", m.grad_norm},
                   {"tokens_consumed", m.tokens_consumed}};
    log << rec.dump() << "\n";
    if (log_every && (m.step % log_every == 0 || m.step == c.model.total_steps))
      std::cout << "step " << m.step << " loss " << m.loss << " lr " << m.lr << " tokens " << m.tokens_consumed
                << "\n";
    if (checkpoint_every && m.step % checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06llu.ctxk", static_cast<unsigned long long>(m.step));
      fs::create_directories(ckdir);
      save_checkpoint(ck, (fs::path(ckdir) / name).string());
    }
  }
  const auto out = inv.in_run("checkpoint.ctxk");
  save_checkpoint(ck, out);
  inv.outputs = {out, inv.in_run("vocab.json"), inv.in_run("train_log.jsonl")};
  std::cout << "checkpoint: " << out << "\n";
  return 0;
}

int cmd_generate(Invocation& inv, const std::string& prompt, const std::string& context,
                 const std::string& baseline, const std::string& mode, bool as_json) {
  const auto m = load_model(inv);
  const auto req = request_from(inv, prompt, context, baseline, mode);
  const auto body = generation_response(m, req);
  write_text(inv.in_run("generation.json"), body + "\n");
  inv.outputs = {inv.in_run("generation.json")};
  if (as_json)
    std::cout << body << "\n";
  else
    std::cout << json::parse(body)["text"].get<std::string>() << "\n";
  return 0;
}

EvalReport new_report(const Invocation& inv) {
  EvalReport r;
  r.run_id = fs::path(inv.run_dir).filename().string();
  r.fingerprints["config"] = config_fingerprint(to_json(inv.cfg));
  for (const auto& [k, p] : {std::pair{"checkpoint", inv.cfg.paths.checkpoint}, {"dataset", inv.cfg.paths.dataset},
                             {"vocab", inv.cfg.paths.vocab}})
    if (!p.empty()) r.fingerprints[k] = file_fingerprint(p);
  r.seeds = {inv.cfg.seed};
  return r;
}

void finish_report(Invocation& inv, EvalReport& r) {
  const std::string dir = inv.cfg.paths.reports.empty() ? inv.run_dir : inv.cfg.paths.reports;
  r.write(dir);
  for (const char* f : {"report.jsonl", "summary.txt", "curves.csv"}) inv.outputs.push_back((fs::path(dir) / f).string());
  std::cout << r.summary();
}

int cmd_eval_ppl(Invocation& inv, const std::string& which) {
  CTXLM_REQUIRE(!inv.cfg.paths.dataset.empty(), "--dataset is required");
  const auto m = load_model(inv);
  auto r = new_report(inv);
  std::vector<Conditioning> arms;
  if (which == "with_context" || which == "both") arms.push_back(Conditioning::WithContext);
  if (which == "empty_context" || which == "both") arms.push_back(Conditioning::EmptyContext);
  CTXLM_REQUIRE(!arms.empty(), "--conditioning must be with_context, empty_context or both");
  for (auto a : arms) {
    const auto p = perplexity(m.checkpoint, inv.cfg.paths.dataset, a);
    r.scalars["ppl/" + to_string(a)] = p.perplexity;
    r.scalars["targets/" + to_string(a)] = static_cast<double>(p.targets);
  }
  finish_report(inv, r);
  return 0;
}

int cmd_eval_mc(Invocation& inv, const std::vector<std::string>& tasks, const std::string& mode, std::size_t shots,
                const std::string& policy, const std::string& task_context) {
  CTXLM_REQUIRE(!tasks.empty(), "--task is required");
  const auto m = load_model(inv);
  auto r = new_report(inv);
  MCOptions o;
  o.mode = parse_shot_mode(mode);
  o.shots = shots;
  o.policy = parse_context_policy(policy);
  o.seed = inv.cfg.seed;
  const TransformerScorer scorer(m.checkpoint);
  for (const auto& path : tasks) {
    auto task = load_mc_task(path);
    if (!task_context.empty()) task.context = task_context;
    r.tasks.push_back({task.name, to_string(o.mode), to_string(o.policy), mc_eval(scorer, m.vocab, task, o)});
    r.fingerprints["task/" + task.name] = file_fingerprint(path);
  }
  finish_report(inv, r);
  return 0;
}

int cmd_eval_speedup(Invocation& inv, const std::vector<std::uint64_t>& seeds, std::size_t eval_every,
                     std::size_t heldout_docs, double horizon) {
  auto r = new_report(inv);
  r.seeds = seeds;
  int failures = 0;
  for (auto seed : seeds) {
    SpeedupConfig sc;
    sc.model = inv.cfg.model;
    sc.corpus = inv.cfg.synth;
    sc.corpus.seed = seed;
    sc.context = inv.cfg.context;
    sc.eval_every = eval_every;
    sc.heldout_docs = heldout_docs;
    sc.horizon = horizon;
    const auto res = speedup_experiment(sc);
    const std::string tag = "/seed" + std::to_string(seed);
    r.add_curve("standard" + tag, res.standard.curve);
    r.add_curve("conditioned" + tag, res.conditioned.curve);
    r.add_curve("conditioned_empty_context" + tag, res.conditioned.empty_curve);
    r.scalars["ratio" + tag] = res.ratio;
    r.scalars["target_ppl" + tag] = res.target_perplexity;
    r.scalars["conditioned_empty_ppl" + tag] = res.conditioned_empty_perplexity;
    for (const auto* a : {&res.standard, &res.conditioned})
      if (a->diverged) {
        std::cerr << a->name << tag << " diverged: " << a->failure << "\n";
        ++failures;
      }
  }
  finish_report(inv, r);
  if (failures) throw RuntimeFailure(std::to_string(failures) + " arm(s) diverged");
  return 0;
}

int cmd_sweep(Invocation& inv, std::vector<std::string> prompts, const std::string& prompts_file,
              const std::string& context, const std::vector<double>& gammas, const std::string& judge) {
  if (!prompts_file.empty()) {
    std::ifstream in(prompts_file);
    if (!in) throw RuntimeFailure("cannot open " + prompts_file);
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) prompts.push_back(line);
  }
  CTXLM_REQUIRE(!prompts.empty(), "--prompt or --prompts-file is required");
  const auto m = load_model(inv);
  auto base = request_from(inv, prompts.front(), context, "", "ctx_guided");
  auto r = new_report(inv);
  r.sweep = gamma_sweep(m.checkpoint, m.vocab, prompts, context, gammas, base);
  if (!judge.empty()) std::cout << import_judge_scores(r.sweep, judge) << " judge scores attached\n";
  finish_report(inv, r);
  return 0;
}

int cmd_serve(Invocation& inv, ServeOptions opts) {
  auto m = std::make_shared<LoadedModel>(load_model(inv));
  // SIGINT/SIGTERM are taken synchronously so shutdown runs outside a handler
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  Server server(opts);
  server.load(m);
  const int port = server.start();
  std::cout << "serving " << m->model_id << " on http://" << opts.host << ":" << port << std::endl;
  inv.write_manifest();
  int sig = 0;
  sigwait(&set, &sig);
  std::cout << "shutting down" << std::endl;
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctxlm: context-conditioned language model pretraining and guided decoding"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", CTXLM_VERSION);

  Invocation inv;
  inv.argv.assign(argv, argv + argc);
  std::function<int()> action;

  // synth
  auto* synth = app.add_subcommand("synth", "write a topic-structured synthetic corpus and its vocabulary");
  common_flags(synth, inv);
  synth_flags(synth, inv);
  path_flag(synth, inv, "corpus", "output corpus (JSONL)");
  path_flag(synth, inv, "vocab", "output vocabulary (JSON)");
  synth->callback([&] { action = [&] { return cmd_synth(inv); }; });

  // pack
  auto* pack = app.add_subcommand("pack", "tokenize, frame and pack a corpus into training sequences");
  common_flags(pack, inv);
  context_flags(pack, inv);
  path_flag(pack, inv, "corpus", "input corpus (JSONL)");
  path_flag(pack, inv, "vocab", "vocabulary (default: byte-level)");
  path_flag(pack, inv, "dataset", "output packed dataset");
  key_flag<std::size_t>(pack, inv, "model", "seq_len", "sequence length");
  pack->callback([&] { action = [&] { return cmd_pack(inv); }; });

  // train
  std::string resume;
  std::size_t log_every = 10, checkpoint_every = 0;
  auto* train = app.add_subcommand("train", "train a model on a packed dataset (or pack a corpus first)");
  common_flags(train, inv);
  model_flags(train, inv);
  context_flags(train, inv);
  for (const char* k : {"corpus", "dataset", "vocab", "checkpoints"}) path_flag(train, inv, k, std::string("paths.") + k);
  train->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);
  train->add_option("--log-every", log_every, "print every N steps (0: quiet)");
  train->add_option("--checkpoint-every", checkpoint_every, "save every N steps (0: final only)");
  train->callback([&] { action = [&] { return cmd_train(inv, resume, log_every, checkpoint_every); }; });

  // generate
  std::string prompt, context, baseline, mode = "ctx_conditioned";
  bool as_json = false;
  auto* gen = app.add_subcommand("generate", "sample a continuation (ctx-free, ctx-conditioned or ctx-guided)");
  common_flags(gen, inv);
  decode_flags(gen, inv);
  path_flag(gen, inv, "checkpoint", "checkpoint file");
  path_flag(gen, inv, "vocab", "vocabulary (default: vocab.json beside the checkpoint)");
  gen->add_option("--prompt", prompt, "prompt text");
  gen->add_option("--context", context, "context string placed between <boc> and <eoc>");
  gen->add_option("--baseline-context", baseline, "context of the guidance baseline stream (default empty)");
  gen->add_option("--mode", mode, "ctx-free | ctx-conditioned | ctx-guided");
  gen->add_flag("--json", as_json, "print the full generation record");
  gen->callback([&] {
    inv.inputs = {{"prompt", prompt}, {"context", context}, {"baseline_context", baseline}, {"mode", mode}};
    action = [&] { return cmd_generate(inv, prompt, context, baseline, mode, as_json); };
  });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate checkpoints");
  ev->require_subcommand(1);
  std::string conditioning = "both";
  auto* ppl = ev->add_subcommand("ppl", "held-out perplexity with and without context");
  common_flags(ppl, inv);
  path_flag(ppl, inv, "checkpoint", "checkpoint file");
  path_flag(ppl, inv, "dataset", "packed dataset");
  path_flag(ppl, inv, "reports", "report directory (default: run dir)");
  ppl->add_option("--conditioning", conditioning, "with_context | empty_context | both");
  ppl->callback([&] {
    inv.inputs = {{"conditioning", conditioning}};
    action = [&] { return cmd_eval_ppl(inv, conditioning); };
  });

  std::vector<std::string> tasks;
  std::string shot_mode = "zero_shot", policy = "none", task_context;
  std::size_t shots = 5;
  auto* mc = ev->add_subcommand("mc", "multiple-choice accuracy by option likelihood");
  common_flags(mc, inv);
  path_flag(mc, inv, "checkpoint", "checkpoint file");
  path_flag(mc, inv, "vocab", "vocabulary");
  path_flag(mc, inv, "reports", "report directory");
  mc->add_option("--task", tasks, "task file(s), JSON lines")->check(CLI::ExistingFile);
  mc->add_option("--shot-mode", shot_mode, "zero_shot | k_shot");
  mc->add_option("--shots", shots, "exemplars for k_shot");
  mc->add_option("--context-policy", policy, "none | task_context");
  mc->add_option("--task-context", task_context, "context for items without their own");
  mc->callback([&] {
    inv.inputs = {{"tasks", tasks}, {"shot_mode", shot_mode}, {"shots", shots}, {"context_policy", policy},
                  {"task_context", task_context}};
    action = [&] { return cmd_eval_mc(inv, tasks, shot_mode, shots, policy, task_context); };
  });

  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t eval_every = 5, heldout_docs = 200;
  double horizon = 1.25;
  auto* sp = ev->add_subcommand("speedup", "train standard and conditioned arms on a synthetic corpus");
  common_flags(sp, inv);
  model_flags(sp, inv);
  context_flags(sp, inv);
  synth_flags(sp, inv);
  path_flag(sp, inv, "reports", "report directory");
  sp->add_option("--seeds", seeds, "corpus/model seeds")->delimiter(',');
  sp->add_option("--eval-every", eval_every, "steps between held-out evaluations");
  sp->add_option("--heldout-docs", heldout_docs, "held-out documents");
  sp->add_option("--horizon", horizon, "conditioned arm budget relative to the standard arm");
  sp->callback([&] {
    inv.inputs = {{"seeds", seeds}, {"eval_every", eval_every}, {"heldout_docs", heldout_docs}, {"horizon", horizon}};
    action = [&] { return cmd_eval_speedup(inv, seeds, eval_every, heldout_docs, horizon); };
  });

  // sweep
  std::vector<std::string> prompts;
  std::string prompts_file, sweep_context, judge;
  std::vector<double> gammas{-2, 0, 1, 2, 4};
  auto* sweep = app.add_subcommand("sweep", "guided generations over a list of gamma values");
  common_flags(sweep, inv);
  decode_flags(sweep, inv);
  path_flag(sweep, inv, "checkpoint", "checkpoint file");
  path_flag(sweep, inv, "vocab", "vocabulary");
  path_flag(sweep, inv, "reports", "report directory");
  sweep->add_option("--prompt", prompts, "prompt (repeatable)");
  sweep->add_option("--prompts-file", prompts_file, "one prompt per line")->check(CLI::ExistingFile);
  sweep->add_option("--context", sweep_context, "guiding context")->required();
  sweep->add_option("--gammas", gammas, "comma-separated gamma values")->delimiter(',');
  sweep->add_option("--judge-scores", judge, "external judge scores, JSON lines")->check(CLI::ExistingFile);
  sweep->callback([&] {
    inv.inputs = {{"prompts", prompts}, {"prompts_file", prompts_file}, {"context", sweep_context}, {"gammas", gammas}};
    action = [&] { return cmd_sweep(inv, prompts, prompts_file, sweep_context, gammas, judge); };
  });

  // serve
  ServeOptions sopts;
  auto* serve = app.add_subcommand("serve", "HTTP generation service");
  common_flags(serve, inv);
  path_flag(serve, inv, "checkpoint", "checkpoint file");
  path_flag(serve, inv, "vocab", "vocabulary");
  serve->add_option("--host", sopts.host, "bind address");
  serve->add_option("--port", sopts.port, "port (0 picks one)");
  serve->add_option("--workers", sopts.workers, "concurrent requests");
  serve->add_flag("--cors", sopts.cors, "allow cross-origin requests (local playground)");
  serve->callback([&] { action = [&] { return cmd_serve(inv, sopts); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    for (auto* sub : app.get_subcommands()) {
      inv.command = sub->get_name();
      for (auto* s2 : sub->get_subcommands()) inv.command += "_" + s2->get_name();
    }
    inv.resolve();
    const int rc = action();
    if (inv.command != "serve") inv.write_manifest();
    return rc;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}
