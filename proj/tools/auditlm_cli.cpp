#include "auditlm/checkpoint.hpp"
#include "auditlm/dataset.hpp"
#include "auditlm/decode.hpp"
#include "auditlm/eval.hpp"
#include "auditlm/ingest.hpp"
#include "auditlm/sessionize.hpp"
#include "auditlm/synth.hpp"
#include "auditlm/trainer.hpp"
#include "auditlm/vocab.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace auditlm;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kMissingInput = 3, kHashMismatch = 4 };

// Sub-seed streams derived from the root seed.
enum SeedStream : std::uint64_t { kSplitStream = 1, kInitStream = 2, kShuffleStream = 3, kDecodeStream = 4 };

class MissingInput : public Error {
 public:
  using Error::Error;
};

struct Globals {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string out_dir = ".";
};

const std::string& require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw MissingInput("input file not found: " + path);
  return path;
}

std::string out_path(const Globals& g, const std::string& name) {
  const fs::path p(name);
  if (p.is_absolute()) return p.string();
  fs::create_directories(g.out_dir);
  return (fs::path(g.out_dir) / p).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(require_file(path), std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json run_header(const Globals& g, const std::string& command) {
  return {{"command", command}, {"seed", g.seed}, {"deterministic", g.deterministic}};
}

std::vector<ClinicianStream> read_streams(const std::string& path) {
  std::ifstream in(require_file(path), std::ios::binary);
  return parse_audit_csv(in);
}

struct PreprocessOptions {
  std::string input;
  std::string vocab;
  PreprocessConfig config;
  std::vector<double> split{0.70, 0.15, 0.15};
};

void add_preprocess_options(CLI::App* cmd, PreprocessOptions& o) {
  cmd->add_option("--input", o.input, "raw audit log CSV")->required();
  cmd->add_option("--shift-gap", o.config.shift_gap_s, "seconds of inactivity that start a new shift")->capture_default_str();
  cmd->add_option("--session-gap", o.config.session_gap_s, "seconds of inactivity that start a new session")
      ->capture_default_str();
  cmd->add_option("--patient-cap", o.config.patient_cap, "distinct patients per shift")->capture_default_str();
  cmd->add_option("--max-rows", o.config.max_rows, "rows per chunk")->capture_default_str();
  cmd->add_option("--split", o.split, "train,val,test fractions")->expected(3)->delimiter(',')->capture_default_str();
}

json preprocess_json(const PreprocessOptions& o) {
  return {{"shift_gap_s", o.config.shift_gap_s},
          {"session_gap_s", o.config.session_gap_s},
          {"patient_cap", o.config.patient_cap},
          {"quantizer_max_s", o.config.quantizer_max_s},
          {"max_rows", o.config.max_rows},
          {"split", o.split}};
}

struct Prepared {
  std::vector<std::string> clinicians;
  ClinicianSplit split;
  std::array<std::vector<Session>, 3> sessions;  // train, val, test
  GlobalVocab vocab{{}};
};

Prepared prepare(const Globals& g, const PreprocessOptions& o) {
  const auto streams = read_streams(o.input);
  Prepared p;
  for (const auto& s : streams) p.clinicians.push_back(s.user_id);
  SplitSpec spec{o.split.at(0), o.split.at(1), o.split.at(2), mix_seed(g.seed, kSplitStream)};
  p.split = stratified_split(p.clinicians, spec);
  const auto all = preprocess(streams, o.config);
  std::unordered_map<std::string, int> part;
  for (const auto& id : p.split.train) part[id] = 0;
  for (const auto& id : p.split.val) part[id] = 1;
  for (const auto& id : p.split.test) part[id] = 2;
  for (const auto& s : all) p.sessions[static_cast<std::size_t>(part.at(s.provenance.user_id))].push_back(s);
  if (o.vocab.empty())
    p.vocab = build_vocab(p.sessions[0]);
  else
    p.vocab = load_vocab(require_file(o.vocab));
  return p;
}

DecodeStrategy make_strategy(const std::string& name, int k, double alpha, double temperature) {
  DecodeStrategy s;
  s.kind = strategy_from_name(name);
  s.k = k;
  s.alpha = alpha;
  s.temperature = temperature;
  return s;
}

struct StrategyOptions {
  std::string name = "greedy";
  int k = 5;
  double alpha = 0.6;
  double temperature = 1.0;
};

void add_strategy_options(CLI::App* cmd, StrategyOptions& o) {
  cmd->add_option("--strategy", o.name, "greedy, topk or contrastive")
      ->check(CLI::IsMember({"greedy", "topk", "contrastive"}))
      ->capture_default_str();
  cmd->add_option("--k", o.k, "candidates for topk and contrastive")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--alpha", o.alpha, "contrastive degeneration penalty")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  cmd->add_option("--temperature", o.temperature, "topk sampling temperature")->capture_default_str();
}

json strategy_json(const StrategyOptions& o) {
  return {{"strategy", o.name}, {"k", o.k}, {"alpha", o.alpha}, {"temperature", o.temperature}};
}

std::vector<TokenizedSession> read_session_dump(const std::string& path, const GlobalVocab& vocab,
                                                std::size_t max_sessions) {
  std::ifstream in(require_file(path), std::ios::binary);
  const auto sessions = read_sessions(in);
  std::vector<TokenizedSession> out;
  for (const auto& s : sessions) {
    if (max_sessions && out.size() >= max_sessions) break;
    out.push_back(encode_session(s, vocab));
  }
  return out;
}

// ---- subcommands ----

int cmd_synth(const Globals& g, bool seed_given, const std::string& spec_path, std::size_t clinicians,
              std::size_t events, const std::string& out) {
  auto spec = ProcessSpec::from_json(read_text(spec_path));
  const std::uint64_t seed = seed_given ? g.seed : spec.seed;
  const auto logs = generate_logs(spec, clinicians, events, seed);
  const auto path = out_path(g, out);
  write_text(path, logs.csv);
  auto meta = run_header(g, "synth");
  meta["seed"] = seed;
  meta["process"] = json::parse(spec.to_json());
  meta["clinicians"] = logs.clinicians;
  meta["events_per_clinician"] = events;
  meta["shifts"] = logs.shifts;
  meta["sessions"] = logs.sessions;
  meta["entropy_rate_nats"] = true_entropy_rate(spec);
  write_text(path + ".meta.json", meta.dump(2) + "\n");
  std::cout << "wrote " << logs.events << " events for " << clinicians << " clinicians to " << path << "\n";
  return kOk;
}

int cmd_ingest(const Globals& g, const std::string& input, const std::string& out) {
  const auto streams = read_streams(input);
  const auto path = out_path(g, out);
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    write_audit_csv(os, streams);
  }
  std::size_t events = 0;
  for (const auto& s : streams) events += s.events.size();
  auto meta = run_header(g, "ingest");
  meta["input"] = input;
  meta["clinicians"] = streams.size();
  meta["events"] = events;
  write_text(path + ".meta.json", meta.dump(2) + "\n");
  std::cout << "validated " << events << " events from " << streams.size() << " clinicians\n";
  return kOk;
}

int cmd_vocab(const Globals& g, const PreprocessOptions& o, const std::string& out) {
  const auto p = prepare(g, o);
  const auto path = out_path(g, out);
  save_vocab(p.vocab, path);
  std::cout << "vocabulary " << hash_hex(p.vocab.hash()) << ": " << p.vocab.field(Field::MetricName).tokens.size()
            << " actions, " << p.vocab.size() << " tokens\n";
  return kOk;
}

int cmd_preprocess(const Globals& g, const PreprocessOptions& o) {
  const auto p = prepare(g, o);
  save_vocab(p.vocab, out_path(g, "vocab.json"));
  const std::array<std::string, 3> names{"train", "val", "test"};
  json counts = json::object();
  for (std::size_t i = 0; i < 3; ++i) {
    const auto data = tokenize_sessions(p.sessions[i], p.vocab, p.clinicians);
    save_dataset(data, out_path(g, names[i] + ".altk"));
    std::ofstream dump(out_path(g, names[i] + ".sessions"), std::ios::binary);
    write_sessions(dump, p.sessions[i]);
    counts[names[i]] = {{"sequences", data.sequences.size()}, {"rows", data.total_rows()}};
  }
  auto meta = run_header(g, "preprocess");
  meta["input"] = o.input;
  meta["preprocess"] = preprocess_json(o);
  meta["split_seed"] = mix_seed(g.seed, kSplitStream);
  meta["clinicians"] = {{"train", p.split.train}, {"val", p.split.val}, {"test", p.split.test}};
  meta["counts"] = counts;
  meta["vocab_hash"] = hash_hex(p.vocab.hash());
  write_text(out_path(g, "split.json"), meta.dump(2) + "\n");
  std::cout << "clinicians train/val/test: " << p.split.train.size() << "/" << p.split.val.size() << "/"
            << p.split.test.size() << "; vocabulary " << hash_hex(p.vocab.hash()) << "\n";
  return kOk;
}

struct TrainOptions {
  std::string data_dir;
  std::string preset = "gpt2-3layer";
  int layers = 0, heads = 0, d_model = 0, d_ff = 0, context_len = 0;
  TrainConfig train;
  std::string optimizer = "sophia";
  double lr = 3e-4;
};

int cmd_train(const Globals& g, TrainOptions& o) {
  const std::string dir = o.data_dir.empty() ? g.out_dir : o.data_dir;
  const auto vocab = load_vocab(require_file((fs::path(dir) / "vocab.json").string()));
  auto train_set = load_dataset(require_file((fs::path(dir) / "train.altk").string()), vocab.hash());
  std::optional<TokenizedDataset> val_set;
  const auto val_path = (fs::path(dir) / "val.altk").string();
  if (fs::is_regular_file(val_path)) val_set = load_dataset(val_path, vocab.hash());

  auto config = preset_config(o.preset, vocab.layout());
  if (o.layers) config.n_layers = o.layers;
  if (o.heads) config.n_heads = o.heads;
  if (o.d_model) config.d_model = o.d_model;
  if (o.d_ff) config.d_ff = o.d_ff;
  if (o.context_len) config.context_len = o.context_len;
  config.seed = mix_seed(g.seed, kInitStream);
  config.validate();

  const auto rows = static_cast<std::size_t>(config.max_rows());
  train_set = rechunk(train_set, rows);
  if (val_set) val_set = rechunk(*val_set, rows);

  auto& tc = o.train;
  tc.optimizer = optimizer_from_name(o.optimizer);
  tc.adamw.lr = o.lr;
  tc.sophia.lr = o.lr;
  tc.shuffle_seed = mix_seed(g.seed, kShuffleStream);
  tc.checkpoint_dir = out_path(g, "checkpoints");
  tc.log = [](std::string_view s) { std::cout << s << "\n"; };
  tc.validate();
  std::cout << "effective batch " << tc.effective_batch() << " (" << tc.batch_size << " x " << tc.grad_accum << ")\n";

  auto model = init_model<float>(config, config.seed, vocab.hash());
  std::cout << "model " << architecture_name(config.arch) << " with " << model.parameter_count() << " parameters\n";
  const auto result = train(model, train_set, val_set ? &*val_set : nullptr, tc);

  save_checkpoint(model, out_path(g, "model.ckpt"));
  {
    std::ofstream trace(out_path(g, "loss_trace.csv"), std::ios::binary);
    write_loss_trace(trace, result.trace);
  }
  auto meta = run_header(g, "train");
  meta["model"] = json::parse(config.to_json());
  meta["vocab_hash"] = hash_hex(vocab.hash());
  meta["train"] = {{"batch_size", tc.batch_size},
                   {"grad_accum", tc.grad_accum},
                   {"epochs", tc.epochs},
                   {"optimizer", o.optimizer},
                   {"lr", o.lr},
                   {"warmup_steps", tc.warmup_steps},
                   {"min_lr_ratio", tc.min_lr_ratio},
                   {"hessian_interval", tc.sophia.hessian_interval},
                   {"rho", tc.sophia.rho},
                   {"hessian_scale", tc.sophia.hessian_scale_tokens ? "tokens" : "sequences"},
                   {"shuffle_seed", tc.shuffle_seed},
                   {"ewma_alpha", tc.ewma_alpha}};
  json epochs = json::array();
  for (const auto& e : result.epochs) {
    json row = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"checkpoint", fs::path(e.checkpoint_path).filename().string()}};
    if (e.val_loss) row["val_loss"] = *e.val_loss;
    epochs.push_back(row);
  }
  meta["epochs"] = epochs;
  meta["optimizer_steps"] = result.optimizer_steps;
  meta["sophia_bound_violations"] = result.sophia_bound_violations;
  write_text(out_path(g, "train_run.json"), meta.dump(2) + "\n");
  return kOk;
}

struct ModelInputs {
  std::string checkpoint;
  std::string vocab;
};

void add_model_inputs(CLI::App* cmd, ModelInputs& m) {
  cmd->add_option("--checkpoint", m.checkpoint, "model checkpoint")->required();
  cmd->add_option("--vocab", m.vocab, "vocabulary JSON")->required();
}

std::pair<GlobalVocab, ModelState<float>> load_model(const ModelInputs& m) {
  auto vocab = load_vocab(require_file(m.vocab));
  auto model = load_checkpoint<float>(require_file(m.checkpoint), vocab.hash());
  return {std::move(vocab), std::move(model)};
}

int cmd_eval(const Globals& g, const ModelInputs& mi, const std::string& data_path, const StrategyOptions& so,
             std::size_t max_sessions, const std::string& out) {
  const auto [vocab, model] = load_model(mi);
  const auto data = rechunk(load_dataset(require_file(data_path), vocab.hash()),
                            static_cast<std::size_t>(model.config.max_rows()));
  const auto strategy = make_strategy(so.name, so.k, so.alpha, so.temperature);
  const std::uint64_t seed = mix_seed(g.seed, kDecodeStream);
  const std::size_t n = max_sessions ? std::min(max_sessions, data.sequences.size()) : data.sequences.size();
  const std::span<const TokenizedSession> subset(data.sequences.data(), n);

  EvalReport report;
  report.perplexity = per_field_perplexity(model, data);
  report.accuracy = next_action_accuracy(model, subset, strategy, seed);
  report.rouge = rouge_eval(model, subset, strategy, seed);
  report.strategy = so.name;
  report.seed = seed;
  report.vocab_hash = hash_hex(vocab.hash());
  report.model_config = model.config.to_json();
  auto j = json::parse(report.to_json());
  j["run"] = run_header(g, "eval");
  j["run"]["decode"] = strategy_json(so);
  j["run"]["sessions_decoded"] = n;
  const auto path = out_path(g, out);
  write_text(path, j.dump(2) + "\n");
  std::cout << "perplexity MN/PID/AT: " << report.perplexity.perplexity[0] << " / " << report.perplexity.perplexity[1]
            << " / " << report.perplexity.perplexity[2] << "\n";
  return kOk;
}

int cmd_score(const Globals& g, const ModelInputs& mi, const std::string& sessions_path, std::size_t max_sessions,
              const std::string& out, const std::string& table) {
  const auto [vocab, model] = load_model(mi);
  const auto sessions = read_session_dump(sessions_path, vocab, max_sessions);
  const auto path = out_path(g, out);
  std::ofstream csv(path, std::ios::binary);
  if (!csv) throw Error("cannot write " + path);
  std::ofstream txt;
  if (!table.empty()) txt.open(out_path(g, table), std::ios::binary);
  const auto report = emit_entropy_report(model, vocab, sessions, csv, table.empty() ? nullptr : &txt);
  auto meta = run_header(g, "score");
  meta["sessions"] = report.sessions.size();
  meta["vocab_hash"] = hash_hex(vocab.hash());
  meta["model"] = json::parse(model.config.to_json());
  write_text(path + ".meta.json", meta.dump(2) + "\n");
  if (table.empty()) render_entropy_table(std::cout, report);
  return kOk;
}

int cmd_sample(const Globals& g, const ModelInputs& mi, std::size_t rows, const std::string& prompt_sessions,
               std::size_t prompt_rows_n, const StrategyOptions& so, const std::string& out) {
  const auto [vocab, model] = load_model(mi);
  std::vector<TokenId> prompt{kBos};
  if (!prompt_sessions.empty()) {
    const auto sessions = read_session_dump(prompt_sessions, vocab, 1);
    if (sessions.empty()) throw Error("prompt file holds no sessions");
    const auto& ids = sessions.front().ids;
    const std::size_t take = std::min(prompt_rows_n, sessions.front().rows());
    prompt.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(1 + take * kTokensPerRow));
  }
  const auto strategy = make_strategy(so.name, so.k, so.alpha, so.temperature);
  const std::uint64_t seed = mix_seed(g.seed, kDecodeStream);
  std::mt19937_64 rng(seed);
  const auto ctx = fit_context(prompt, model.config.context_len, kTokensPerRow);
  const auto generated = generate_rows(model, ctx, rows, strategy, rng);

  std::vector<TokenId> all{kBos};
  all.insert(all.end(), generated.begin(), generated.end());
  const auto session = decode_tokens(all, vocab);
  const auto quantizer = QuantizerSpec::standard();
  std::ostringstream csv;
  csv << "row_index,metric_name,pat_index,at_label\n";
  for (std::size_t r = 0; r < session.rows.size(); ++r) {
    const auto& row = session.rows[r];
    csv << r << ',' << csv_escape(row.metric_name) << ',' << patient_label(row.patient_index) << ','
        << csv_escape(quantizer.labels[static_cast<std::size_t>(row.delta_bin)]) << '\n';
  }
  const auto path = out_path(g, out);
  write_text(path, csv.str());
  auto meta = run_header(g, "sample");
  meta["decode"] = strategy_json(so);
  meta["decode_seed"] = seed;
  meta["prompt_rows"] = (prompt.size() - 1) / kTokensPerRow;
  meta["vocab_hash"] = hash_hex(vocab.hash());
  write_text(path + ".meta.json", meta.dump(2) + "\n");
  std::cout << csv.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"auditlm: tabular language models for EHR audit logs"};
  app.set_config("--config", "", "INI/TOML run configuration; command-line flags take precedence");
  app.require_subcommand(1);

  Globals g;
  if (const char* env = std::getenv("AUDITLM_OUT_DIR")) g.out_dir = env;
  app.add_option("--seed", g.seed, "root seed")->capture_default_str();
  app.add_flag("--deterministic", g.deterministic, "force single-worker execution");
  app.add_option("--out-dir", g.out_dir, "output directory (default $AUDITLM_OUT_DIR or .)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic audit log from a process spec");
  std::string spec_path, synth_out = "synth.csv";
  std::size_t synth_clinicians = 20, synth_events = 2000;
  synth->add_option("--spec", spec_path, "process spec JSON")->required();
  synth->add_option("--clinicians", synth_clinicians)->capture_default_str();
  synth->add_option("--events", synth_events, "events per clinician")->capture_default_str();
  synth->add_option("--out", synth_out)->capture_default_str();

  auto* ingest = app.add_subcommand("ingest", "validate a raw audit log and write sorted streams");
  std::string ingest_in, ingest_out = "streams.csv";
  ingest->add_option("--input", ingest_in, "raw audit log CSV")->required();
  ingest->add_option("--out", ingest_out)->capture_default_str();

  auto* vocab_cmd = app.add_subcommand("vocab", "build the vocabulary from the training split");
  PreprocessOptions vocab_opts;
  std::string vocab_out = "vocab.json";
  add_preprocess_options(vocab_cmd, vocab_opts);
  vocab_cmd->add_option("--out", vocab_out)->capture_default_str();

  auto* prep = app.add_subcommand("preprocess", "sessionize, split, and tokenize into train/val/test datasets");
  PreprocessOptions prep_opts;
  add_preprocess_options(prep, prep_opts);
  prep->add_option("--vocab", prep_opts.vocab, "reuse an existing vocabulary instead of building one");

  auto* train_cmd = app.add_subcommand("train", "train a model on a preprocessed directory");
  TrainOptions topts;
  train_cmd->add_option("--data-dir", topts.data_dir, "directory written by preprocess (default: --out-dir)");
  train_cmd->add_option("--preset", topts.preset, "model preset")->capture_default_str();
  train_cmd->add_option("--layers", topts.layers, "override layer count");
  train_cmd->add_option("--heads", topts.heads, "override head count");
  train_cmd->add_option("--d-model", topts.d_model, "override hidden width");
  train_cmd->add_option("--d-ff", topts.d_ff, "override MLP width");
  train_cmd->add_option("--context-len", topts.context_len, "override context length");
  train_cmd->add_option("--epochs", topts.train.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", topts.train.batch_size)->capture_default_str();
  train_cmd->add_option("--grad-accum", topts.train.grad_accum)->capture_default_str();
  train_cmd->add_option("--optimizer", topts.optimizer)->check(CLI::IsMember({"sophia", "adamw"}))->capture_default_str();
  train_cmd->add_option("--lr", topts.lr)->capture_default_str();
  train_cmd->add_option("--warmup", topts.train.warmup_steps)->capture_default_str();
  train_cmd->add_option("--min-lr-ratio", topts.train.min_lr_ratio)->capture_default_str();
  train_cmd->add_option("--hessian-interval", topts.train.sophia.hessian_interval)->capture_default_str();
  train_cmd->add_option("--rho", topts.train.sophia.rho)->capture_default_str();
  train_cmd->add_flag("--hessian-scale-tokens", topts.train.sophia.hessian_scale_tokens,
                      "scale the GNB estimate by scored tokens instead of sequences");

  auto* eval_cmd = app.add_subcommand("eval", "perplexity, next-action accuracy and ROUGE-1");
  ModelInputs eval_model;
  std::string eval_data, eval_out = "eval_report.json";
  std::size_t eval_max = 200;
  StrategyOptions eval_strategy;
  add_model_inputs(eval_cmd, eval_model);
  eval_cmd->add_option("--data", eval_data, "tokenized dataset (.altk)")->required();
  eval_cmd->add_option("--max-sessions", eval_max, "sessions to decode for accuracy and ROUGE (0 = all)")
      ->capture_default_str();
  eval_cmd->add_option("--out", eval_out)->capture_default_str();
  add_strategy_options(eval_cmd, eval_strategy);

  auto* score_cmd = app.add_subcommand("score", "per-row entropy report");
  ModelInputs score_model;
  std::string score_sessions, score_out = "entropy.csv", score_table;
  std::size_t score_max = 0;
  add_model_inputs(score_cmd, score_model);
  score_cmd->add_option("--sessions", score_sessions, "session dump written by preprocess")->required();
  score_cmd->add_option("--max-sessions", score_max, "0 = all")->capture_default_str();
  score_cmd->add_option("--out", score_out)->capture_default_str();
  score_cmd->add_option("--table", score_table, "also write an aligned text table here");

  auto* sample_cmd = app.add_subcommand("sample", "generate audit rows with a decoding strategy");
  ModelInputs sample_model;
  std::size_t sample_rows = 20, sample_prompt_rows = 5;
  std::string sample_prompt, sample_out = "sample.csv";
  StrategyOptions sample_strategy;
  add_model_inputs(sample_cmd, sample_model);
  sample_cmd->add_option("--rows", sample_rows)->capture_default_str();
  sample_cmd->add_option("--prompt", sample_prompt, "session dump; the first session seeds generation");
  sample_cmd->add_option("--prompt-rows", sample_prompt_rows)->capture_default_str();
  sample_cmd->add_option("--out", sample_out)->capture_default_str();
  add_strategy_options(sample_cmd, sample_strategy);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  if (g.deterministic) Eigen::setNbThreads(1);
  const bool seed_given = app.count("--seed") > 0;

  try {
    if (*synth) return cmd_synth(g, seed_given, require_file(spec_path), synth_clinicians, synth_events, synth_out);
    if (*ingest) return cmd_ingest(g, ingest_in, ingest_out);
    if (*vocab_cmd) return cmd_vocab(g, vocab_opts, vocab_out);
    if (*prep) return cmd_preprocess(g, prep_opts);
    if (*train_cmd) return cmd_train(g, topts);
    if (*eval_cmd) return cmd_eval(g, eval_model, eval_data, eval_strategy, eval_max, eval_out);
    if (*score_cmd) return cmd_score(g, score_model, score_sessions, score_max, score_out, score_table);
    if (*sample_cmd)
      return cmd_sample(g, sample_model, sample_rows, sample_prompt, sample_prompt_rows, sample_strategy, sample_out);
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissingInput;
  } catch (const VocabMismatch& e) {
    std::cerr << "error: vocabulary mismatch: " << e.what() << "\n";
    return kHashMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
