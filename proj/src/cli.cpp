#include "dpmem/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "dpmem/checkpoint.hpp"
#include "dpmem/eval.hpp"
#include "dpmem/hash.hpp"

namespace dpmem::cli {

namespace fs = std::filesystem;

namespace {

enum class Kind { kInt, kReal, kText, kBool, kIntList };

struct FlagSpec {
  const char* flag;
  std::vector<const char*> paths;
  Kind kind;
  const char* help;
};

// Every configuration flag and the config-file key(s) it overrides.
const std::vector<FlagSpec>& config_flags() {
  static const std::vector<FlagSpec> flags = {
      {"--dialogues", {"/corpus/num_dialogues"}, Kind::kInt, "dialogues to generate"},
      {"--min-sentences", {"/corpus/min_sentences"}, Kind::kInt, "fewest sentences per dialogue"},
      {"--max-sentences", {"/corpus/max_sentences"}, Kind::kInt, "most sentences per dialogue"},
      {"--min-tokens", {"/corpus/min_tokens"}, Kind::kInt, "fewest codes per sentence"},
      {"--max-tokens", {"/corpus/max_tokens"}, Kind::kInt, "most codes per sentence"},
      {"--emotions", {"/corpus/num_emotions", "/model/vocabulary/num_emotions", "/classifier/num_emotions"},
       Kind::kInt, "emotion classes"},
      {"--codebook", {"/corpus/codebook_size", "/model/vocabulary/codebook_size", "/classifier/codebook_size"},
       Kind::kInt, "audio codebook size"},
      {"--p-stay", {"/corpus/p_stay"}, Kind::kReal, "emotion persistence probability"},
      {"--trigger-strength", {"/corpus/trigger_strength"}, Kind::kReal, "probability of a trigger motif"},
      {"--in-band-mass", {"/corpus/in_band_mass"}, Kind::kReal, "emission mass inside the emotion band"},
      {"--band-width", {"/corpus/band_width"}, Kind::kInt, "codes per emotion band"},
      {"--topic-band-width", {"/corpus/topic_band_width"}, Kind::kInt, "codes in the shared topic band"},
      {"--trigger-final-in-band-mass", {"/corpus/trigger_final_in_band_mass"}, Kind::kReal,
       "in-band mass of a triggered closing sentence"},
      {"--train-fraction", {"/train_fraction"}, Kind::kReal, "leading share of the corpus used for training"},
      {"--embed-dim", {"/model/embed_dim"}, Kind::kInt, "model width"},
      {"--layers", {"/model/num_layers"}, Kind::kInt, "transformer layers"},
      {"--heads", {"/model/num_heads"}, Kind::kInt, "attention heads"},
      {"--n-limit", {"/model/n_limit"}, Kind::kInt, "context window of the model"},
      {"--n-o", {"/training/n_o"}, Kind::kInt, "autoregressive target span"},
      {"--n-p", {"/training/n_p"}, Kind::kInt, "autoregressive prefix span"},
      {"--n-q", {"/training/n_q"}, Kind::kInt, "emotion prefix span"},
      {"--lr", {"/training/learning_rate"}, Kind::kReal, "training learning rate"},
      {"--epochs", {"/training/epochs"}, Kind::kInt, "training epochs"},
      {"--batch-size", {"/training/batch_size"}, Kind::kInt, "endings per optimizer step"},
      {"--optimizer", {"/training/optimizer"}, Kind::kText, "training optimizer (adam|sgd)"},
      {"--lora-rank", {"/training/lora_rank"}, Kind::kInt, "training adapter rank"},
      {"--lora-alpha", {"/training/lora_alpha"}, Kind::kReal, "training adapter alpha"},
      {"--keep-emotion-ids", {"/training/keep_emotion_ids", "/dpm/keep_emotion_ids"}, Kind::kBool,
       "keep emotion identifiers in the token stream"},
      {"--cls-epochs", {"/classifier/epochs"}, Kind::kInt, "classifier epochs"},
      {"--cls-lr", {"/classifier/learning_rate"}, Kind::kReal, "classifier learning rate"},
      {"--cls-window", {"/classifier/window"}, Kind::kInt, "classifier encoder window"},
      {"--cls-stream-budget", {"/classifier/stream_budget"}, Kind::kInt,
       "classifier reads only the audio inside this many trailing stream tokens (0: off)"},
      {"--n-r", {"/dpm/n_r"}, Kind::kInt, "DPM prefix tokens"},
      {"--stepping", {"/dpm/stepping"}, Kind::kText, "DPM stepping (sentence|fixed_stride)"},
      {"--stride", {"/dpm/stride"}, Kind::kInt, "DPM stride for fixed_stride"},
      {"--dpm-lr", {"/dpm/learning_rate"}, Kind::kReal, "DPM update learning rate"},
      {"--dpm-optimizer", {"/dpm/optimizer"}, Kind::kText, "DPM optimizer (adam|sgd)"},
      {"--dpm-rank", {"/dpm/lora_rank"}, Kind::kInt, "temporary adapter rank"},
      {"--dpm-alpha", {"/dpm/lora_alpha"}, Kind::kReal, "temporary adapter alpha"},
      {"--emit-trace", {"/dpm/emit_trace"}, Kind::kBool, "write per-step DPM traces"},
      {"--one-shot-window", {"/one_shot_window"}, Kind::kInt, "one-shot token budget (0: model window)"},
      {"--small-window", {"/small_window"}, Kind::kInt, "window of the small context model"},
      {"--threads", {"/threads"}, Kind::kInt, "evaluation worker threads"},
      {"--seed", {"/seed"}, Kind::kInt, "run seed"},
      {"--seeds", {"/seeds"}, Kind::kIntList, "experiment seeds, comma separated"},
      {"--bench-sentences", {"/bench/sentences"}, Kind::kInt, "bench: sentences in the short dialogue"},
      {"--bench-tokens", {"/bench/sentence_tokens"}, Kind::kInt, "bench: codes per sentence"},
      {"--bench-n-r", {"/bench/n_r"}, Kind::kInt, "bench: DPM prefix"},
      {"--bench-n-limit", {"/bench/n_limit"}, Kind::kInt, "bench: model window"},
      {"--corpus", {"/io/corpus"}, Kind::kText, "input corpus (.jsonl)"},
      {"--model", {"/io/model"}, Kind::kText, "input model checkpoint"},
      {"--classifier", {"/io/classifier"}, Kind::kText, "input classifier checkpoint"},
      {"--out", {"/io/out"}, Kind::kText, "output path"},
      {"--index", {"/io/index"}, Kind::kInt, "infer a single dialogue by position in the corpus file"},
      {"--truncate", {"/io/truncate"}, Kind::kInt, "one-shot token budget for infer (0: none)"},
      {"--side", {"/io/side"}, Kind::kText, "one-shot truncation side (tail|head)"},
  };
  return flags;
}

nlohmann::json io_defaults() {
  return {{"corpus", ""}, {"model", ""}, {"classifier", ""}, {"out", ""}, {"index", -1}, {"truncate", 0},
          {"side", "tail"}};
}

nlohmann::json full_config(const eval::DeskSetup& setup, std::uint64_t seed, const std::vector<std::uint64_t>& seeds,
                           const eval::BenchConfig& bench, const nlohmann::json& io) {
  nlohmann::json j = eval::to_json(setup);
  j["seed"] = seed;
  j["seeds"] = seeds;
  j["bench"] = eval::to_json(bench);
  j["io"] = io;
  return j;
}

struct Resolved {
  eval::DeskSetup setup;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  eval::BenchConfig bench;
  nlohmann::json io;
  nlohmann::json json;  // everything above, merged
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json parse_flag_value(const FlagSpec& spec, const std::string& text) {
  try {
    switch (spec.kind) {
      case Kind::kInt: {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        if (v < 0 && std::string_view(spec.flag) != "--index") throw std::invalid_argument(text);
        return v;
      }
      case Kind::kReal: {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
      }
      case Kind::kBool:
        if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
        if (text == "false" || text == "0" || text == "no" || text == "off") return false;
        throw std::invalid_argument(text);
      case Kind::kIntList: {
        nlohmann::json list = nlohmann::json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
          std::size_t used = 0;
          const long long v = std::stoll(item, &used);
          if (used != item.size() || v < 0) throw std::invalid_argument(item);
          list.push_back(v);
        }
        if (list.empty()) throw std::invalid_argument(text);
        return list;
      }
      case Kind::kText:
        return text;
    }
  } catch (const std::logic_error&) {
  }
  throw UsageError(std::string(spec.flag) + ": invalid value '" + text + "'");
}

Resolved resolve(const eval::DeskSetup& preset, const std::string& config_path,
                 const std::vector<std::pair<const FlagSpec*, std::string>>& given) {
  Resolved r;
  r.setup = preset;
  nlohmann::json merged = full_config(preset, r.seed, r.seeds, r.bench, io_defaults());
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw DataError("cannot read config file " + config_path);
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
      throw UsageError("config file " + config_path + ": " + ex.what());
    }
    if (!file.is_object()) throw UsageError("config file must hold an object");
    for (const auto& [key, value] : file.items()) {
      if (!merged.contains(key)) throw UsageError("config: unknown key '" + key + "'");
      if (value.is_object()) {
        for (const auto& [sub, v] : value.items()) {
          if (!merged[key].contains(sub)) throw UsageError("config: unknown key '" + key + "." + sub + "'");
        }
      }
    }
    merged.merge_patch(file);
  }
  for (const auto& [spec, text] : given) {
    const auto value = parse_flag_value(*spec, text);
    for (const char* path : spec->paths) merged[nlohmann::json::json_pointer(path)] = value;
  }
  try {
    nlohmann::json setup_part = merged;
    for (const char* k : {"seed", "seeds", "bench", "io"}) setup_part.erase(k);
    r.setup = eval::desk_setup_from_json(setup_part, preset);
    r.seed = merged.at("seed").get<std::uint64_t>();
    r.seeds = merged.at("seeds").get<std::vector<std::uint64_t>>();
    r.bench = eval::bench_config_from_json(merged.at("bench"));
    r.io = merged.at("io");
    r.io.at("index").get<long long>();
    r.io.at("truncate").get<std::size_t>();
    baselines::parse_truncate_side(r.io.at("side").get<std::string>());
    corpus::validate(r.setup.corpus);
    model::validate(r.setup.model);
    training::validate(r.setup.training, r.setup.model.n_limit);
    baselines::validate(r.setup.classifier);
    dpm::validate(r.setup.dpm);
    if (r.seeds.empty()) throw std::invalid_argument("seeds must not be empty");
  } catch (const nlohmann::json::exception& ex) {
    throw UsageError(std::string("config: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw UsageError(ex.what());
  }
  r.json = full_config(r.setup, r.seed, r.seeds, r.bench, r.io);
  return r;
}

std::string timestamp(const char* format) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof(buf), format, &tm);
  return buf;
}

class Run {
 public:
  Run(std::string subcommand, const Resolved& config, std::ostream& err)
      : subcommand_(std::move(subcommand)), config_(config), err_(err) {}

  const Resolved& config() const { return config_; }

  std::string input(const std::string& key) {
    const std::string path = config_.io.at(key).get<std::string>();
    if (path.empty()) throw UsageError(subcommand_ + " needs --" + key);
    if (!fs::exists(path)) throw DataError("missing file: " + path);
    inputs_.push_back(path);
    return path;
  }

  // The --out path, or a default name inside a fresh run directory.
  std::string output(const std::string& default_name) {
    if (out_.empty()) {
      std::string path = config_.io.at("out").get<std::string>();
      if (path.empty()) {
        const char* root = std::getenv("DPMEM_DATA_DIR");
        const fs::path dir = fs::path(root && *root ? root : "./runs") /
                             (timestamp("%Y%m%d-%H%M%S") + "-seed" + std::to_string(config_.seed));
        path = (dir / default_name).string();
      }
      for (const auto& in : inputs_) {
        if (fs::weakly_canonical(in) == fs::weakly_canonical(path)) {
          throw UsageError("output " + path + " would overwrite an input");
        }
      }
      const fs::path parent = fs::path(path).parent_path();
      if (!parent.empty()) fs::create_directories(parent);
      out_ = path;
    }
    return out_;
  }

  // Registers an extra artifact written next to the main output.
  std::string sibling(const std::string& suffix) {
    const std::string path = out_ + suffix;
    outputs_.push_back(path);
    return path;
  }

  void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << text;
    if (!out) throw DataError("failed writing " + path);
  }

  void progress(const std::string& line) { err_ << line << std::endl; }

  void finish() {
    nlohmann::json inputs = nlohmann::json::array(), outputs = nlohmann::json::array();
    for (const auto& p : inputs_) inputs.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    std::vector<std::string> all{out_};
    all.insert(all.end(), outputs_.begin(), outputs_.end());
    for (const auto& p : all) {
      if (fs::exists(p)) outputs.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    }
    const nlohmann::json manifest = {{"subcommand", subcommand_},
                                     {"config", config_.json},
                                     {"seeds", subcommand_.rfind("experiment", 0) == 0
                                                   ? nlohmann::json(config_.seeds)
                                                   : nlohmann::json::array({config_.seed})},
                                     {"inputs", inputs},
                                     {"outputs", outputs},
                                     {"timestamp", timestamp("%Y-%m-%dT%H:%M:%SZ")},
                                     {"version", "0.1.0"}};
    write_text(out_ + ".run.json", manifest.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  const Resolved& config_;
  std::ostream& err_;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
  std::string out_;
};

// Aligns model and classifier vocabularies with the corpus they run on.
void align_with_corpus(eval::DeskSetup& setup, const corpus::GeneratorConfig& g) {
  setup.model.vocabulary.codebook_size = g.codebook_size;
  setup.model.vocabulary.num_emotions = g.num_emotions;
  setup.classifier.codebook_size = g.codebook_size;
  setup.classifier.num_emotions = g.num_emotions;
}

void check_vocabulary(const model::Vocabulary& v, const corpus::GeneratorConfig& g) {
  if (v.codebook_size != g.codebook_size || v.num_emotions != g.num_emotions) {
    throw DataError("model vocabulary (codebook " + std::to_string(v.codebook_size) + ", emotions " +
                    std::to_string(v.num_emotions) + ") does not match the corpus (codebook " +
                    std::to_string(g.codebook_size) + ", emotions " + std::to_string(g.num_emotions) + ")");
  }
}

std::vector<corpus::DialogueSample> selected(const corpus::Corpus& c, const nlohmann::json& io) {
  const long long index = io.at("index").get<long long>();
  if (index < 0) return c.dialogues;
  if (static_cast<std::size_t>(index) >= c.dialogues.size()) {
    throw UsageError("--index " + std::to_string(index) + " is out of range (corpus holds " +
                     std::to_string(c.dialogues.size()) + " dialogues)");
  }
  return {c.dialogues[static_cast<std::size_t>(index)]};
}

int cmd_gen_data(Run& run, std::ostream& out) {
  auto g = run.config().setup.corpus;
  g.seed = run.config().seed;
  const auto c = corpus::make_corpus(g);
  const std::string path = run.output("corpus.jsonl");
  corpus::write_corpus(path, c);
  run.sibling(".hash.json");
  run.finish();
  out << path << " " << corpus::corpus_hash(c) << "\n";
  return kOk;
}

int cmd_train(Run& run, std::ostream& out) {
  const auto c = corpus::read_corpus(run.input("corpus"));
  auto setup = run.config().setup;
  align_with_corpus(setup, c.config);
  const auto [train, test] = corpus::split_corpus(c.dialogues, setup.train_fraction);
  const std::string path = run.output("model.ckpt");
  auto [model, result] =
      eval::train_emotion_model(setup, train, run.config().seed, [&](const std::string& m) { run.progress(m); });
  checkpoint::save_model(path, model);
  run.write_text(run.sibling(".metrics.csv"), training::metrics_csv(result));
  run.finish();
  const auto& last = result.history.empty() ? result.initial : result.history.back().stats;
  out << path << " L " << result.initial.l << " -> " << last.l << "\n";
  return kOk;
}

int cmd_train_classifier(Run& run, std::ostream& out) {
  const auto c = corpus::read_corpus(run.input("corpus"));
  auto setup = run.config().setup;
  align_with_corpus(setup, c.config);
  const auto [train, test] = corpus::split_corpus(c.dialogues, setup.train_fraction);
  const std::string path = run.output("classifier.ckpt");
  auto [classifier, history] = eval::train_baseline_classifier(setup, train, run.config().seed,
                                                               [&](const std::string& m) { run.progress(m); });
  checkpoint::save_classifier(path, classifier);
  std::string csv = "epoch,loss,accuracy\n";
  for (const auto& e : history.epochs) {
    csv += std::to_string(e.epoch) + "," + std::to_string(e.loss) + "," + std::to_string(e.accuracy) + "\n";
  }
  run.write_text(run.sibling(".metrics.csv"), csv);
  run.finish();
  out << path << "\n";
  return kOk;
}

int cmd_infer(Run& run, std::ostream& out) {
  auto model = checkpoint::load_model<float>(run.input("model"));
  const auto c = corpus::read_corpus(run.input("corpus"));
  check_vocabulary(model.vocabulary(), c.config);
  const auto& io = run.config().io;
  baselines::OneShotOptions options;
  if (const auto t = io.at("truncate").get<std::size_t>(); t > 0) options.truncate_to = t;
  options.side = baselines::parse_truncate_side(io.at("side").get<std::string>());
  options.keep_emotion_ids = run.config().setup.training.keep_emotion_ids;
  const auto dialogues = selected(c, io);
  const std::string path = run.output("predictions.jsonl");
  std::string lines;
  for (const auto& d : dialogues) {
    const auto r = baselines::one_shot_infer(model, d, options);
    lines += nlohmann::json({{"dialogue_id", d.dialogue_id},
                             {"predicted", r.predicted},
                             {"label", d.final_emotion()},
                             {"distribution", r.distribution},
                             {"forward_length", r.forward_length},
                             {"truncated", r.truncated}})
                 .dump() +
             "\n";
  }
  run.write_text(path, lines);
  run.finish();
  out << path << " " << dialogues.size() << " predictions\n";
  return kOk;
}

int cmd_infer_dpm(Run& run, std::ostream& out) {
  auto model = checkpoint::load_model<float>(run.input("model"));
  const auto c = corpus::read_corpus(run.input("corpus"));
  check_vocabulary(model.vocabulary(), c.config);
  const auto& config = run.config().setup.dpm;
  const auto dialogues = selected(c, run.config().io);
  for (const auto& d : dialogues) {
    const auto stream = corpus::inference_stream(d, model.vocabulary(), {.keep_emotion_ids = config.keep_emotion_ids});
    const auto check = dpm::window_check(model.n_limit(), stream, config);
    if (!check.ok) throw dpm::WindowViolation(check);
  }
  const std::string path = run.output("predictions.jsonl");
  std::string lines, traces = "dialogue_id,step,prefix_len,target_len,L_t,forward_len\n";
  for (const auto& d : dialogues) {
    const auto r = dpm::dpm_infer(model, d, config);
    nlohmann::json row = {{"dialogue_id", d.dialogue_id},
                          {"predicted", r.predicted},
                          {"label", d.final_emotion()},
                          {"distribution", r.trace.final_distribution},
                          {"updates", r.trace.update_count},
                          {"max_forward_length", r.trace.max_forward_length()},
                          {"cost", eval::cost_counter(r.trace)}};
    lines += row.dump() + "\n";
    if (config.emit_trace) {
      std::stringstream csv(dpm::trace_csv(r.trace));
      std::string line;
      std::getline(csv, line);
      while (std::getline(csv, line)) traces += std::to_string(d.dialogue_id) + "," + line + "\n";
    }
  }
  run.write_text(path, lines);
  if (config.emit_trace) run.write_text(run.sibling(".trace.csv"), traces);
  run.finish();
  out << path << " " << dialogues.size() << " predictions\n";
  return kOk;
}

void write_report(Run& run, const eval::EvalReport& report, std::ostream& out) {
  const std::string path = run.output(report.experiment + ".json");
  run.write_text(path, eval::to_json(report).dump(2) + "\n");
  const std::string table = eval::format_table(report);
  run.write_text(run.sibling(".txt"), table);
  if (report.experiment == "stepping") {
    std::vector<std::pair<double, double>> points;
    for (const auto& r : report.rows) {
      if (r.feasible && r.method.rfind("stride-", 0) == 0) {
        points.push_back({std::stod(r.method.substr(7)), static_cast<double>(r.cost)});
      }
    }
    run.write_text(run.sibling(".cost.csv"), eval::plot_series(points, "stride", "cost"));
  }
  run.finish();
  out << table;
  if (report.experiment == "ablation") {
    for (const char* setting : {eval::kCompleteDialogues, eval::kAllLengths}) {
      const auto s = eval::summarize_ordering(report, setting);
      if (s.seeds == 0) continue;
      out << setting << ": ordering Classifier < SLLM < SLLM-DPM in " << s.ordered << " of " << s.seeds
          << " seeds\n";
    }
  }
  out << "report " << path << "\n";
}

int cmd_eval(Run& run, std::ostream& out) {
  auto model = checkpoint::load_model<float>(run.input("model"));
  auto classifier = checkpoint::load_classifier<float>(run.input("classifier"));
  const auto c = corpus::read_corpus(run.input("corpus"));
  check_vocabulary(model.vocabulary(), c.config);
  const auto& setup = run.config().setup;
  const auto [train, test] = corpus::split_corpus(c.dialogues, setup.train_fraction);
  auto report = eval::run_ablation(model, classifier, train, test, eval::ablation_settings(setup, run.config().seed));
  write_report(run, report, out);
  return kOk;
}

int cmd_experiment(Run& run, const std::string& kind, std::ostream& out) {
  const auto& cfg = run.config();
  const auto progress = [&](const std::string& m) { run.progress(m); };
  eval::EvalReport report;
  if (kind == "ablation") {
    report = eval::ablation_suite(cfg.setup, cfg.seeds, progress);
  } else if (kind == "stepping") {
    report = eval::stepping_suite(cfg.setup, cfg.seeds, progress);
  } else {
    report = eval::context_suite(cfg.setup, cfg.seeds, progress);
  }
  write_report(run, report, out);
  return kOk;
}

int cmd_bench(Run& run, std::ostream& out) {
  const auto result = eval::run_complexity_bench(run.config().bench);
  const std::string path = run.output("bench.json");
  const auto j = eval::to_json(result);
  run.write_text(path, j.dump(2) + "\n");
  run.finish();
  out << "DPM cost ratio (2S/S): " << j.at("dpm_ratio").get<std::string>() << "\n"
      << "one-shot cost ratio (2N/N): " << j.at("one_shot_ratio").get<std::string>() << "\n"
      << "report " << path << "\n";
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic Parameter Memory desk toolkit", "dpmem"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  struct Sub {
    CLI::App* app;
    std::string config;
    bool print_config = false;
    std::vector<std::pair<const FlagSpec*, std::string>> values;
    std::vector<std::pair<const FlagSpec*, CLI::Option*>> options;
  };
  std::map<std::string, Sub> subs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate a synthetic dialogue corpus"},
      {"train", "train the emotion model's adapter on a corpus"},
      {"train-classifier", "train the encoder classifier baseline"},
      {"infer", "one-shot emotion inference"},
      {"infer-dpm", "emotion inference with dynamic parameter memory"},
      {"eval", "ablation report for trained checkpoints on a corpus"},
      {"experiment", "train and evaluate from scratch: ablation, stepping or context"},
      {"bench", "deterministic attention-cost benchmark"},
  };
  std::string experiment_kind;
  std::vector<std::string> storage(config_flags().size() * commands.size());
  std::size_t slot = 0;
  for (const auto& [name, help] : commands) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.app->add_option("--config", s.config, "JSON config file; flags override its values");
    s.app->add_flag("--print-config", s.print_config, "print the resolved config and exit");
    if (name == "experiment") {
      s.app->add_option("kind", experiment_kind, "ablation | stepping | context")
          ->required()
          ->check(CLI::IsMember({"ablation", "stepping", "context"}));
    }
    for (const auto& spec : config_flags()) {
      s.options.push_back({&spec, s.app->add_option(spec.flag, storage[slot++], spec.help)});
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto parsed = app.get_subcommands();
    err << (parsed.empty() ? app.help() : parsed.front()->help());
    return kUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  Sub& sub = subs.at(name);
  std::size_t index = 0;
  for (const auto& [name_i, help] : commands) {
    if (name_i == name) break;
    index += config_flags().size();
  }
  for (std::size_t k = 0; k < sub.options.size(); ++k) {
    if (sub.options[k].second->count() > 0) sub.values.push_back({sub.options[k].first, storage[index + k]});
  }

  const eval::DeskSetup preset =
      name == "experiment" && experiment_kind == "context" ? eval::context_preset() : eval::ablation_preset();
  Resolved resolved;
  try {
    resolved = resolve(preset, sub.config, sub.values);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << chosen->help();
    return kUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
  if (sub.print_config) {
    out << resolved.json.dump(2) << "\n";
    return kOk;
  }

  const std::string label = name == "experiment" ? "experiment " + experiment_kind : name;
  Run run(label, resolved, err);
  try {
    if (name == "gen-data") return cmd_gen_data(run, out);
    if (name == "train") return cmd_train(run, out);
    if (name == "train-classifier") return cmd_train_classifier(run, out);
    if (name == "infer") return cmd_infer(run, out);
    if (name == "infer-dpm") return cmd_infer_dpm(run, out);
    if (name == "eval") return cmd_eval(run, out);
    if (name == "experiment") return cmd_experiment(run, experiment_kind, out);
    return cmd_bench(run, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << chosen->help();
    return kUsage;
  } catch (const dpm::WindowViolation& e) {
    err << e.what() << "\n";
    return kWindowViolation;
  } catch (const model::WindowExceeded& e) {
    err << e.what() << "\n";
    return kWindowViolation;
  } catch (const numerics::NumericalError& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kNumericalAbort;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace dpmem::cli
