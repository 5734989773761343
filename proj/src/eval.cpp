#include "dpmem/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "dpmem/hash.hpp"

namespace dpmem::eval {

// --- confusion matrix and metrics ------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : n_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() != rows.size()) throw std::invalid_argument("confusion matrix must be square");
    for (std::size_t p = 0; p < rows.size(); ++p) cm.counts_[t * cm.n_ + p] = rows[t][p];
  }
  return cm;
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t count) {
  if (truth >= n_ || predicted >= n_) throw std::out_of_range("confusion matrix label out of range");
  counts_[truth * n_ + predicted] += count;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::vector<std::vector<std::uint64_t>> ConfusionMatrix::rows() const {
  std::vector<std::vector<std::uint64_t>> out(n_);
  for (std::size_t t = 0; t < n_; ++t) out[t].assign(counts_.begin() + t * n_, counts_.begin() + (t + 1) * n_);
  return out;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("cannot merge confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

Metrics metrics(const ConfusionMatrix& cm) {
  const std::size_t n = cm.num_classes();
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("metrics: empty confusion matrix");
  std::vector<std::uint64_t> support(n, 0), predicted(n, 0);
  std::uint64_t correct = 0;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t p = 0; p < n; ++p) {
      support[t] += cm.at(t, p);
      predicted[p] += cm.at(t, p);
    }
    correct += cm.at(t, t);
  }
  Metrics m;
  m.wa = static_cast<double>(correct) / static_cast<double>(total);
  double recall_sum = 0.0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < n; ++c) {
    if (support[c] == 0) continue;
    const double tp = static_cast<double>(cm.at(c, c));
    const double recall = tp / static_cast<double>(support[c]);
    const double precision = predicted[c] ? tp / static_cast<double>(predicted[c]) : 0.0;
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    recall_sum += recall;
    m.wf1 += static_cast<double>(support[c]) / static_cast<double>(total) * f1;
    ++classes;
  }
  m.ua = recall_sum / static_cast<double>(classes);
  return m;
}

std::uint64_t cost_counter(std::span<const std::size_t> forward_lengths) {
  std::uint64_t c = 0;
  for (auto l : forward_lengths) c += static_cast<std::uint64_t>(l) * l;
  return c;
}

std::uint64_t cost_counter(const dpm::DpmTrace& trace) {
  const auto lengths = trace.forward_lengths();
  return cost_counter(lengths);
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * fraction);
  return buf;
}

// --- reports ----------------------------------------------------------------

std::string EvalReport::fingerprint() const {
  const nlohmann::json j = {{"experiment", experiment}, {"seeds", seeds}, {"config", config}};
  return sha256_hex(j.dump());
}

const ReportRow* EvalReport::find(std::uint64_t seed, const std::string& setting, const std::string& method) const {
  for (const auto& r : rows) {
    if (r.seed == seed && r.setting == setting && r.method == method) return &r;
  }
  return nullptr;
}

std::vector<const ReportRow*> EvalReport::select(const std::string& setting, const std::string& method) const {
  std::vector<const ReportRow*> out;
  for (const auto& r : rows) {
    if (r.setting == setting && r.method == method) out.push_back(&r);
  }
  return out;
}

void EvalReport::append(const EvalReport& other) {
  if (experiment.empty()) experiment = other.experiment;
  if (config.is_null()) config = other.config;
  for (auto s : other.seeds) {
    if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
  }
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json row = {{"seed", r.seed},       {"setting", r.setting}, {"method", r.method},
                          {"feasible", r.feasible}, {"samples", r.samples}, {"cost", r.cost}};
    if (r.metrics) {
      row["WA"] = format_percent(r.metrics->wa);
      row["UA"] = format_percent(r.metrics->ua);
      row["WF1"] = format_percent(r.metrics->wf1);
    }
    if (r.confusion) row["confusion"] = r.confusion->rows();
    if (r.speedup) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.2f", *r.speedup);
      row["speedup"] = buf;
    }
    if (!r.note.empty()) row["note"] = r.note;
    rows.push_back(std::move(row));
  }
  return {{"experiment", report.experiment},
          {"seeds", report.seeds},
          {"fingerprint", report.fingerprint()},
          {"config", report.config},
          {"rows", rows}};
}

std::string format_table(const EvalReport& report) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-6s %-20s %-14s %7s %7s %7s %8s %14s %8s\n", "seed", "setting", "method", "WA",
                "UA", "WF1", "samples", "cost", "speedup");
  out << "# " << report.experiment << "  fingerprint " << report.fingerprint().substr(0, 16) << "\n" << line;
  for (const auto& r : report.rows) {
    const std::string wa = r.metrics ? format_percent(r.metrics->wa) : "-";
    const std::string ua = r.metrics ? format_percent(r.metrics->ua) : "-";
    const std::string wf1 = r.metrics ? format_percent(r.metrics->wf1) : "-";
    char speed[32] = "-";
    if (r.speedup) std::snprintf(speed, sizeof(speed), "%.2f", *r.speedup);
    std::snprintf(line, sizeof(line), "%-6llu %-20s %-14s %7s %7s %7s %8zu %14llu %8s", static_cast<unsigned long long>(r.seed),
                  r.setting.c_str(), r.method.c_str(), wa.c_str(), ua.c_str(), wf1.c_str(), r.samples,
                  static_cast<unsigned long long>(r.cost), speed);
    out << line;
    if (!r.feasible) out << "  infeasible";
    if (!r.note.empty()) out << "  " << r.note;
    out << "\n";
  }
  return out.str();
}

std::string plot_series(const std::vector<std::pair<double, double>>& points, const std::string& x_name,
                        const std::string& y_name) {
  std::ostringstream out;
  out << x_name << "," << y_name << "\n";
  out.precision(10);
  for (const auto& [x, y] : points) out << x << "," << y << "\n";
  return out.str();
}

// --- parallel evaluation ----------------------------------------------------

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i, w);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

std::vector<model::Model<float>> worker_models(const model::Model<float>& model, std::size_t threads) {
  return std::vector<model::Model<float>>(std::max<std::size_t>(1, threads), model);
}

struct Outcome {
  std::size_t truth = 0;
  std::size_t predicted = 0;
  std::uint64_t cost = 0;
};

ReportRow make_row(std::uint64_t seed, std::string setting, std::string method, std::size_t num_emotions,
                   const std::vector<std::vector<Outcome>>& outcomes) {
  ReportRow row;
  row.seed = seed;
  row.setting = std::move(setting);
  row.method = std::move(method);
  ConfusionMatrix cm(num_emotions);
  for (const auto& per_dialogue : outcomes) {
    for (const auto& o : per_dialogue) {
      cm.add(o.truth, o.predicted);
      row.cost += o.cost;
      ++row.samples;
    }
  }
  if (row.samples) row.metrics = metrics(cm);
  row.confusion = std::move(cm);
  return row;
}

std::vector<DialogueSample> sorted_by_id(std::vector<DialogueSample> dialogues) {
  std::stable_sort(dialogues.begin(), dialogues.end(),
                   [](const DialogueSample& a, const DialogueSample& b) { return a.dialogue_id < b.dialogue_id; });
  return dialogues;
}

}  // namespace

// --- ablation ---------------------------------------------------------------

SplitLeakage::SplitLeakage(std::uint64_t dialogue_id)
    : std::invalid_argument("split leakage: dialogue " + std::to_string(dialogue_id) +
                            " appears in both the training and the test split"),
      id_(dialogue_id) {}

void check_disjoint(const std::vector<DialogueSample>& train, const std::vector<DialogueSample>& test) {
  std::set<std::uint64_t> ids;
  for (const auto& d : train) ids.insert(d.dialogue_id);
  for (const auto& d : test) {
    if (ids.count(d.dialogue_id)) throw SplitLeakage(d.dialogue_id);
  }
}

EvalReport run_ablation(const model::Model<float>& model, const baselines::Classifier<float>& classifier,
                        const std::vector<DialogueSample>& train, const std::vector<DialogueSample>& test_in,
                        const AblationSettings& settings) {
  check_disjoint(train, test_in);
  dpm::validate(settings.dpm);
  const auto test = sorted_by_id(test_in);
  const std::size_t E = model.vocabulary().num_emotions;
  const baselines::OneShotOptions one_shot{settings.one_shot_window.value_or(model.n_limit()),
                                           baselines::TruncateSide::kKeepTail, settings.dpm.keep_emotion_ids};
  auto models = worker_models(model, settings.threads);
  const std::size_t n = test.size();

  auto classifier_cost = [&](const DialogueSample& d) {
    const auto len = baselines::classifier_input(d, classifier.config()).size();
    return static_cast<std::uint64_t>(len) * len;
  };
  auto one_shot_outcome = [&](model::Model<float>& m, const DialogueSample& d) {
    const auto r = baselines::one_shot_infer(m, d, one_shot);
    return Outcome{d.final_emotion(), r.predicted, static_cast<std::uint64_t>(r.forward_length) * r.forward_length};
  };

  EvalReport report;
  report.experiment = "ablation";
  report.seeds = {settings.seed};
  report.config = {{"dpm", dpm::to_json(settings.dpm)},
                   {"one_shot_window", one_shot.truncate_to.value()},
                   {"classifier", baselines::to_json(classifier.config())},
                   {"model", model::to_json(model.config())},
                   {"test_dialogues", n}};

  if (settings.complete_dialogues) {
    std::vector<std::vector<Outcome>> dpm_out(n), os_out(n), cls_out(n);
    parallel_for(n, settings.threads, [&](std::size_t i, std::size_t w) {
      const auto& d = test[i];
      const auto r = dpm::dpm_infer(models[w], d, settings.dpm);
      dpm_out[i] = {{d.final_emotion(), r.predicted, cost_counter(r.trace)}};
      os_out[i] = {one_shot_outcome(models[w], d)};
      cls_out[i] = {{d.final_emotion(), baselines::classify(classifier, d), classifier_cost(d)}};
    });
    report.rows.push_back(make_row(settings.seed, kCompleteDialogues, kMethodDpm, E, dpm_out));
    report.rows.push_back(make_row(settings.seed, kCompleteDialogues, kMethodOneShot, E, os_out));
    report.rows.push_back(make_row(settings.seed, kCompleteDialogues, kMethodClassifier, E, cls_out));
  }
  if (settings.all_lengths) {
    std::vector<std::vector<Outcome>> dpm_out(n), os_out(n), cls_out(n);
    parallel_for(n, settings.threads, [&](std::size_t i, std::size_t w) {
      const auto views = corpus::make_prefix_views(test[i]);
      std::vector<dpm::DpmResult> results;
      if (settings.dpm.stepping == dpm::Stepping::kSentence) {
        results = dpm::dpm_infer_prefixes(models[w], test[i], settings.dpm);
      } else {
        for (const auto& v : views) results.push_back(dpm::dpm_infer(models[w], v, settings.dpm));
      }
      for (std::size_t k = 0; k < views.size(); ++k) {
        const auto& v = views[k];
        dpm_out[i].push_back({v.final_emotion(), results[k].predicted, cost_counter(results[k].trace)});
        os_out[i].push_back(one_shot_outcome(models[w], v));
        cls_out[i].push_back({v.final_emotion(), baselines::classify(classifier, v), classifier_cost(v)});
      }
    });
    report.rows.push_back(make_row(settings.seed, kAllLengths, kMethodDpm, E, dpm_out));
    report.rows.push_back(make_row(settings.seed, kAllLengths, kMethodOneShot, E, os_out));
    report.rows.push_back(make_row(settings.seed, kAllLengths, kMethodClassifier, E, cls_out));
  }
  return report;
}

OrderingSummary summarize_ordering(const EvalReport& report, const std::string& setting) {
  OrderingSummary s;
  for (auto seed : report.seeds) {
    const auto* dpm_row = report.find(seed, setting, kMethodDpm);
    const auto* os_row = report.find(seed, setting, kMethodOneShot);
    const auto* cls_row = report.find(seed, setting, kMethodClassifier);
    if (!dpm_row || !os_row || !cls_row || !dpm_row->metrics || !os_row->metrics || !cls_row->metrics) continue;
    ++s.seeds;
    const double d = dpm_row->metrics->wa, o = os_row->metrics->wa, c = cls_row->metrics->wa;
    if (c < o && o < d) ++s.ordered;
    s.dpm_gap.push_back(d - o);
  }
  return s;
}

// --- stepping strategies ----------------------------------------------------

double mean_sentence_tokens(const std::vector<DialogueSample>& dialogues, const model::Vocabulary& vocabulary,
                            bool keep_emotion_ids) {
  std::size_t tokens = 0, sentences = 0;
  for (const auto& d : dialogues) {
    const auto s = corpus::preprocess_sample(d, vocabulary, {.keep_emotion_ids = keep_emotion_ids});
    tokens += s.tokens.size();
    sentences += s.num_sentences();
  }
  if (sentences == 0) throw std::invalid_argument("mean_sentence_tokens: no sentences");
  return static_cast<double>(tokens) / static_cast<double>(sentences);
}

std::vector<std::size_t> stride_ladder(double mean_sentence, const std::vector<std::size_t>& multipliers) {
  std::vector<std::size_t> out;
  for (auto m : multipliers) {
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(mean_sentence * m))));
  }
  return out;
}

EvalReport run_stepping_experiment(const model::Model<float>& model, const std::vector<DialogueSample>& test_in,
                                   const SteppingSettings& settings) {
  const auto test = sorted_by_id(test_in);
  const std::size_t E = model.vocabulary().num_emotions;
  auto models = worker_models(model, settings.threads);
  const std::size_t n = test.size();

  EvalReport report;
  report.experiment = "stepping";
  report.seeds = {settings.seed};
  report.config = {{"dpm", dpm::to_json(settings.dpm)}, {"strides", settings.strides},
                   {"model", model::to_json(model.config())}, {"test_dialogues", n}};

  auto run = [&](const dpm::DpmConfig& config, const std::string& method) {
    std::vector<std::vector<Outcome>> out(n);
    parallel_for(n, settings.threads, [&](std::size_t i, std::size_t w) {
      const auto r = dpm::dpm_infer(models[w], test[i], config);
      out[i] = {{test[i].final_emotion(), r.predicted, cost_counter(r.trace)}};
    });
    return make_row(settings.seed, kCompleteDialogues, method, E, out);
  };

  dpm::DpmConfig sentence = settings.dpm;
  sentence.stepping = dpm::Stepping::kSentence;
  sentence.stride = 0;
  report.rows.push_back(run(sentence, "sentence"));
  const double base_cost = static_cast<double>(report.rows.front().cost);
  report.rows.front().speedup = 1.0;

  for (auto k : settings.strides) {
    const std::string method = "stride-" + std::to_string(k);
    if (k + settings.dpm.n_r > model.n_limit()) {
      ReportRow row;
      row.seed = settings.seed;
      row.setting = kCompleteDialogues;
      row.method = method;
      row.feasible = false;
      row.note = "stride + n_r = " + std::to_string(k + settings.dpm.n_r) + " exceeds n_limit " +
                 std::to_string(model.n_limit());
      report.rows.push_back(std::move(row));
      continue;
    }
    dpm::DpmConfig c = settings.dpm;
    c.stepping = dpm::Stepping::kFixedStride;
    c.stride = k;
    auto row = run(c, method);
    if (row.cost) row.speedup = base_cost / static_cast<double>(row.cost);
    report.rows.push_back(std::move(row));
  }
  return report;
}

// --- context window ---------------------------------------------------------

EvalReport run_context_experiment(const model::Model<float>& small_model, const model::Model<float>& large_model,
                                  const std::vector<DialogueSample>& test_in, const ContextSettings& settings) {
  if (settings.small_window == 0 || settings.large_window == 0) {
    throw std::invalid_argument("context experiment: windows must be positive");
  }
  const auto test = sorted_by_id(test_in);
  const std::size_t E = small_model.vocabulary().num_emotions;
  const std::size_t n = test.size();

  EvalReport report;
  report.experiment = "context";
  report.seeds = {settings.seed};
  report.config = {{"small_window", settings.small_window},
                   {"large_window", settings.large_window},
                   {"side", baselines::to_string(settings.side)},
                   {"keep_emotion_ids", settings.keep_emotion_ids},
                   {"small_model", model::to_json(small_model.config())},
                   {"large_model", model::to_json(large_model.config())},
                   {"test_dialogues", n}};

  for (const auto& [m, window] : {std::pair{&small_model, settings.small_window},
                                  std::pair{&large_model, settings.large_window}}) {
    const baselines::OneShotOptions options{window, settings.side, settings.keep_emotion_ids};
    std::vector<std::vector<Outcome>> out(n);
    std::vector<std::size_t> truncated(n, 0);
    parallel_for(n, settings.threads, [&](std::size_t i, std::size_t) {
      const auto r = baselines::one_shot_infer(*m, test[i], options);
      out[i] = {{test[i].final_emotion(), r.predicted, static_cast<std::uint64_t>(r.forward_length) * r.forward_length}};
      truncated[i] = r.truncated ? 1 : 0;
    });
    auto row = make_row(settings.seed, kCompleteDialogues, window_method(window), E, out);
    std::size_t t = 0;
    for (auto v : truncated) t += v;
    row.note = std::to_string(t) + " truncated";
    report.rows.push_back(std::move(row));
  }
  return report;
}

// --- complexity benchmark ---------------------------------------------------

nlohmann::json to_json(const BenchConfig& c) {
  return {{"sentences", c.sentences}, {"sentence_tokens", c.sentence_tokens}, {"n_r", c.n_r},
          {"n_limit", c.n_limit},     {"embed_dim", c.embed_dim},             {"num_layers", c.num_layers},
          {"num_heads", c.num_heads}, {"seed", c.seed}};
}

BenchConfig bench_config_from_json(const nlohmann::json& j) {
  BenchConfig c;
  c.sentences = j.value("sentences", c.sentences);
  c.sentence_tokens = j.value("sentence_tokens", c.sentence_tokens);
  c.n_r = j.value("n_r", c.n_r);
  c.n_limit = j.value("n_limit", c.n_limit);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

DialogueSample bench_dialogue(std::size_t sentences, std::size_t length, std::size_t codebook, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<corpus::Code> code(0, static_cast<corpus::Code>(codebook - 1));
  DialogueSample d;
  d.dialogue_id = sentences;
  d.seed = seed;
  for (std::size_t s = 0; s < sentences; ++s) {
    std::vector<corpus::Code> sentence(length);
    for (auto& c : sentence) c = code(rng);
    d.sentences.push_back(std::move(sentence));
    d.emotions.push_back(s % 4);
  }
  return d;
}

}  // namespace

BenchResult run_complexity_bench(const BenchConfig& config) {
  if (config.sentences == 0 || config.sentence_tokens == 0) {
    throw std::invalid_argument("bench: sentences and sentence_tokens must be positive");
  }
  model::ModelConfig mc;
  mc.embed_dim = config.embed_dim;
  mc.num_layers = config.num_layers;
  mc.num_heads = config.num_heads;
  mc.n_limit = config.n_limit;
  mc.vocabulary = {0, 256, 4};
  mc.seed = config.seed;
  model::Model<float> model(mc);
  model.freeze_base();
  dpm::DpmConfig dc;
  dc.n_r = config.n_r;

  BenchResult r;
  for (int doubled = 0; doubled < 2; ++doubled) {
    const std::size_t s = config.sentences << doubled;
    const auto d = bench_dialogue(s, config.sentence_tokens, 256, config.seed);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = dpm::dpm_infer(model, d, dc);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto stream = corpus::inference_stream(d, model.vocabulary());
    const std::uint64_t n = stream.tokens.size();
    std::uint64_t one_shot = n * n;
    if (n <= model.n_limit()) {
      const auto os = baselines::one_shot_infer(model, d);
      one_shot = static_cast<std::uint64_t>(os.forward_length) * os.forward_length;
    }
    (doubled ? r.dpm_cost_2s : r.dpm_cost_s) = cost_counter(result.trace);
    (doubled ? r.one_shot_cost_2s : r.one_shot_cost_s) = one_shot;
    (doubled ? r.stream_tokens_2s : r.stream_tokens_s) = n;
    (doubled ? r.dpm_seconds_2s : r.dpm_seconds_s) = seconds;
  }
  return r;
}

nlohmann::json to_json(const BenchResult& r) {
  char dr[32], orat[32];
  std::snprintf(dr, sizeof(dr), "%.4f", r.dpm_ratio());
  std::snprintf(orat, sizeof(orat), "%.4f", r.one_shot_ratio());
  return {{"dpm_cost", {r.dpm_cost_s, r.dpm_cost_2s}},
          {"one_shot_cost", {r.one_shot_cost_s, r.one_shot_cost_2s}},
          {"stream_tokens", {r.stream_tokens_s, r.stream_tokens_2s}},
          {"dpm_ratio", dr},
          {"one_shot_ratio", orat},
          {"dpm_wall_seconds", {r.dpm_seconds_s, r.dpm_seconds_2s}}};
}

// --- desk pipelines ---------------------------------------------------------

nlohmann::json to_json(const DeskSetup& s) {
  return {{"corpus", corpus::to_json(s.corpus)},
          {"train_fraction", s.train_fraction},
          {"model", model::to_json(s.model)},
          {"training", training::to_json(s.training)},
          {"classifier", baselines::to_json(s.classifier)},
          {"dpm", dpm::to_json(s.dpm)},
          {"one_shot_window", s.one_shot_window},
          {"stride_multipliers", s.stride_multipliers},
          {"small_window", s.small_window},
          {"threads", s.threads}};
}

namespace {

void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& path) {
  if (!given.is_object()) return;
  if (!known.is_object()) throw std::invalid_argument("config: '" + path + "' must not be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw std::invalid_argument("config: unknown key '" + here + "'");
    reject_unknown(value, known.at(key), here);
  }
}

nlohmann::json merged(const nlohmann::json& base, const nlohmann::json& overlay) {
  nlohmann::json out = base;
  out.merge_patch(overlay);
  return out;
}

}  // namespace

DeskSetup desk_setup_from_json(const nlohmann::json& j, const DeskSetup& base) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  const nlohmann::json b = to_json(base);
  reject_unknown(j, b, "");
  const nlohmann::json m = merged(b, j);
  try {
    DeskSetup s;
    s.corpus = corpus::generator_config_from_json(m.at("corpus"));
    s.train_fraction = m.at("train_fraction").get<double>();
    s.model = model::model_config_from_json(m.at("model"));
    s.training = training::train_config_from_json(m.at("training"));
    s.classifier = baselines::classifier_config_from_json(m.at("classifier"));
    s.dpm = dpm::dpm_config_from_json(m.at("dpm"));
    s.one_shot_window = m.at("one_shot_window").get<std::size_t>();
    s.stride_multipliers = m.at("stride_multipliers").get<std::vector<std::size_t>>();
    s.small_window = m.at("small_window").get<std::size_t>();
    s.threads = m.at("threads").get<std::size_t>();
    if (!(s.train_fraction > 0.0 && s.train_fraction < 1.0)) {
      throw std::invalid_argument("config: train_fraction must lie in (0, 1)");
    }
    return s;
  } catch (const nlohmann::json::exception& ex) {
    throw std::invalid_argument(std::string("config: ") + ex.what());
  }
}

DeskSetup ablation_preset() {
  DeskSetup s;
  auto& c = s.corpus;
  c.num_dialogues = 500;
  c.min_sentences = 25;
  c.max_sentences = 35;
  c.min_tokens = 2;
  c.max_tokens = 6;
  c.num_emotions = 4;
  c.codebook_size = 256;
  c.p_stay = 0.9;
  c.trigger_strength = 1.0;
  c.in_band_mass = 0.9;
  c.band_width = 4;
  c.topic_band_width = 4;
  c.trigger_final_in_band_mass = 0.25;
  s.train_fraction = 0.6;

  auto& m = s.model;
  m.embed_dim = 32;
  m.num_layers = 2;
  m.num_heads = 2;
  m.mlp_ratio = 4;
  m.n_limit = 96;
  m.vocabulary = {0, 256, 4};

  auto& t = s.training;
  t.n_o = 24;
  t.n_p = 72;
  t.n_q = 48;
  t.learning_rate = 3e-3;
  t.epochs = 3;
  t.batch_size = 8;
  t.keep_emotion_ids = false;

  auto& k = s.classifier;
  k.embed_dim = 32;
  k.num_layers = 2;
  k.num_heads = 2;
  k.window = 48;
  k.stream_budget = 48;
  k.codebook_size = 256;
  k.num_emotions = 4;
  k.learning_rate = 1e-3;
  k.epochs = 20;

  s.dpm.n_r = 48;
  s.dpm.learning_rate = 1e-3;
  s.dpm.keep_emotion_ids = false;
  s.one_shot_window = 48;
  s.small_window = 24;
  return s;
}

DeskSetup context_preset() {
  DeskSetup s = ablation_preset();
  s.corpus.min_sentences = 10;
  s.corpus.max_sentences = 14;
  s.corpus.trigger_final_in_band_mass = 0.0;
  s.model.n_limit = 128;
  s.training.n_o = 32;
  s.training.n_p = 96;
  s.training.n_q = 128;
  s.training.epochs = 8;
  s.small_window = 32;
  s.one_shot_window = 0;
  return s;
}

namespace {

void say(const Progress& p, const std::string& m) {
  if (p) p(m);
}

}  // namespace

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream) { return corpus::dialogue_seed(seed, stream); }

std::pair<model::Model<float>, training::TrainResult> train_emotion_model(const DeskSetup& setup_in,
                                                                          const std::vector<DialogueSample>& train,
                                                                          std::uint64_t seed,
                                                                          const Progress& progress) {
  DeskSetup setup = setup_in;
  setup.model.seed = derived_seed(seed, 1);
  setup.training.seed = derived_seed(seed, 3);
  model::Model<float> model(setup.model);
  lora::attach_training_lora(model, {setup.training.lora_rank, setup.training.lora_alpha, 0.02, derived_seed(seed, 2)});
  const auto t0 = std::chrono::steady_clock::now();
  auto result = training::train(model, train, setup.training, [&](const training::EpochRecord& e) {
    char line[160];
    std::snprintf(line, sizeof(line), "seed %llu window %zu epoch %zu L %.4f L_a %.4f L_e %.4f (%.0fs)",
                  static_cast<unsigned long long>(seed), setup.model.n_limit, e.epoch, e.stats.l, e.stats.l_a,
                  e.stats.l_e, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    say(progress, line);
  });
  return {std::move(model), std::move(result)};
}

std::pair<baselines::Classifier<float>, baselines::ClassifierHistory> train_baseline_classifier(
    const DeskSetup& setup, const std::vector<DialogueSample>& train, std::uint64_t seed, const Progress& progress) {
  auto config = setup.classifier;
  config.seed = derived_seed(seed, 4);
  baselines::Classifier<float> classifier(config);
  auto history = baselines::train_classifier(classifier, train);
  if (!history.epochs.empty()) {
    const auto& last = history.epochs.back();
    char line[128];
    std::snprintf(line, sizeof(line), "seed %llu classifier epoch %zu loss %.4f acc %.3f",
                  static_cast<unsigned long long>(seed), last.epoch, last.loss, last.accuracy);
    say(progress, line);
  }
  return {std::move(classifier), std::move(history)};
}

namespace {

SeedRun train_seed(DeskSetup setup, std::uint64_t seed, bool with_classifier, const Progress& progress) {
  setup.corpus.seed = seed;
  const auto all = corpus::generate_corpus(setup.corpus);
  auto [train, test] = corpus::split_corpus(all, setup.train_fraction);
  check_disjoint(train, test);
  auto [model, history] = train_emotion_model(setup, train, seed, progress);
  SeedRun run{seed, std::move(model), std::move(train), std::move(test), std::move(history), std::nullopt, {}};
  if (with_classifier) {
    auto [classifier, cls_history] = train_baseline_classifier(setup, run.train, seed, progress);
    run.classifier.emplace(std::move(classifier));
    run.classifier_history = std::move(cls_history);
  }
  return run;
}

}  // namespace

SeedRun prepare_seed(const DeskSetup& setup, std::uint64_t seed, bool with_classifier, const Progress& progress) {
  return train_seed(setup, seed, with_classifier, progress);
}

SeedRun prepare_context_model(const DeskSetup& setup, std::uint64_t seed, std::size_t window,
                              const Progress& progress) {
  DeskSetup s = setup;
  s.model.n_limit = window;
  auto& t = s.training;
  t.n_q = std::min(t.n_q, window);
  if (t.n_o + t.n_p > window) {
    const double scale = static_cast<double>(window) / static_cast<double>(t.n_o + t.n_p);
    t.n_o = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(t.n_o) * scale)));
    t.n_p = window - t.n_o;
  }
  return train_seed(s, seed, false, progress);
}

AblationSettings ablation_settings(const DeskSetup& setup, std::uint64_t seed) {
  AblationSettings a;
  a.dpm = setup.dpm;
  a.one_shot_window = setup.one_shot_window ? std::optional<std::size_t>(setup.one_shot_window) : std::nullopt;
  a.threads = setup.threads;
  a.seed = seed;
  return a;
}

EvalReport ablation_suite(const DeskSetup& setup, const std::vector<std::uint64_t>& seeds, const Progress& progress) {
  EvalReport report;
  report.experiment = "ablation";
  report.config = to_json(setup);
  for (auto seed : seeds) {
    auto run = prepare_seed(setup, seed, true, progress);
    auto r = run_ablation(run.model, *run.classifier, run.train, run.test, ablation_settings(setup, seed));
    r.config = report.config;
    report.append(r);
  }
  return report;
}

EvalReport stepping_suite(const DeskSetup& setup, const std::vector<std::uint64_t>& seeds, const Progress& progress) {
  EvalReport report;
  report.experiment = "stepping";
  report.config = to_json(setup);
  for (auto seed : seeds) {
    auto run = prepare_seed(setup, seed, false, progress);
    SteppingSettings st;
    st.dpm = setup.dpm;
    st.strides = stride_ladder(mean_sentence_tokens(run.test, run.model.vocabulary(), setup.dpm.keep_emotion_ids),
                               setup.stride_multipliers);
    st.threads = setup.threads;
    st.seed = seed;
    auto r = run_stepping_experiment(run.model, run.test, st);
    r.config = report.config;
    report.append(r);
  }
  return report;
}

EvalReport context_suite(const DeskSetup& setup, const std::vector<std::uint64_t>& seeds, const Progress& progress) {
  if (setup.small_window == 0 || setup.small_window >= setup.model.n_limit) {
    throw std::invalid_argument("context experiment: small_window must lie in (0, model.n_limit)");
  }
  EvalReport report;
  report.experiment = "context";
  report.config = to_json(setup);
  for (auto seed : seeds) {
    auto small = prepare_context_model(setup, seed, setup.small_window, progress);
    auto large = prepare_context_model(setup, seed, setup.model.n_limit, progress);
    ContextSettings cs;
    cs.small_window = setup.small_window;
    cs.large_window = setup.model.n_limit;
    cs.keep_emotion_ids = setup.training.keep_emotion_ids;
    cs.threads = setup.threads;
    cs.seed = seed;
    auto r = run_context_experiment(small.model, large.model, large.test, cs);
    r.config = report.config;
    report.append(r);
  }
  return report;
}

}  // namespace dpmem::eval
