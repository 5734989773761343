#pragma once

// Metrics, the experiment harnesses (ablation, stepping strategy, context
// window) and the deterministic attention-cost benchmark.

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpmem/baselines.hpp"
#include "dpmem/corpus.hpp"
#include "dpmem/dpm.hpp"
#include "dpmem/lora.hpp"
#include "dpmem/model.hpp"
#include "dpmem/training.hpp"
#include "json.hpp"

namespace dpmem::eval {

using corpus::DialogueSample;

// Rows are true labels, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);
  // Row-major counts; throws unless counts.size() == rows.size()^2.
  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows);

  std::size_t num_classes() const { return n_; }
  void add(std::size_t truth, std::size_t predicted, std::uint64_t count = 1);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * n_ + predicted); }
  std::uint64_t total() const;
  std::vector<std::vector<std::uint64_t>> rows() const;
  void merge(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

// WA: overall accuracy. UA: mean recall over classes with support.
// WF1: support-weighted F1. All in [0, 1].
struct Metrics {
  double wa = 0.0;
  double ua = 0.0;
  double wf1 = 0.0;
};

// Throws std::invalid_argument on an empty matrix.
Metrics metrics(const ConfusionMatrix& cm);

// Sum of squared forward lengths.
std::uint64_t cost_counter(std::span<const std::size_t> forward_lengths);
std::uint64_t cost_counter(const dpm::DpmTrace& trace);

// "12.34": value in [0, 1] as a percentage with two decimals.
std::string format_percent(double fraction);

// --- reports ----------------------------------------------------------------

inline constexpr const char* kCompleteDialogues = "complete_dialogues";
inline constexpr const char* kAllLengths = "all_lengths";

struct ReportRow {
  std::uint64_t seed = 0;
  std::string setting;
  std::string method;
  bool feasible = true;
  std::optional<Metrics> metrics;  // absent for infeasible rows
  std::optional<ConfusionMatrix> confusion;
  std::size_t samples = 0;
  std::uint64_t cost = 0;
  std::optional<double> speedup;
  std::string note;
};

struct EvalReport {
  std::string experiment;
  std::vector<std::uint64_t> seeds;
  nlohmann::json config;
  std::vector<ReportRow> rows;

  // SHA-256 over the experiment name, seeds and config.
  std::string fingerprint() const;
  const ReportRow* find(std::uint64_t seed, const std::string& setting, const std::string& method) const;
  std::vector<const ReportRow*> select(const std::string& setting, const std::string& method) const;
  void append(const EvalReport& other);
};

nlohmann::json to_json(const EvalReport& report);
// Plain-text table, one line per row.
std::string format_table(const EvalReport& report);
// "x,y" rows for external plotting.
std::string plot_series(const std::vector<std::pair<double, double>>& points, const std::string& x_name,
                        const std::string& y_name);

// --- parallel evaluation ----------------------------------------------------

// Runs fn(i, worker) for i in [0, n) on up to `threads` workers. Each worker
// index owns its own state; results must be written by index.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn);

// --- ablation ---------------------------------------------------------------

inline constexpr const char* kMethodDpm = "SLLM-DPM";
inline constexpr const char* kMethodOneShot = "SLLM";
inline constexpr const char* kMethodClassifier = "Classifier";

class SplitLeakage : public std::invalid_argument {
 public:
  explicit SplitLeakage(std::uint64_t dialogue_id);
  std::uint64_t dialogue_id() const { return id_; }

 private:
  std::uint64_t id_;
};

// Throws SplitLeakage on the first dialogue_id present in both splits.
void check_disjoint(const std::vector<DialogueSample>& train, const std::vector<DialogueSample>& test);

struct AblationSettings {
  dpm::DpmConfig dpm;
  // Token budget for one-shot inference; nullopt means the model window.
  std::optional<std::size_t> one_shot_window;
  bool complete_dialogues = true;
  bool all_lengths = true;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

EvalReport run_ablation(const model::Model<float>& model, const baselines::Classifier<float>& classifier,
                        const std::vector<DialogueSample>& train, const std::vector<DialogueSample>& test,
                        const AblationSettings& settings);

// Per-seed WA ordering Classifier < SLLM < SLLM-DPM on one setting.
struct OrderingSummary {
  std::size_t seeds = 0;
  std::size_t ordered = 0;
  std::vector<double> dpm_gap;  // DPM minus one-shot WA, per seed
  bool holds(std::size_t required) const { return ordered >= required; }
};
OrderingSummary summarize_ordering(const EvalReport& report, const std::string& setting = kCompleteDialogues);

// --- stepping strategies ----------------------------------------------------

// Mean inference-stream tokens per sentence, markers included.
double mean_sentence_tokens(const std::vector<DialogueSample>& dialogues, const model::Vocabulary& vocabulary,
                            bool keep_emotion_ids);
// round(m * mean) for each multiplier, at least 1.
std::vector<std::size_t> stride_ladder(double mean_sentence, const std::vector<std::size_t>& multipliers);

struct SteppingSettings {
  dpm::DpmConfig dpm;  // stepping fields are overridden per row
  std::vector<std::size_t> strides;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

// Rows "sentence" and "stride-<k>" with WF1, cost and speedup relative to
// sentence stepping; strides above n_limit - n_r are marked infeasible.
EvalReport run_stepping_experiment(const model::Model<float>& model, const std::vector<DialogueSample>& test,
                                   const SteppingSettings& settings);

// --- context window ---------------------------------------------------------

struct ContextSettings {
  std::size_t small_window = 0;
  std::size_t large_window = 0;
  baselines::TruncateSide side = baselines::TruncateSide::kKeepTail;
  bool keep_emotion_ids = true;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

inline std::string window_method(std::size_t window) { return "window-" + std::to_string(window); }

// One-shot inference of each model with its window as the truncation budget.
EvalReport run_context_experiment(const model::Model<float>& small_model, const model::Model<float>& large_model,
                                  const std::vector<DialogueSample>& test, const ContextSettings& settings);

// --- complexity benchmark ---------------------------------------------------

struct BenchConfig {
  std::size_t sentences = 50;
  std::size_t sentence_tokens = 16;
  std::size_t n_r = 128;
  std::size_t n_limit = 2048;
  std::size_t embed_dim = 16;
  std::size_t num_layers = 1;
  std::size_t num_heads = 2;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const BenchConfig& config);
BenchConfig bench_config_from_json(const nlohmann::json& j);

struct BenchResult {
  std::uint64_t dpm_cost_s = 0;
  std::uint64_t dpm_cost_2s = 0;
  std::uint64_t one_shot_cost_s = 0;
  std::uint64_t one_shot_cost_2s = 0;
  std::size_t stream_tokens_s = 0;
  std::size_t stream_tokens_2s = 0;
  double dpm_seconds_s = 0.0;
  double dpm_seconds_2s = 0.0;
  double dpm_ratio() const { return static_cast<double>(dpm_cost_2s) / static_cast<double>(dpm_cost_s); }
  double one_shot_ratio() const {
    return static_cast<double>(one_shot_cost_2s) / static_cast<double>(one_shot_cost_s);
  }
};

// A dialogue of S equal sentences and one of 2S, run through DPM on an
// untrained model; one-shot cost is the single full-length forward.
BenchResult run_complexity_bench(const BenchConfig& config);
nlohmann::json to_json(const BenchResult& result);

// --- desk pipelines ---------------------------------------------------------

// Everything needed to build, train and evaluate one seed from scratch.
struct DeskSetup {
  corpus::GeneratorConfig corpus;
  double train_fraction = 0.6;
  model::ModelConfig model;
  training::TrainConfig training;
  baselines::ClassifierConfig classifier;
  dpm::DpmConfig dpm;
  // One-shot budget; 0 means the model window.
  std::size_t one_shot_window = 0;
  std::vector<std::size_t> stride_multipliers{1, 2, 4, 8};
  // Context experiment: window of the small model (the large one uses model.n_limit).
  std::size_t small_window = 0;
  std::size_t threads = 1;
};

nlohmann::json to_json(const DeskSetup& setup);
// Keys absent from j keep the values of `base`; unknown keys are rejected
// with std::invalid_argument naming the key path.
DeskSetup desk_setup_from_json(const nlohmann::json& j, const DeskSetup& base = {});

// Presets tuned to finish on a laptop CPU.
DeskSetup ablation_preset();
DeskSetup context_preset();

struct SeedRun {
  std::uint64_t seed = 0;
  model::Model<float> model;
  std::vector<DialogueSample> train;
  std::vector<DialogueSample> test;
  training::TrainResult training;
  std::optional<baselines::Classifier<float>> classifier;
  baselines::ClassifierHistory classifier_history;
};

using Progress = std::function<void(const std::string&)>;

// Independent seed streams derived from one run seed: 1 model, 2 training
// adapter, 3 training shuffle, 4 classifier.
std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream);

// Builds the model of the setup, attaches the training adapter and trains it.
std::pair<model::Model<float>, training::TrainResult> train_emotion_model(const DeskSetup& setup,
                                                                          const std::vector<DialogueSample>& train,
                                                                          std::uint64_t seed,
                                                                          const Progress& progress = {});
std::pair<baselines::Classifier<float>, baselines::ClassifierHistory> train_baseline_classifier(
    const DeskSetup& setup, const std::vector<DialogueSample>& train, std::uint64_t seed,
    const Progress& progress = {});

// Generates the corpus, splits it, and trains the emotion model (and the
// classifier when requested) with every seed derived from `seed`.
SeedRun prepare_seed(const DeskSetup& setup, std::uint64_t seed, bool with_classifier, const Progress& progress = {});
// Model of the setup with its window and emotion prefix set to `window`.
SeedRun prepare_context_model(const DeskSetup& setup, std::uint64_t seed, std::size_t window,
                              const Progress& progress = {});

EvalReport ablation_suite(const DeskSetup& setup, const std::vector<std::uint64_t>& seeds,
                          const Progress& progress = {});
EvalReport stepping_suite(const DeskSetup& setup, const std::vector<std::uint64_t>& seeds,
                          const Progress& progress = {});
EvalReport context_suite(const DeskSetup& setup, const std::vector<std::uint64_t>& seeds,
                         const Progress& progress = {});

AblationSettings ablation_settings(const DeskSetup& setup, std::uint64_t seed);

}  // namespace dpmem::eval
