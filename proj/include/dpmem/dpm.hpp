#pragma once

// Dynamic Parameter Memory inference. Context is written sentence by
// sentence into a temporary low-rank adapter through one gradient step per
// schedule step; the closing emotion is then read from a short window.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpmem/corpus.hpp"
#include "dpmem/lora.hpp"
#include "dpmem/model.hpp"
#include "json.hpp"

namespace dpmem::dpm {

using corpus::TokenStream;
using model::Model;
using model::TokenId;
using numerics::Tensor;

enum class Stepping { kSentence, kFixedStride };

std::string to_string(Stepping stepping);
Stepping parse_stepping(const std::string& text);

struct DpmConfig {
  std::size_t n_r = 128;
  Stepping stepping = Stepping::kSentence;
  std::size_t stride = 0;  // tokens per block for kFixedStride
  double learning_rate = 5e-5;
  numerics::OptimizerKind optimizer = numerics::OptimizerKind::kAdam;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  std::uint64_t lora_seed = 0;
  bool keep_emotion_ids = true;
  bool emit_trace = false;
};

void validate(const DpmConfig& config);
nlohmann::json to_json(const DpmConfig& config);
DpmConfig dpm_config_from_json(const nlohmann::json& j);

// Half-open token range.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

struct ScheduledStep {
  Span prefix;
  Span target;
  // Sentence whose tokens form the target; nullopt for stride blocks.
  std::optional<std::size_t> sentence;
  bool operator==(const ScheduledStep&) const = default;
};

// Steps over an inference stream (ending at the final sentence-end marker).
// Sentence mode targets sentences 2..S through their end markers; stride
// mode targets the k-token blocks after the first. Each prefix is the
// min(n_r, available) tokens immediately before its target.
std::vector<ScheduledStep> step_schedule(const TokenStream& stream, const DpmConfig& config);

struct WindowCheck {
  bool ok = true;
  std::size_t n_limit = 0;
  std::size_t n_max = 0;
  std::size_t n_r = 0;
  std::optional<std::size_t> offending_step;
  std::optional<std::size_t> offending_sentence;

  std::string message() const;
};

// ok iff n_limit >= n_max + n_r.
WindowCheck window_check(std::size_t n_limit, std::size_t n_max, std::size_t n_r);
// Uses the longest scheduled target as n_max and names the first offender.
WindowCheck window_check(std::size_t n_limit, const TokenStream& stream, const DpmConfig& config);

class WindowViolation : public std::length_error {
 public:
  explicit WindowViolation(WindowCheck check);
  const WindowCheck& check() const { return check_; }

 private:
  WindowCheck check_;
};

struct StepRecord {
  std::size_t step = 0;
  Span prefix;
  Span target;
  double loss = 0.0;
  std::size_t forward_length = 0;
};

struct DpmTrace {
  std::vector<StepRecord> steps;
  std::size_t final_forward_length = 0;
  std::vector<double> final_distribution;
  std::size_t update_count = 0;

  std::size_t max_forward_length() const;
  // Every forward length in execution order, the final prediction last.
  std::vector<std::size_t> forward_lengths() const;
};

// "step,prefix_len,target_len,L_t,forward_len" rows.
std::string trace_csv(const DpmTrace& trace);

struct DpmResult {
  std::size_t predicted = 0;
  DpmTrace trace;
};

// One teacher-forced forward over [prefix, target], mean next-token
// cross-entropy over the target, then zero_grad/backward/step on the
// temporary adapter. Returns the loss before the update.
template <typename T>
double dpm_step(Model<T>& model, lora::TemporaryLora<T>& temp, std::span<const TokenId> tokens,
                const ScheduledStep& step);

template <typename T>
DpmResult dpm_infer(Model<T>& model, const TokenStream& stream, const DpmConfig& config);

template <typename T>
DpmResult dpm_infer(Model<T>& model, const corpus::DialogueSample& sample, const DpmConfig& config);

// Sentence stepping only: predictions for every prefix view 1..S from one
// pass, identical to running dpm_infer on each view separately.
template <typename T>
std::vector<DpmResult> dpm_infer_prefixes(Model<T>& model, const corpus::DialogueSample& sample,
                                          const DpmConfig& config);

lora::TempLoraOptions temp_lora_options(const DpmConfig& config);

}  // namespace dpmem::dpm
