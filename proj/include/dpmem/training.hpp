#pragma once

// Dual-objective training of the emotion model: next-token prediction over
// audio spans ending at each sentence-end marker, plus emotion prediction
// constrained to the emotion identifiers, averaged into one loss.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dpmem/corpus.hpp"
#include "dpmem/lora.hpp"
#include "dpmem/model.hpp"
#include "json.hpp"

namespace dpmem::training {

using corpus::TokenStream;
using model::Model;
using numerics::Tensor;

struct TrainConfig {
  std::size_t n_o = 64;
  std::size_t n_p = 128;
  std::size_t n_q = 128;
  double learning_rate = 5e-5;
  std::size_t epochs = 20;
  // Sentence endings accumulated per optimizer step.
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  numerics::OptimizerKind optimizer = numerics::OptimizerKind::kAdam;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  bool keep_emotion_ids = true;
  bool shuffle = true;
};

void validate(const TrainConfig& config, std::size_t n_limit);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Half-open index ranges into a token stream. The target ends at the
// sentence-end marker inclusive; the prefix abuts it on the left.
struct ArSpan {
  std::size_t prefix_begin = 0;
  std::size_t target_begin = 0;
  std::size_t end = 0;

  std::size_t prefix_length() const { return target_begin - prefix_begin; }
  std::size_t target_length() const { return end - target_begin; }
  std::size_t length() const { return end - prefix_begin; }
  bool operator==(const ArSpan&) const = default;
};

// T is the index of a sentence-end marker; n is the number of tokens
// available up to and including T, so the stream is assumed to start at T+1-n.
ArSpan select_ar_span(std::size_t T, std::size_t n, std::size_t n_o, std::size_t n_p);

// Mean next-token cross-entropy over the target positions of [prefix, target].
// A target token at the first window position has no context and is not
// scored; at least one target position must remain.
template <typename T>
Tensor<T> autoregressive_loss(const Model<T>& model, std::span<const model::TokenId> sequence, const ArSpan& span);

// Cross-entropy of the constrained emotion distribution read at end_index,
// over the min(n_q, end_index+1) tokens ending there.
template <typename T>
Tensor<T> emotion_loss(const Model<T>& model, std::span<const model::TokenId> sequence, std::size_t end_index,
                       std::size_t n_q, std::size_t label);

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_a, const Tensor<T>& l_e);
double total_loss(double l_a, double l_e);

template <typename T>
struct EndingLoss {
  Tensor<T> l_a;
  Tensor<T> l_e;
  Tensor<T> total;
};

// Both objectives at one sentence ending. A single forward serves both when
// the two windows coincide.
template <typename T>
EndingLoss<T> ending_loss(const Model<T>& model, const TokenStream& stream, std::size_t sentence,
                          const TrainConfig& config);

struct LossStats {
  double l = 0.0;
  double l_a = 0.0;
  double l_e = 0.0;
  std::size_t endings = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  LossStats stats;
};

class TrainingAborted : public numerics::NumericalError {
 public:
  TrainingAborted(std::size_t epoch, std::size_t step, const std::string& what);
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t epoch_;
  std::size_t step_;
};

// Mean losses over every sentence ending, without recording a tape.
template <typename T>
LossStats evaluate_losses(const Model<T>& model, const std::vector<TokenStream>& streams, const TrainConfig& config);

struct TrainResult {
  // Evaluation before the first update (epoch 0).
  LossStats initial;
  // Running means of the losses seen while training each epoch.
  std::vector<EpochRecord> history;
  std::size_t optimizer_steps = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

std::vector<TokenStream> preprocess_all(const std::vector<corpus::DialogueSample>& dialogues,
                                        const model::Vocabulary& vocabulary, bool keep_emotion_ids);

// Trains only the attached adapter named lora::kTrainingAdapterName, which
// must be present and trainable. Freezes it again on return.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<corpus::DialogueSample>& dialogues, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

// "epoch,L,L_a,L_e" rows, epoch 0 being the initial evaluation.
std::string metrics_csv(const TrainResult& result);

}  // namespace dpmem::training
