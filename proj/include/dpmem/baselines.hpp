#pragma once

// The two comparators for DPM: one-shot inference of the emotion model over
// the (possibly truncated) stream, and a bidirectional encoder classifier
// trained directly on the audio codes.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dpmem/corpus.hpp"
#include "dpmem/model.hpp"
#include "json.hpp"

namespace dpmem::baselines {

using corpus::DialogueSample;
using model::Model;
using model::TokenId;
using numerics::Tensor;

enum class TruncateSide { kKeepTail, kKeepHead };

std::string to_string(TruncateSide side);
TruncateSide parse_truncate_side(const std::string& text);

// Applies a token budget to a stream ending at its final sentence-end marker.
// Tail keeping retains the last `budget` tokens; head keeping retains the
// first budget-1 tokens plus the final marker. Both keep the marker.
std::vector<TokenId> truncate_stream(std::span<const TokenId> tokens, std::optional<std::size_t> budget,
                                     TruncateSide side = TruncateSide::kKeepTail);

struct OneShotOptions {
  std::optional<std::size_t> truncate_to;
  TruncateSide side = TruncateSide::kKeepTail;
  bool keep_emotion_ids = true;
};

struct OneShotResult {
  std::size_t predicted = 0;
  std::vector<double> distribution;
  std::size_t forward_length = 0;
  bool truncated = false;
};

// Throws model::WindowExceeded when the (truncated) stream exceeds n_limit.
template <typename T>
OneShotResult one_shot_infer(const Model<T>& model, const DialogueSample& sample, const OneShotOptions& options = {});

// --- classifier -------------------------------------------------------------

struct ClassifierConfig {
  std::size_t embed_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 4;
  // Longest code sequence the encoder reads; longer inputs are truncated.
  std::size_t window = 256;
  // When nonzero, only codes inside this many trailing tokens of the
  // marker-interleaved inference stream are read, so the classifier hears
  // exactly the audio a one-shot model with that window would.
  std::size_t stream_budget = 0;
  std::size_t codebook_size = 256;
  std::size_t num_emotions = 4;
  double learning_rate = 1e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  TruncateSide side = TruncateSide::kKeepTail;
  std::uint64_t seed = 0;
  double init_std = 0.02;
};

void validate(const ClassifierConfig& config);
nlohmann::json to_json(const ClassifierConfig& config);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

// Raw audio codes of every sentence, concatenated, limited to the stream
// budget and cut to the window.
std::vector<std::int32_t> classifier_input(const DialogueSample& sample, const ClassifierConfig& config);

template <typename T>
class Classifier {
 public:
  explicit Classifier(ClassifierConfig config);

  const ClassifierConfig& config() const { return config_; }

  // Head logits [1 x E]. Only the first valid_len codes are read; positions
  // past it are padding and masked out of attention and pooling.
  Tensor<T> logits(std::span<const std::int32_t> codes, std::size_t valid_len) const;
  Tensor<T> logits(std::span<const std::int32_t> codes) const { return logits(codes, codes.size()); }
  // Pooled encoder output [1 x d] (before the head).
  Tensor<T> pooled(std::span<const std::int32_t> codes, std::size_t valid_len) const;

  std::vector<double> predict_proba(const DialogueSample& sample) const;

  struct NamedTensor {
    std::string name;
    Tensor<T> value;
  };
  std::span<const NamedTensor> parameters() const { return parameters_; }
  std::span<NamedTensor> parameters() { return parameters_; }
  std::size_t parameter_count() const;
  const Tensor<T>& parameter(std::string_view name) const;

 private:
  struct LayerIndex {
    std::size_t ln1_gamma, ln1_beta, ln2_gamma, ln2_beta, first_site;
  };

  ClassifierConfig config_;
  std::vector<NamedTensor> parameters_;
  std::vector<std::size_t> site_param_;
  std::vector<LayerIndex> layers_;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::size_t final_gamma_ = 0;
  std::size_t final_beta_ = 0;
  std::size_t head_ = 0;
};

template <typename T>
std::size_t classify(const Classifier<T>& classifier, const DialogueSample& sample);

struct ClassifierEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct ClassifierHistory {
  std::vector<ClassifierEpoch> epochs;
};

class ClassifierAborted : public numerics::NumericalError {
 public:
  ClassifierAborted(std::size_t epoch, std::size_t step, const std::string& what);
};

// Cross-entropy on final-sentence labels; every parameter is trained.
template <typename T>
ClassifierHistory train_classifier(Classifier<T>& classifier, const std::vector<DialogueSample>& dialogues,
                                   const std::function<void(const ClassifierEpoch&)>& on_epoch = {});

}  // namespace dpmem::baselines
