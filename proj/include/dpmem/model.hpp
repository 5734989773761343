#pragma once

// Decoder-only causal transformer over a partitioned token vocabulary
// (text stub, audio codebook, sentence-end marker, emotion identifiers).
// Every linear layer is a named site that low-rank adapters can hook.

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpmem/numerics.hpp"
#include "json.hpp"

namespace dpmem::lora {
template <typename T>
class LoraAdapter;
}  // namespace dpmem::lora

namespace dpmem::model {

using TokenId = std::int32_t;
using numerics::Tensor;

// ID layout, in order: text stub, audio codes, audio_end, emotions.
struct Vocabulary {
  std::size_t text_stub_size = 0;
  std::size_t codebook_size = 256;
  std::size_t num_emotions = 4;

  std::size_t total() const { return text_stub_size + codebook_size + 1 + num_emotions; }
  TokenId audio_id(std::size_t code) const;
  TokenId audio_end_id() const { return static_cast<TokenId>(text_stub_size + codebook_size); }
  TokenId emotion_id(std::size_t emotion) const;
  std::vector<TokenId> emotion_ids() const;

  bool is_audio(TokenId id) const;
  bool is_emotion(TokenId id) const;
  // Emotion index for an emotion ID; throws for anything else.
  std::size_t emotion_of(TokenId id) const;
  std::size_t code_of(TokenId id) const;

  bool operator==(const Vocabulary&) const = default;
};

enum class ParamGroup { kTokenEmbedding, kPositionEmbedding, kAttention, kMlp, kNorm, kHead };

std::string to_string(ParamGroup group);

struct ModelConfig {
  std::size_t embed_dim = 128;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t n_limit = 256;
  Vocabulary vocabulary;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  // Groups left trainable after build; everything else is frozen.
  std::vector<ParamGroup> trainable_groups;
};

void validate(const ModelConfig& config);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

class WindowExceeded : public std::length_error {
 public:
  WindowExceeded(std::size_t length, std::size_t limit);
  std::size_t length() const { return length_; }
  std::size_t limit() const { return limit_; }

 private:
  std::size_t length_;
  std::size_t limit_;
};

struct LinearSite {
  std::string name;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
};

template <typename T>
struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor<T> value;
};

template <typename T>
using AdapterSet = std::span<const lora::LoraAdapter<T>* const>;

template <typename T>
class Model {
 public:
  // build_model: seeded, deterministic initialisation.
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return config_.vocabulary; }
  std::size_t n_limit() const { return config_.n_limit; }

  // Logits [len x vocabulary.total()] under the currently attached adapters.
  Tensor<T> forward(std::span<const TokenId> tokens) const;
  Tensor<T> forward(std::span<const TokenId> tokens, AdapterSet<T> adapters) const;

  std::span<const Parameter<T>> parameters() const { return parameters_; }
  std::span<Parameter<T>> parameters() { return parameters_; }
  const Parameter<T>& parameter(std::string_view name) const;
  Parameter<T>& parameter(std::string_view name);
  std::size_t parameter_count() const;

  void set_group_trainable(ParamGroup group, bool trainable);
  void freeze_base();
  bool base_frozen() const;

  const std::vector<LinearSite>& linear_sites() const { return sites_; }
  // Weight of a linear site, [out_features x in_features].
  const Tensor<T>& site_weight(std::size_t site) const;
  Tensor<T>& site_weight(std::size_t site);

  // Adapter registry. attach throws on a duplicate name, detach on an unknown one.
  void attach_adapter(std::shared_ptr<lora::LoraAdapter<T>> adapter);
  void detach_adapter(const std::string& name);
  bool has_adapter(const std::string& name) const;
  std::shared_ptr<lora::LoraAdapter<T>> adapter(const std::string& name) const;
  std::vector<const lora::LoraAdapter<T>*> attached_adapters() const;

 private:
  struct LayerIndex {
    std::size_t ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    std::size_t site_q, site_k, site_v, site_o, site_up, site_down;
  };

  Tensor<T> linear(const Tensor<T>& x, std::size_t site, AdapterSet<T> adapters) const;

  ModelConfig config_;
  std::vector<Parameter<T>> parameters_;
  std::vector<LinearSite> sites_;
  std::vector<std::size_t> site_param_;
  std::vector<LayerIndex> layers_;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::size_t final_gamma_ = 0;
  std::size_t final_beta_ = 0;
  std::size_t head_site_ = 0;
  std::vector<std::shared_ptr<lora::LoraAdapter<T>>> adapters_;
};

// Softmax over the emotion-ID entries of one row of full-vocabulary logits.
// Returns [1 x E] probabilities.
template <typename T>
Tensor<T> constrained_emotion_logits(const Tensor<T>& logits_row, const Vocabulary& vocabulary);

// Same selection without the softmax; input to the emotion cross-entropy.
template <typename T>
Tensor<T> gather_emotion_logits(const Tensor<T>& logits_row, const Vocabulary& vocabulary);

}  // namespace dpmem::model
