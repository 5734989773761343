#include "dpmem/model.hpp"

#include <algorithm>
#include <random>

#include "dpmem/lora.hpp"
#include "transformer_block.hpp"

namespace dpmem::model {

using numerics::Shape;

// --- Vocabulary -------------------------------------------------------------

TokenId Vocabulary::audio_id(std::size_t code) const {
  if (code >= codebook_size) {
    throw std::out_of_range("audio code " + std::to_string(code) + " outside codebook of " +
                            std::to_string(codebook_size));
  }
  return static_cast<TokenId>(text_stub_size + code);
}

TokenId Vocabulary::emotion_id(std::size_t emotion) const {
  if (emotion >= num_emotions) {
    throw std::out_of_range("emotion " + std::to_string(emotion) + " outside [0, " +
                            std::to_string(num_emotions) + ")");
  }
  return static_cast<TokenId>(text_stub_size + codebook_size + 1 + emotion);
}

std::vector<TokenId> Vocabulary::emotion_ids() const {
  std::vector<TokenId> ids(num_emotions);
  for (std::size_t e = 0; e < num_emotions; ++e) ids[e] = emotion_id(e);
  return ids;
}

bool Vocabulary::is_audio(TokenId id) const {
  return id >= static_cast<TokenId>(text_stub_size) && id < audio_end_id();
}

bool Vocabulary::is_emotion(TokenId id) const {
  return id > audio_end_id() && static_cast<std::size_t>(id) < total();
}

std::size_t Vocabulary::emotion_of(TokenId id) const {
  if (!is_emotion(id)) throw std::invalid_argument("token " + std::to_string(id) + " is not an emotion ID");
  return static_cast<std::size_t>(id - audio_end_id() - 1);
}

std::size_t Vocabulary::code_of(TokenId id) const {
  if (!is_audio(id)) throw std::invalid_argument("token " + std::to_string(id) + " is not an audio code");
  return static_cast<std::size_t>(id) - text_stub_size;
}

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::kTokenEmbedding: return "token_embedding";
    case ParamGroup::kPositionEmbedding: return "position_embedding";
    case ParamGroup::kAttention: return "attention";
    case ParamGroup::kMlp: return "mlp";
    case ParamGroup::kNorm: return "norm";
    case ParamGroup::kHead: return "head";
  }
  return "unknown";
}

namespace {

ParamGroup parse_group(const std::string& text) {
  for (auto g : {ParamGroup::kTokenEmbedding, ParamGroup::kPositionEmbedding, ParamGroup::kAttention,
                 ParamGroup::kMlp, ParamGroup::kNorm, ParamGroup::kHead}) {
    if (to_string(g) == text) return g;
  }
  throw std::invalid_argument("unknown parameter group '" + text + "'");
}

}  // namespace

void validate(const ModelConfig& c) {
  if (c.vocabulary.codebook_size == 0) throw std::invalid_argument("model config: codebook_size must be positive");
  if (c.vocabulary.num_emotions == 0) throw std::invalid_argument("model config: need at least one emotion");
  if (c.n_limit < 2) {
    throw std::invalid_argument("model config: n_limit must be at least 2, got " + std::to_string(c.n_limit));
  }
  if (c.embed_dim == 0 || c.num_layers == 0 || c.num_heads == 0 || c.mlp_ratio == 0) {
    throw std::invalid_argument("model config: dimensions must be positive");
  }
  if (c.embed_dim % c.num_heads != 0) {
    throw std::invalid_argument("model config: embed_dim " + std::to_string(c.embed_dim) +
                                " not divisible by num_heads " + std::to_string(c.num_heads));
  }
  if (!(c.init_std > 0.0)) throw std::invalid_argument("model config: init_std must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json groups = nlohmann::json::array();
  for (auto g : c.trainable_groups) groups.push_back(to_string(g));
  return {
      {"embed_dim", c.embed_dim},
      {"num_layers", c.num_layers},
      {"num_heads", c.num_heads},
      {"mlp_ratio", c.mlp_ratio},
      {"n_limit", c.n_limit},
      {"seed", c.seed},
      {"init_std", c.init_std},
      {"trainable_groups", groups},
      {"vocabulary",
       {{"text_stub_size", c.vocabulary.text_stub_size},
        {"codebook_size", c.vocabulary.codebook_size},
        {"num_emotions", c.vocabulary.num_emotions}}},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.n_limit = j.value("n_limit", c.n_limit);
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
  if (j.contains("trainable_groups")) {
    for (const auto& g : j.at("trainable_groups")) c.trainable_groups.push_back(parse_group(g.get<std::string>()));
  }
  if (j.contains("vocabulary")) {
    const auto& v = j.at("vocabulary");
    c.vocabulary.text_stub_size = v.value("text_stub_size", c.vocabulary.text_stub_size);
    c.vocabulary.codebook_size = v.value("codebook_size", c.vocabulary.codebook_size);
    c.vocabulary.num_emotions = v.value("num_emotions", c.vocabulary.num_emotions);
  }
  return c;
}

WindowExceeded::WindowExceeded(std::size_t length, std::size_t limit)
    : std::length_error("input of " + std::to_string(length) + " tokens exceeds the context window of " +
                        std::to_string(limit)),
      length_(length),
      limit_(limit) {}

// --- Model ------------------------------------------------------------------

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
  validate(config_);
  const std::size_t d = config_.embed_dim;
  const std::size_t vocab = config_.vocabulary.total();
  const std::size_t hidden = d * config_.mlp_ratio;
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, config_.init_std);

  auto make = [&](std::string name, ParamGroup group, Shape shape, bool gaussian, double constant) {
    std::vector<T> values(numerics::element_count(shape));
    for (auto& v : values) v = static_cast<T>(gaussian ? normal(rng) : constant);
    parameters_.push_back({std::move(name), group, Tensor<T>::from(std::move(shape), std::move(values))});
    return parameters_.size() - 1;
  };
  auto make_site = [&](std::string name, ParamGroup group, std::size_t in, std::size_t out) {
    std::size_t index = make(name, group, {out, in}, true, 0.0);
    sites_.push_back({std::move(name), in, out});
    site_param_.push_back(index);
    return sites_.size() - 1;
  };

  token_embedding_ = make("token_embedding", ParamGroup::kTokenEmbedding, {vocab, d}, true, 0.0);
  position_embedding_ = make("position_embedding", ParamGroup::kPositionEmbedding, {config_.n_limit, d}, true, 0.0);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerIndex li{};
    li.ln1_gamma = make(p + "ln1.gamma", ParamGroup::kNorm, {d}, false, 1.0);
    li.ln1_beta = make(p + "ln1.beta", ParamGroup::kNorm, {d}, false, 0.0);
    li.site_q = make_site(p + "attn.q", ParamGroup::kAttention, d, d);
    li.site_k = make_site(p + "attn.k", ParamGroup::kAttention, d, d);
    li.site_v = make_site(p + "attn.v", ParamGroup::kAttention, d, d);
    li.site_o = make_site(p + "attn.o", ParamGroup::kAttention, d, d);
    li.ln2_gamma = make(p + "ln2.gamma", ParamGroup::kNorm, {d}, false, 1.0);
    li.ln2_beta = make(p + "ln2.beta", ParamGroup::kNorm, {d}, false, 0.0);
    li.site_up = make_site(p + "mlp.up", ParamGroup::kMlp, d, hidden);
    li.site_down = make_site(p + "mlp.down", ParamGroup::kMlp, hidden, d);
    layers_.push_back(li);
  }
  final_gamma_ = make("final_norm.gamma", ParamGroup::kNorm, {d}, false, 1.0);
  final_beta_ = make("final_norm.beta", ParamGroup::kNorm, {d}, false, 0.0);
  head_site_ = make_site("head", ParamGroup::kHead, d, vocab);

  for (auto& p : parameters_) {
    const bool trainable = std::find(config_.trainable_groups.begin(), config_.trainable_groups.end(),
                                     p.group) != config_.trainable_groups.end();
    p.value.set_requires_grad(trainable);
  }
}

template <typename T>
const Parameter<T>& Model<T>::parameter(std::string_view name) const {
  for (const auto& p : parameters_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

template <typename T>
Parameter<T>& Model<T>::parameter(std::string_view name) {
  return const_cast<Parameter<T>&>(std::as_const(*this).parameter(name));
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters_) total += p.value.size();
  return total;
}

template <typename T>
void Model<T>::set_group_trainable(ParamGroup group, bool trainable) {
  for (auto& p : parameters_) {
    if (p.group == group) p.value.set_requires_grad(trainable);
  }
}

template <typename T>
void Model<T>::freeze_base() {
  for (auto& p : parameters_) p.value.set_requires_grad(false);
}

template <typename T>
bool Model<T>::base_frozen() const {
  return std::none_of(parameters_.begin(), parameters_.end(),
                      [](const Parameter<T>& p) { return p.value.requires_grad(); });
}

template <typename T>
const Tensor<T>& Model<T>::site_weight(std::size_t site) const {
  return parameters_.at(site_param_.at(site)).value;
}

template <typename T>
Tensor<T>& Model<T>::site_weight(std::size_t site) {
  return parameters_.at(site_param_.at(site)).value;
}

template <typename T>
void Model<T>::attach_adapter(std::shared_ptr<lora::LoraAdapter<T>> adapter) {
  if (!adapter) throw std::invalid_argument("attach_adapter: null adapter");
  if (has_adapter(adapter->name())) {
    throw std::invalid_argument("adapter '" + adapter->name() + "' is already attached");
  }
  if (adapter->site_count() != sites_.size()) {
    throw std::invalid_argument("adapter '" + adapter->name() + "' covers " + std::to_string(adapter->site_count()) +
                                " sites, model has " + std::to_string(sites_.size()));
  }
  for (std::size_t s = 0; s < sites_.size(); ++s) {
    const auto& site = adapter->sites()[s];
    if (site.name != sites_[s].name || site.in_features != sites_[s].in_features ||
        site.out_features != sites_[s].out_features) {
      throw std::invalid_argument("adapter '" + adapter->name() + "' site '" + site.name +
                                  "' does not match model site '" + sites_[s].name + "'");
    }
  }
  adapters_.push_back(std::move(adapter));
}

template <typename T>
void Model<T>::detach_adapter(const std::string& name) {
  auto it = std::find_if(adapters_.begin(), adapters_.end(), [&](const auto& a) { return a->name() == name; });
  if (it == adapters_.end()) throw std::invalid_argument("no adapter named '" + name + "' is attached");
  adapters_.erase(it);
}

template <typename T>
bool Model<T>::has_adapter(const std::string& name) const {
  return std::any_of(adapters_.begin(), adapters_.end(), [&](const auto& a) { return a->name() == name; });
}

template <typename T>
std::shared_ptr<lora::LoraAdapter<T>> Model<T>::adapter(const std::string& name) const {
  for (const auto& a : adapters_) {
    if (a->name() == name) return a;
  }
  return nullptr;
}

template <typename T>
std::vector<const lora::LoraAdapter<T>*> Model<T>::attached_adapters() const {
  std::vector<const lora::LoraAdapter<T>*> out;
  out.reserve(adapters_.size());
  for (const auto& a : adapters_) out.push_back(a.get());
  return out;
}

template <typename T>
Tensor<T> Model<T>::linear(const Tensor<T>& x, std::size_t site, AdapterSet<T> adapters) const {
  Tensor<T> y = numerics::matmul(x, site_weight(site), true);
  for (const auto* adapter : adapters) y = numerics::add(y, adapter->apply(site, x));
  return y;
}

template <typename T>
Tensor<T> Model<T>::forward(std::span<const TokenId> tokens) const {
  auto adapters = attached_adapters();
  return forward(tokens, AdapterSet<T>(adapters));
}

template <typename T>
Tensor<T> Model<T>::forward(std::span<const TokenId> tokens, AdapterSet<T> adapters) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > config_.n_limit) throw WindowExceeded(tokens.size(), config_.n_limit);
  const auto total = static_cast<TokenId>(config_.vocabulary.total());
  for (TokenId id : tokens) {
    if (id < 0 || id >= total) {
      throw std::out_of_range("forward: token " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(total));
    }
  }
  const std::size_t n = tokens.size();
  Tensor<T> x = numerics::add(numerics::embedding(parameters_[token_embedding_].value, tokens),
                              numerics::slice_rows(parameters_[position_embedding_].value, 0, n));
  for (const auto& li : layers_) {
    detail::BlockNorms<T> norms{parameters_[li.ln1_gamma].value, parameters_[li.ln1_beta].value,
                                parameters_[li.ln2_gamma].value, parameters_[li.ln2_beta].value};
    x = detail::block_forward(x, norms, config_.num_heads, true, n,
                              [&](const Tensor<T>& in, std::size_t offset) {
                                return linear(in, li.site_q + offset, adapters);
                              });
  }
  x = numerics::layer_norm(x, parameters_[final_gamma_].value, parameters_[final_beta_].value);
  return linear(x, head_site_, adapters);
}

template <typename T>
Tensor<T> gather_emotion_logits(const Tensor<T>& logits_row, const Vocabulary& vocabulary) {
  if (logits_row.cols() != vocabulary.total()) {
    throw numerics::ShapeError("emotion logits: expected width " + std::to_string(vocabulary.total()) +
                               ", got " + numerics::to_string(logits_row.shape()));
  }
  const auto ids = vocabulary.emotion_ids();
  return numerics::gather_columns(logits_row, std::span<const TokenId>(ids));
}

template <typename T>
Tensor<T> constrained_emotion_logits(const Tensor<T>& logits_row, const Vocabulary& vocabulary) {
  return numerics::softmax_rows(gather_emotion_logits(logits_row, vocabulary));
}

template class Model<float>;
template class Model<double>;
template Tensor<float> gather_emotion_logits(const Tensor<float>&, const Vocabulary&);
template Tensor<double> gather_emotion_logits(const Tensor<double>&, const Vocabulary&);
template Tensor<float> constrained_emotion_logits(const Tensor<float>&, const Vocabulary&);
template Tensor<double> constrained_emotion_logits(const Tensor<double>&, const Vocabulary&);

}  // namespace dpmem::model
