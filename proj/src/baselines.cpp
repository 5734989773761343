#include "dpmem/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "transformer_block.hpp"

namespace dpmem::baselines {

std::string to_string(TruncateSide side) { return side == TruncateSide::kKeepTail ? "tail" : "head"; }

TruncateSide parse_truncate_side(const std::string& text) {
  if (text == "tail") return TruncateSide::kKeepTail;
  if (text == "head") return TruncateSide::kKeepHead;
  throw std::invalid_argument("unknown truncation side '" + text + "' (expected tail or head)");
}

std::vector<TokenId> truncate_stream(std::span<const TokenId> tokens, std::optional<std::size_t> budget,
                                     TruncateSide side) {
  if (!budget || *budget >= tokens.size()) return {tokens.begin(), tokens.end()};
  if (*budget == 0) throw std::invalid_argument("truncate_stream: budget must be positive");
  if (side == TruncateSide::kKeepTail) return {tokens.end() - static_cast<std::ptrdiff_t>(*budget), tokens.end()};
  std::vector<TokenId> out(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(*budget - 1));
  out.push_back(tokens.back());
  return out;
}

template <typename T>
OneShotResult one_shot_infer(const Model<T>& model, const DialogueSample& sample, const OneShotOptions& options) {
  const auto stream =
      corpus::inference_stream(sample, model.vocabulary(), {.keep_emotion_ids = options.keep_emotion_ids});
  const auto tokens = truncate_stream(stream.tokens, options.truncate_to, options.side);
  if (tokens.size() > model.n_limit()) throw model::WindowExceeded(tokens.size(), model.n_limit());
  numerics::NoGradGuard guard;
  Tensor<T> logits = model.forward(tokens);
  const std::size_t last = logits.rows() - 1;
  Tensor<T> probs =
      model::constrained_emotion_logits(numerics::slice_rows(logits, last, last + 1), model.vocabulary());
  OneShotResult r;
  r.distribution.assign(probs.data().begin(), probs.data().end());
  r.predicted = static_cast<std::size_t>(std::max_element(r.distribution.begin(), r.distribution.end()) -
                                         r.distribution.begin());
  r.forward_length = tokens.size();
  r.truncated = tokens.size() < stream.tokens.size();
  return r;
}

// --- classifier -------------------------------------------------------------

void validate(const ClassifierConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("classifier config: " + m); };
  if (c.embed_dim == 0 || c.num_heads == 0 || c.embed_dim % c.num_heads != 0) {
    fail("embed_dim must be a positive multiple of num_heads");
  }
  if (c.mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (c.window == 0) fail("window must be positive");
  if (c.codebook_size == 0 || c.num_emotions == 0) fail("codebook and emotion counts must be positive");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) fail("learning rate must be finite and >= 0");
  if (c.batch_size == 0) fail("batch size must be positive");
}

nlohmann::json to_json(const ClassifierConfig& c) {
  return {{"embed_dim", c.embed_dim},       {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},       {"mlp_ratio", c.mlp_ratio},
          {"window", c.window},             {"stream_budget", c.stream_budget},
          {"codebook_size", c.codebook_size},
          {"num_emotions", c.num_emotions}, {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},             {"batch_size", c.batch_size},
          {"side", to_string(c.side)},      {"seed", c.seed},
          {"init_std", c.init_std}};
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.window = j.value("window", c.window);
  c.stream_budget = j.value("stream_budget", c.stream_budget);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.num_emotions = j.value("num_emotions", c.num_emotions);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("side")) c.side = parse_truncate_side(j.at("side").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

std::vector<std::int32_t> classifier_input(const DialogueSample& sample, const ClassifierConfig& config) {
  std::vector<std::int32_t> codes;
  for (const auto& s : sample.sentences) codes.insert(codes.end(), s.begin(), s.end());
  if (config.stream_budget > 0) {
    // Walk the stream backwards: the final sentence carries its end marker,
    // earlier ones an end marker and an emotion identifier.
    std::size_t budget = config.stream_budget;
    std::size_t keep = 0;
    for (std::size_t i = sample.sentences.size(); i-- > 0 && budget > 0;) {
      const std::size_t markers = i + 1 == sample.sentences.size() ? 1 : 2;
      budget -= std::min(budget, markers);
      const std::size_t take = std::min(budget, sample.sentences[i].size());
      keep += take;
      budget -= take;
    }
    codes.erase(codes.begin(), codes.end() - static_cast<std::ptrdiff_t>(keep));
  }
  if (codes.size() <= config.window) return codes;
  if (config.side == TruncateSide::kKeepTail) {
    return {codes.end() - static_cast<std::ptrdiff_t>(config.window), codes.end()};
  }
  codes.resize(config.window);
  return codes;
}

template <typename T>
Classifier<T>::Classifier(ClassifierConfig config) : config_(std::move(config)) {
  validate(config_);
  const std::size_t d = config_.embed_dim;
  const std::size_t hidden = d * config_.mlp_ratio;
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, config_.init_std);
  auto make = [&](std::string name, numerics::Shape shape, bool gaussian, double constant) {
    std::vector<T> values(numerics::element_count(shape));
    for (auto& v : values) v = static_cast<T>(gaussian ? normal(rng) : constant);
    parameters_.push_back({std::move(name), Tensor<T>::from(std::move(shape), std::move(values), true)});
    return parameters_.size() - 1;
  };
  token_embedding_ = make("token_embedding", {config_.codebook_size, d}, true, 0.0);
  position_embedding_ = make("position_embedding", {config_.window, d}, true, 0.0);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerIndex li{};
    li.ln1_gamma = make(p + "ln1.gamma", {d}, false, 1.0);
    li.ln1_beta = make(p + "ln1.beta", {d}, false, 0.0);
    li.ln2_gamma = make(p + "ln2.gamma", {d}, false, 1.0);
    li.ln2_beta = make(p + "ln2.beta", {d}, false, 0.0);
    li.first_site = site_param_.size();
    site_param_.push_back(make(p + "attn.q", {d, d}, true, 0.0));
    site_param_.push_back(make(p + "attn.k", {d, d}, true, 0.0));
    site_param_.push_back(make(p + "attn.v", {d, d}, true, 0.0));
    site_param_.push_back(make(p + "attn.o", {d, d}, true, 0.0));
    site_param_.push_back(make(p + "mlp.up", {hidden, d}, true, 0.0));
    site_param_.push_back(make(p + "mlp.down", {d, hidden}, true, 0.0));
    layers_.push_back(li);
  }
  final_gamma_ = make("final_norm.gamma", {d}, false, 1.0);
  final_beta_ = make("final_norm.beta", {d}, false, 0.0);
  head_ = make("head", {config_.num_emotions, d}, true, 0.0);
}

template <typename T>
std::size_t Classifier<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters_) total += p.value.size();
  return total;
}

template <typename T>
const Tensor<T>& Classifier<T>::parameter(std::string_view name) const {
  for (const auto& p : parameters_) {
    if (p.name == name) return p.value;
  }
  throw std::out_of_range("classifier has no parameter named '" + std::string(name) + "'");
}

template <typename T>
Tensor<T> Classifier<T>::pooled(std::span<const std::int32_t> codes, std::size_t valid_len) const {
  if (codes.empty() || valid_len == 0 || valid_len > codes.size()) {
    throw std::invalid_argument("classifier: need 1 <= valid_len <= input length");
  }
  if (codes.size() > config_.window) throw model::WindowExceeded(codes.size(), config_.window);
  for (std::int32_t c : codes) {
    if (c < 0 || static_cast<std::size_t>(c) >= config_.codebook_size) {
      throw std::out_of_range("classifier: code " + std::to_string(c) + " outside codebook");
    }
  }
  const std::size_t n = codes.size();
  auto value = [this](std::size_t i) -> const Tensor<T>& { return parameters_[i].value; };
  Tensor<T> x = numerics::add(numerics::embedding(value(token_embedding_), codes),
                              numerics::slice_rows(value(position_embedding_), 0, n));
  for (const auto& li : layers_) {
    detail::BlockNorms<T> norms{value(li.ln1_gamma), value(li.ln1_beta), value(li.ln2_gamma), value(li.ln2_beta)};
    x = detail::block_forward(x, norms, config_.num_heads, false, valid_len,
                              [&](const Tensor<T>& in, std::size_t offset) {
                                return numerics::matmul(in, value(site_param_[li.first_site + offset]), true);
                              });
  }
  x = numerics::layer_norm(x, value(final_gamma_), value(final_beta_));
  return numerics::mean_rows(x, valid_len);
}

template <typename T>
Tensor<T> Classifier<T>::logits(std::span<const std::int32_t> codes, std::size_t valid_len) const {
  return numerics::matmul(pooled(codes, valid_len), parameters_[head_].value, true);
}

template <typename T>
std::vector<double> Classifier<T>::predict_proba(const DialogueSample& sample) const {
  numerics::NoGradGuard guard;
  const auto codes = classifier_input(sample, config_);
  Tensor<T> probs = numerics::softmax_rows(logits(codes));
  return {probs.data().begin(), probs.data().end()};
}

template <typename T>
std::size_t classify(const Classifier<T>& classifier, const DialogueSample& sample) {
  const auto p = classifier.predict_proba(sample);
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

ClassifierAborted::ClassifierAborted(std::size_t epoch, std::size_t step, const std::string& what)
    : numerics::NumericalError("classifier training aborted at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + ": " + what) {}

template <typename T>
ClassifierHistory train_classifier(Classifier<T>& classifier, const std::vector<DialogueSample>& dialogues,
                                   const std::function<void(const ClassifierEpoch&)>& on_epoch) {
  const auto& config = classifier.config();
  if (dialogues.empty()) throw std::invalid_argument("train_classifier: empty training set");
  std::vector<std::vector<std::int32_t>> inputs;
  std::vector<std::int32_t> labels;
  for (const auto& d : dialogues) {
    corpus::validate(d, config.codebook_size, config.num_emotions);
    inputs.push_back(classifier_input(d, config));
    labels.push_back(static_cast<std::int32_t>(d.final_emotion()));
  }
  std::vector<Tensor<T>> params;
  for (const auto& p : classifier.parameters()) params.push_back(p.value);
  numerics::OptimizerSettings settings;
  settings.learning_rate = config.learning_rate;
  numerics::Optimizer<T> optimizer(settings, params);

  std::vector<std::size_t> order(inputs.size());
  std::mt19937_64 rng(config.seed ^ 0x5deece66dULL);
  ClassifierHistory history;
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t correct = 0;
    optimizer.zero_grad();
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t i = order[k];
      Tensor<T> logits = classifier.logits(inputs[i]);
      Tensor<T> loss = numerics::cross_entropy(logits, labels[i]);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw ClassifierAborted(epoch, steps, "non-finite loss on dialogue " + std::to_string(dialogues[i].dialogue_id));
      }
      total += value;
      auto row = logits.data();
      if (static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i]) ++correct;
      const std::size_t batch_begin = k - k % config.batch_size;
      const std::size_t this_batch = std::min(config.batch_size, order.size() - batch_begin);
      numerics::backward(numerics::scale(loss, T(1) / static_cast<T>(this_batch)));
      if (k + 1 == batch_begin + this_batch) {
        optimizer.step();
        optimizer.zero_grad();
        ++steps;
      }
    }
    ClassifierEpoch record{epoch, total / static_cast<double>(order.size()),
                           static_cast<double>(correct) / static_cast<double>(order.size())};
    history.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return history;
}

#define DPMEM_INSTANTIATE(T)                                                                           \
  template OneShotResult one_shot_infer<T>(const Model<T>&, const DialogueSample&, const OneShotOptions&); \
  template class Classifier<T>;                                                                        \
  template std::size_t classify<T>(const Classifier<T>&, const DialogueSample&);                       \
  template ClassifierHistory train_classifier<T>(Classifier<T>&, const std::vector<DialogueSample>&,   \
                                                 const std::function<void(const ClassifierEpoch&)>&);

DPMEM_INSTANTIATE(float)
DPMEM_INSTANTIATE(double)

#undef DPMEM_INSTANTIATE

}  // namespace dpmem::baselines
