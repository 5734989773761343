#include "dpmem/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace dpmem::training {

void validate(const TrainConfig& c, std::size_t n_limit) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (c.n_o == 0) fail("n_o must be at least 1");
  if (c.n_q == 0) fail("n_q must be at least 1");
  if (c.n_o + c.n_p > n_limit) {
    fail("n_o + n_p = " + std::to_string(c.n_o + c.n_p) + " exceeds n_limit = " + std::to_string(n_limit));
  }
  if (c.n_q > n_limit) fail("n_q = " + std::to_string(c.n_q) + " exceeds n_limit = " + std::to_string(n_limit));
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) fail("learning rate must be finite and >= 0");
  if (c.batch_size == 0) fail("batch size must be positive");
  if (c.lora_rank == 0 || !(c.lora_alpha > 0.0)) fail("adapter rank and alpha must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"n_o", c.n_o},
          {"n_p", c.n_p},
          {"n_q", c.n_q},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"optimizer", numerics::to_string(c.optimizer)},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"keep_emotion_ids", c.keep_emotion_ids},
          {"shuffle", c.shuffle}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.n_o = j.value("n_o", c.n_o);
  c.n_p = j.value("n_p", c.n_p);
  c.n_q = j.value("n_q", c.n_q);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("optimizer")) c.optimizer = numerics::parse_optimizer_kind(j.at("optimizer").get<std::string>());
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
  c.keep_emotion_ids = j.value("keep_emotion_ids", c.keep_emotion_ids);
  c.shuffle = j.value("shuffle", c.shuffle);
  return c;
}

ArSpan select_ar_span(std::size_t T, std::size_t n, std::size_t n_o, std::size_t n_p) {
  if (n == 0 || n > T + 1) {
    throw std::invalid_argument("select_ar_span: available history " + std::to_string(n) +
                                " is inconsistent with end position " + std::to_string(T));
  }
  std::size_t target = n_o;
  std::size_t prefix = n_p;
  if (n < n_o) {
    target = n;
    prefix = 0;
  } else if (n < n_o + n_p) {
    prefix = n - n_o;
  }
  ArSpan span;
  span.end = T + 1;
  span.target_begin = span.end - target;
  span.prefix_begin = span.target_begin - prefix;
  return span;
}

namespace {

template <typename T>
Tensor<T> ar_loss_from_logits(const Tensor<T>& logits, std::span<const model::TokenId> sequence, const ArSpan& span) {
  const std::size_t first = std::max(span.target_begin, span.prefix_begin + 1);
  if (first >= span.end) {
    throw std::invalid_argument("autoregressive_loss: span [" + std::to_string(span.prefix_begin) + ", " +
                                std::to_string(span.end) + ") has no target token with context");
  }
  std::vector<std::int32_t> targets(sequence.begin() + static_cast<std::ptrdiff_t>(first),
                                    sequence.begin() + static_cast<std::ptrdiff_t>(span.end));
  Tensor<T> rows = numerics::slice_rows(logits, first - span.prefix_begin - 1, span.end - span.prefix_begin - 1);
  return numerics::cross_entropy_rows(rows, targets);
}

template <typename T>
Tensor<T> emotion_loss_from_logits(const Tensor<T>& logits, const model::Vocabulary& vocabulary, std::size_t label) {
  if (label >= vocabulary.num_emotions) {
    throw std::invalid_argument("emotion_loss: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(vocabulary.num_emotions) + ")");
  }
  const std::size_t last = logits.rows() - 1;
  Tensor<T> row = numerics::slice_rows(logits, last, last + 1);
  return numerics::cross_entropy(model::gather_emotion_logits(row, vocabulary), static_cast<std::int32_t>(label));
}

std::span<const model::TokenId> window(std::span<const model::TokenId> sequence, std::size_t begin, std::size_t end) {
  if (end > sequence.size() || begin >= end) {
    throw std::out_of_range("window [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") outside a sequence of " + std::to_string(sequence.size()) + " tokens");
  }
  return sequence.subspan(begin, end - begin);
}

}  // namespace

template <typename T>
Tensor<T> autoregressive_loss(const Model<T>& model, std::span<const model::TokenId> sequence, const ArSpan& span) {
  if (span.length() > model.n_limit()) throw model::WindowExceeded(span.length(), model.n_limit());
  Tensor<T> logits = model.forward(window(sequence, span.prefix_begin, span.end));
  return ar_loss_from_logits(logits, sequence, span);
}

template <typename T>
Tensor<T> emotion_loss(const Model<T>& model, std::span<const model::TokenId> sequence, std::size_t T_end,
                       std::size_t n_q, std::size_t label) {
  if (label >= model.vocabulary().num_emotions) {
    throw std::invalid_argument("emotion_loss: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(model.vocabulary().num_emotions) + ")");
  }
  const std::size_t take = std::min(n_q, T_end + 1);
  Tensor<T> logits = model.forward(window(sequence, T_end + 1 - take, T_end + 1));
  return emotion_loss_from_logits(logits, model.vocabulary(), label);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_a, const Tensor<T>& l_e) {
  return numerics::scale(numerics::add(l_a, l_e), T(0.5));
}

double total_loss(double l_a, double l_e) { return 0.5 * (l_a + l_e); }

template <typename T>
EndingLoss<T> ending_loss(const Model<T>& model, const TokenStream& stream, std::size_t sentence,
                          const TrainConfig& config) {
  const std::size_t T_end = stream.audio_end.at(sentence);
  const std::size_t label = stream.emotions.at(sentence);
  std::span<const model::TokenId> seq = stream.tokens;
  const ArSpan span = select_ar_span(T_end, T_end + 1, config.n_o, config.n_p);
  const std::size_t emo_begin = T_end + 1 - std::min(config.n_q, T_end + 1);
  EndingLoss<T> out;
  if (emo_begin == span.prefix_begin) {
    Tensor<T> logits = model.forward(window(seq, span.prefix_begin, span.end));
    out.l_a = ar_loss_from_logits(logits, seq, span);
    out.l_e = emotion_loss_from_logits(logits, model.vocabulary(), label);
  } else {
    out.l_a = autoregressive_loss(model, seq, span);
    out.l_e = emotion_loss(model, seq, T_end, config.n_q, label);
  }
  out.total = total_loss(out.l_a, out.l_e);
  return out;
}

TrainingAborted::TrainingAborted(std::size_t epoch, std::size_t step, const std::string& what)
    : numerics::NumericalError("training aborted at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + ": " + what),
      epoch_(epoch),
      step_(step) {}

std::vector<TokenStream> preprocess_all(const std::vector<corpus::DialogueSample>& dialogues,
                                        const model::Vocabulary& vocabulary, bool keep_emotion_ids) {
  std::vector<TokenStream> streams;
  streams.reserve(dialogues.size());
  for (const auto& d : dialogues) {
    streams.push_back(corpus::preprocess_sample(d, vocabulary, {.keep_emotion_ids = keep_emotion_ids}));
  }
  return streams;
}

namespace {

struct Accumulator {
  double l = 0, l_a = 0, l_e = 0;
  std::size_t n = 0;

  void add(double a, double e) {
    l_a += a;
    l_e += e;
    l += total_loss(a, e);
    ++n;
  }
  LossStats stats() const {
    if (n == 0) return {};
    const double d = static_cast<double>(n);
    return {l / d, l_a / d, l_e / d, n};
  }
};

}  // namespace

template <typename T>
LossStats evaluate_losses(const Model<T>& model, const std::vector<TokenStream>& streams, const TrainConfig& config) {
  numerics::NoGradGuard guard;
  Accumulator acc;
  for (const auto& s : streams) {
    for (std::size_t i = 0; i < s.num_sentences(); ++i) {
      auto loss = ending_loss(model, s, i, config);
      acc.add(loss.l_a.item(), loss.l_e.item());
    }
  }
  return acc.stats();
}

template <typename T>
TrainResult train(Model<T>& model, const std::vector<corpus::DialogueSample>& dialogues, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  validate(config, model.n_limit());
  auto adapter = model.adapter(lora::kTrainingAdapterName);
  if (!adapter) throw std::logic_error("train: no '" + std::string(lora::kTrainingAdapterName) + "' adapter attached");
  if (!model.base_frozen()) throw std::logic_error("train: base parameters must be frozen");
  adapter->set_trainable(true);
  numerics::OptimizerSettings settings;
  settings.kind = config.optimizer;
  settings.learning_rate = config.learning_rate;
  numerics::Optimizer<T> optimizer(settings, adapter->parameters());

  const auto streams = preprocess_all(dialogues, model.vocabulary(), config.keep_emotion_ids);
  std::vector<std::pair<std::size_t, std::size_t>> endings;
  for (std::size_t d = 0; d < streams.size(); ++d) {
    for (std::size_t i = 0; i < streams[d].num_sentences(); ++i) endings.emplace_back(d, i);
  }

  TrainResult result;
  result.initial = evaluate_losses(model, streams, config);
  if (on_epoch) on_epoch({0, result.initial});

  std::mt19937_64 rng(config.seed);
  const std::size_t batch = config.batch_size;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.shuffle) std::shuffle(endings.begin(), endings.end(), rng);
    Accumulator acc;
    optimizer.zero_grad();
    for (std::size_t k = 0; k < endings.size(); ++k) {
      const auto [d, i] = endings[k];
      auto loss = ending_loss(model, streams[d], i, config);
      const double l_a = loss.l_a.item();
      const double l_e = loss.l_e.item();
      if (!std::isfinite(l_a) || !std::isfinite(l_e)) {
        throw TrainingAborted(epoch, result.optimizer_steps,
                              "non-finite loss (L_a=" + std::to_string(l_a) + ", L_e=" + std::to_string(l_e) +
                                  ") on dialogue " + std::to_string(dialogues[d].dialogue_id) + ", sentence " +
                                  std::to_string(i));
      }
      acc.add(l_a, l_e);
      const std::size_t batch_begin = k - k % batch;
      const std::size_t this_batch = std::min(batch, endings.size() - batch_begin);
      numerics::backward(numerics::scale(loss.total, T(1) / static_cast<T>(this_batch)));
      if (k + 1 == batch_begin + this_batch) {
        optimizer.step();
        optimizer.zero_grad();
        ++result.optimizer_steps;
      }
    }
    EpochRecord record{epoch, acc.stats()};
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  adapter->set_trainable(false);
  return result;
}

std::string metrics_csv(const TrainResult& result) {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,L,L_a,L_e\n";
  out << 0 << ',' << result.initial.l << ',' << result.initial.l_a << ',' << result.initial.l_e << '\n';
  for (const auto& r : result.history) {
    out << r.epoch << ',' << r.stats.l << ',' << r.stats.l_a << ',' << r.stats.l_e << '\n';
  }
  return out.str();
}

#define DPMEM_INSTANTIATE(T)                                                                                   \
  template Tensor<T> autoregressive_loss<T>(const Model<T>&, std::span<const model::TokenId>, const ArSpan&); \
  template Tensor<T> emotion_loss<T>(const Model<T>&, std::span<const model::TokenId>, std::size_t,           \
                                     std::size_t, std::size_t);                                                \
  template Tensor<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&);                                       \
  template EndingLoss<T> ending_loss<T>(const Model<T>&, const TokenStream&, std::size_t, const TrainConfig&); \
  template LossStats evaluate_losses<T>(const Model<T>&, const std::vector<TokenStream>&, const TrainConfig&); \
  template TrainResult train<T>(Model<T>&, const std::vector<corpus::DialogueSample>&, const TrainConfig&,    \
                                const EpochCallback&);

DPMEM_INSTANTIATE(float)
DPMEM_INSTANTIATE(double)

#undef DPMEM_INSTANTIATE

}  // namespace dpmem::training
