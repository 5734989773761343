#include "dpmem/dpm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dpmem::dpm {

std::string to_string(Stepping stepping) {
  return stepping == Stepping::kSentence ? "sentence" : "fixed_stride";
}

Stepping parse_stepping(const std::string& text) {
  if (text == "sentence") return Stepping::kSentence;
  if (text == "fixed_stride" || text == "stride") return Stepping::kFixedStride;
  throw std::invalid_argument("unknown stepping strategy '" + text + "' (expected sentence or fixed_stride)");
}

void validate(const DpmConfig& c) {
  if (c.n_r == 0) throw std::invalid_argument("dpm config: n_r must be at least 1");
  if (c.stepping == Stepping::kFixedStride && c.stride == 0) {
    throw std::invalid_argument("dpm config: fixed-stride stepping needs stride >= 1");
  }
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) {
    throw std::invalid_argument("dpm config: learning rate must be finite and >= 0");
  }
  if (c.lora_rank == 0 || !(c.lora_alpha > 0.0)) {
    throw std::invalid_argument("dpm config: adapter rank and alpha must be positive");
  }
}

nlohmann::json to_json(const DpmConfig& c) {
  return {{"n_r", c.n_r},
          {"stepping", to_string(c.stepping)},
          {"stride", c.stride},
          {"learning_rate", c.learning_rate},
          {"optimizer", numerics::to_string(c.optimizer)},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"lora_seed", c.lora_seed},
          {"keep_emotion_ids", c.keep_emotion_ids},
          {"emit_trace", c.emit_trace}};
}

DpmConfig dpm_config_from_json(const nlohmann::json& j) {
  DpmConfig c;
  c.n_r = j.value("n_r", c.n_r);
  if (j.contains("stepping")) c.stepping = parse_stepping(j.at("stepping").get<std::string>());
  c.stride = j.value("stride", c.stride);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer")) c.optimizer = numerics::parse_optimizer_kind(j.at("optimizer").get<std::string>());
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
  c.lora_seed = j.value("lora_seed", c.lora_seed);
  c.keep_emotion_ids = j.value("keep_emotion_ids", c.keep_emotion_ids);
  c.emit_trace = j.value("emit_trace", c.emit_trace);
  return c;
}

namespace {

Span prefix_before(std::size_t target_begin, std::size_t n_r) {
  return {target_begin - std::min(n_r, target_begin), target_begin};
}

}  // namespace

std::vector<ScheduledStep> step_schedule(const TokenStream& stream, const DpmConfig& config) {
  validate(config);
  if (stream.num_sentences() == 0 || stream.tokens.empty()) {
    throw std::invalid_argument("step_schedule: empty sample");
  }
  const std::size_t total = stream.audio_end.back() + 1;
  std::vector<ScheduledStep> steps;
  if (config.stepping == Stepping::kSentence) {
    for (std::size_t i = 1; i < stream.num_sentences(); ++i) {
      Span target{stream.sentence_begin[i], stream.audio_end[i] + 1};
      steps.push_back({prefix_before(target.begin, config.n_r), target, i});
    }
  } else {
    for (std::size_t b = config.stride; b < total; b += config.stride) {
      Span target{b, std::min(b + config.stride, total)};
      steps.push_back({prefix_before(b, config.n_r), target, std::nullopt});
    }
  }
  return steps;
}

std::string WindowCheck::message() const {
  std::ostringstream out;
  if (ok) {
    out << "window ok: n_max " << n_max << " + n_r " << n_r << " <= n_limit " << n_limit;
  } else {
    out << "window violation: n_max " << n_max << " + n_r " << n_r << " = " << n_max + n_r << " exceeds n_limit "
        << n_limit;
    if (offending_sentence) {
      out << " (sentence " << *offending_sentence << ")";
    } else if (offending_step) {
      out << " (step " << *offending_step << ")";
    }
  }
  return out.str();
}

WindowCheck window_check(std::size_t n_limit, std::size_t n_max, std::size_t n_r) {
  WindowCheck c;
  c.n_limit = n_limit;
  c.n_max = n_max;
  c.n_r = n_r;
  c.ok = n_limit >= n_max + n_r;
  return c;
}

WindowCheck window_check(std::size_t n_limit, const TokenStream& stream, const DpmConfig& config) {
  const auto steps = step_schedule(stream, config);
  std::size_t n_max = 0;
  for (const auto& s : steps) n_max = std::max(n_max, s.target.length());
  WindowCheck c = window_check(n_limit, n_max, config.n_r);
  if (!c.ok) {
    for (std::size_t k = 0; k < steps.size(); ++k) {
      if (steps[k].target.length() + config.n_r > n_limit) {
        c.offending_step = k;
        c.offending_sentence = steps[k].sentence;
        break;
      }
    }
  }
  return c;
}

WindowViolation::WindowViolation(WindowCheck check) : std::length_error(check.message()), check_(std::move(check)) {}

std::size_t DpmTrace::max_forward_length() const {
  std::size_t m = final_forward_length;
  for (const auto& s : steps) m = std::max(m, s.forward_length);
  return m;
}

std::vector<std::size_t> DpmTrace::forward_lengths() const {
  std::vector<std::size_t> out;
  out.reserve(steps.size() + 1);
  for (const auto& s : steps) out.push_back(s.forward_length);
  out.push_back(final_forward_length);
  return out;
}

std::string trace_csv(const DpmTrace& trace) {
  std::ostringstream out;
  out.precision(9);
  out << "step,prefix_len,target_len,L_t,forward_len\n";
  for (const auto& s : trace.steps) {
    out << s.step << ',' << s.prefix.length() << ',' << s.target.length() << ',' << s.loss << ','
        << s.forward_length << '\n';
  }
  return out.str();
}

lora::TempLoraOptions temp_lora_options(const DpmConfig& config) {
  lora::TempLoraOptions o;
  o.lora.rank = config.lora_rank;
  o.lora.alpha = config.lora_alpha;
  o.lora.seed = config.lora_seed;
  o.optimizer.kind = config.optimizer;
  o.optimizer.learning_rate = config.learning_rate;
  return o;
}

template <typename T>
double dpm_step(Model<T>& model, lora::TemporaryLora<T>& temp, std::span<const TokenId> tokens,
                const ScheduledStep& step) {
  const Span window{step.prefix.begin, step.target.end};
  if (step.prefix.end != step.target.begin || window.end > tokens.size() || step.target.length() == 0) {
    throw std::invalid_argument("dpm_step: malformed step");
  }
  if (window.length() > model.n_limit()) throw model::WindowExceeded(window.length(), model.n_limit());
  numerics::Tape<T>::current().clear();
  const std::size_t first = std::max(step.target.begin, window.begin + 1);
  if (first >= window.end) throw std::invalid_argument("dpm_step: target has no token with context");
  Tensor<T> logits = model.forward(tokens.subspan(window.begin, window.length()));
  std::vector<std::int32_t> targets(tokens.begin() + static_cast<std::ptrdiff_t>(first),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(window.end));
  Tensor<T> rows = numerics::slice_rows(logits, first - window.begin - 1, window.end - window.begin - 1);
  Tensor<T> loss = numerics::cross_entropy_rows(rows, targets);
  const double value = loss.item();
  if (!std::isfinite(value)) throw numerics::NumericalError("dpm_step: non-finite loss");
  auto& opt = temp.optimizer();
  opt.zero_grad();
  numerics::backward(loss);
  opt.step();
  return value;
}

namespace {

template <typename T>
std::pair<std::size_t, std::vector<double>> read_emotion(const Model<T>& model, std::span<const TokenId> tokens,
                                                         std::size_t end, std::size_t n_r, std::size_t& length) {
  numerics::NoGradGuard guard;
  length = std::min(n_r, end);
  Tensor<T> logits = model.forward(tokens.subspan(end - length, length));
  const std::size_t last = logits.rows() - 1;
  Tensor<T> probs = model::constrained_emotion_logits(numerics::slice_rows(logits, last, last + 1), model.vocabulary());
  std::vector<double> dist(probs.data().begin(), probs.data().end());
  const auto best = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
  return {best, std::move(dist)};
}

template <typename T>
StepRecord run_step(Model<T>& model, lora::TemporaryLora<T>& temp, std::span<const TokenId> tokens,
                    const ScheduledStep& step, std::size_t index) {
  StepRecord r;
  r.step = index;
  r.prefix = step.prefix;
  r.target = step.target;
  r.forward_length = step.prefix.length() + step.target.length();
  r.loss = dpm_step(model, temp, tokens, step);
  return r;
}

}  // namespace

template <typename T>
DpmResult dpm_infer(Model<T>& model, const TokenStream& stream, const DpmConfig& config) {
  const WindowCheck check = window_check(model.n_limit(), stream, config);
  if (!check.ok) throw WindowViolation(check);
  if (config.n_r > model.n_limit()) throw WindowViolation(window_check(model.n_limit(), 0, config.n_r));
  const auto steps = step_schedule(stream, config);
  std::span<const TokenId> tokens = stream.tokens;
  const std::size_t end = stream.audio_end.back() + 1;

  DpmResult result;
  lora::TemporaryLora<T> temp(model, temp_lora_options(config));
  for (std::size_t k = 0; k < steps.size(); ++k) {
    result.trace.steps.push_back(run_step(model, temp, tokens, steps[k], k));
    ++result.trace.update_count;
  }
  auto [best, dist] = read_emotion(model, tokens, end, config.n_r, result.trace.final_forward_length);
  temp.discard();
  result.predicted = best;
  result.trace.final_distribution = std::move(dist);
  return result;
}

template <typename T>
DpmResult dpm_infer(Model<T>& model, const corpus::DialogueSample& sample, const DpmConfig& config) {
  const auto stream =
      corpus::inference_stream(sample, model.vocabulary(), {.keep_emotion_ids = config.keep_emotion_ids});
  return dpm_infer(model, stream, config);
}

template <typename T>
std::vector<DpmResult> dpm_infer_prefixes(Model<T>& model, const corpus::DialogueSample& sample,
                                          const DpmConfig& config) {
  if (config.stepping != Stepping::kSentence) {
    throw std::invalid_argument("dpm_infer_prefixes: only sentence stepping shares steps across prefixes");
  }
  const auto stream =
      corpus::preprocess_sample(sample, model.vocabulary(), {.keep_emotion_ids = config.keep_emotion_ids});
  const WindowCheck check = window_check(model.n_limit(), stream, config);
  if (!check.ok) throw WindowViolation(check);
  if (config.n_r > model.n_limit()) throw WindowViolation(window_check(model.n_limit(), 0, config.n_r));
  const auto steps = step_schedule(stream, config);
  std::span<const TokenId> tokens = stream.tokens;

  std::vector<DpmResult> results(stream.num_sentences());
  lora::TemporaryLora<T> temp(model, temp_lora_options(config));
  std::vector<StepRecord> done;
  for (std::size_t view = 0; view < stream.num_sentences(); ++view) {
    if (view > 0) done.push_back(run_step(model, temp, tokens, steps[view - 1], view - 1));
    DpmResult& r = results[view];
    r.trace.steps = done;
    r.trace.update_count = done.size();
    auto [best, dist] = read_emotion(model, tokens, stream.audio_end[view] + 1, config.n_r, r.trace.final_forward_length);
    r.predicted = best;
    r.trace.final_distribution = std::move(dist);
  }
  temp.discard();
  return results;
}

#define DPMEM_INSTANTIATE(T)                                                                                       \
  template double dpm_step<T>(Model<T>&, lora::TemporaryLora<T>&, std::span<const TokenId>, const ScheduledStep&); \
  template DpmResult dpm_infer<T>(Model<T>&, const TokenStream&, const DpmConfig&);                               \
  template DpmResult dpm_infer<T>(Model<T>&, const corpus::DialogueSample&, const DpmConfig&);                    \
  template std::vector<DpmResult> dpm_infer_prefixes<T>(Model<T>&, const corpus::DialogueSample&, const DpmConfig&);

DPMEM_INSTANTIATE(float)
DPMEM_INSTANTIATE(double)

#undef DPMEM_INSTANTIATE

}  // namespace dpmem::dpm
