#include "dpmem/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "dpmem/hash.hpp"

namespace dpmem::corpus {

std::size_t DialogueSample::audio_token_count() const {
  std::size_t total = 0;
  for (const auto& s : sentences) total += s.size();
  return total;
}

void validate(const DialogueSample& sample, std::size_t codebook_size, std::size_t num_emotions) {
  const std::string where = "dialogue " + std::to_string(sample.dialogue_id) + ": ";
  if (sample.sentences.empty()) throw std::invalid_argument(where + "no sentences");
  if (sample.sentences.size() != sample.emotions.size()) {
    throw std::invalid_argument(where + std::to_string(sample.sentences.size()) + " sentences but " +
                                std::to_string(sample.emotions.size()) + " emotion labels");
  }
  for (std::size_t i = 0; i < sample.sentences.size(); ++i) {
    if (sample.sentences[i].empty()) throw std::invalid_argument(where + "sentence " + std::to_string(i) + " is empty");
    for (Code c : sample.sentences[i]) {
      if (c < 0 || static_cast<std::size_t>(c) >= codebook_size) {
        throw std::invalid_argument(where + "code " + std::to_string(c) + " in sentence " + std::to_string(i) +
                                    " outside codebook of " + std::to_string(codebook_size));
      }
    }
    if (sample.emotions[i] >= num_emotions) {
      throw std::invalid_argument(where + "emotion " + std::to_string(sample.emotions[i]) + " of sentence " +
                                  std::to_string(i) + " outside [0, " + std::to_string(num_emotions) + ")");
    }
  }
}

// --- generator --------------------------------------------------------------

void validate(const GeneratorConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("generator config: " + m); };
  if (c.min_sentences == 0 || c.min_sentences > c.max_sentences) fail("sentence range is empty");
  if (c.min_tokens == 0 || c.min_tokens > c.max_tokens) fail("tokens-per-sentence range is empty");
  if (c.num_emotions == 0) fail("need at least one emotion");
  auto unit = [&](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) fail(std::string(name) + " must lie in [0, 1]");
  };
  unit(c.p_stay, "p_stay");
  unit(c.trigger_strength, "trigger_strength");
  unit(c.in_band_mass, "in_band_mass");
  unit(c.trigger_final_in_band_mass, "trigger_final_in_band_mass");
  if (c.band_width == 0 || c.topic_band_width == 0) fail("band widths must be positive");
  const std::size_t needed = c.num_emotions * c.band_width + c.topic_band_width + c.num_emotions * kMotifLength;
  if (needed > c.codebook_size) {
    fail("codebook of " + std::to_string(c.codebook_size) + " codes is too small for " +
         std::to_string(c.num_emotions) + " disjoint bands of " + std::to_string(c.band_width) +
         ", a topic band of " + std::to_string(c.topic_band_width) + " and the motif block (" +
         std::to_string(needed) + " needed)");
  }
}

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"num_dialogues", c.num_dialogues},
          {"min_sentences", c.min_sentences},
          {"max_sentences", c.max_sentences},
          {"min_tokens", c.min_tokens},
          {"max_tokens", c.max_tokens},
          {"num_emotions", c.num_emotions},
          {"codebook_size", c.codebook_size},
          {"p_stay", c.p_stay},
          {"trigger_strength", c.trigger_strength},
          {"in_band_mass", c.in_band_mass},
          {"band_width", c.band_width},
          {"topic_band_width", c.topic_band_width},
          {"trigger_final_in_band_mass", c.trigger_final_in_band_mass},
          {"seed", c.seed}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.num_dialogues = j.value("num_dialogues", c.num_dialogues);
  c.min_sentences = j.value("min_sentences", c.min_sentences);
  c.max_sentences = j.value("max_sentences", c.max_sentences);
  c.min_tokens = j.value("min_tokens", c.min_tokens);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.num_emotions = j.value("num_emotions", c.num_emotions);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.p_stay = j.value("p_stay", c.p_stay);
  c.trigger_strength = j.value("trigger_strength", c.trigger_strength);
  c.in_band_mass = j.value("in_band_mass", c.in_band_mass);
  c.band_width = j.value("band_width", c.band_width);
  c.topic_band_width = j.value("topic_band_width", c.topic_band_width);
  c.trigger_final_in_band_mass = j.value("trigger_final_in_band_mass", c.trigger_final_in_band_mass);
  c.seed = j.value("seed", c.seed);
  return c;
}

CodebookLayout::CodebookLayout(const GeneratorConfig& config)
    : band_width(config.band_width),
      topic_begin(config.num_emotions * config.band_width),
      topic_width(config.topic_band_width),
      motif_begin(config.codebook_size - config.num_emotions * kMotifLength),
      num_emotions(config.num_emotions) {
  validate(config);
}

std::optional<std::size_t> CodebookLayout::band_of(Code code) const {
  const auto c = static_cast<std::size_t>(code);
  if (code < 0 || c >= topic_begin) return std::nullopt;
  return c / band_width;
}

std::vector<Code> CodebookLayout::motif(std::size_t emotion) const {
  std::vector<Code> m(kMotifLength);
  for (std::size_t i = 0; i < kMotifLength; ++i) {
    m[i] = static_cast<Code>(motif_begin + emotion * kMotifLength + i);
  }
  return m;
}

std::optional<std::size_t> find_trigger(const std::vector<Code>& sentence, const CodebookLayout& layout) {
  if (sentence.size() < kMotifLength) return std::nullopt;
  for (std::size_t e = 0; e < layout.num_emotions; ++e) {
    const auto m = layout.motif(e);
    if (std::search(sentence.begin(), sentence.end(), m.begin(), m.end()) != sentence.end()) return e;
  }
  return std::nullopt;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

DialogueSample generate_dialogue(const GeneratorConfig& c, const CodebookLayout& layout, std::uint64_t index) {
  DialogueSample d;
  d.dialogue_id = index;
  d.seed = dialogue_seed(c.seed, index);
  std::mt19937_64 rng(d.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  const std::size_t num_sentences = uniform_int(c.min_sentences, c.max_sentences);
  const std::size_t E = c.num_emotions;
  d.emotions.resize(num_sentences);
  d.emotions[0] = uniform_int(0, E - 1);
  for (std::size_t i = 1; i < num_sentences; ++i) {
    const std::size_t prev = d.emotions[i - 1];
    if (E == 1 || unit(rng) < c.p_stay) {
      d.emotions[i] = prev;
    } else {
      std::size_t other = uniform_int(0, E - 2);
      d.emotions[i] = other >= prev ? other + 1 : other;
    }
  }
  const bool triggered = unit(rng) < c.trigger_strength;
  // The motif expresses the opening emotion and carries it to the close.
  const std::size_t trigger_emotion = d.emotions[0];
  if (triggered) d.emotions.back() = trigger_emotion;

  for (std::size_t i = 0; i < num_sentences; ++i) {
    std::size_t length = uniform_int(c.min_tokens, c.max_tokens);
    if (triggered && i == 0) length = std::max(length, kMotifLength);
    const bool closing = triggered && i + 1 == num_sentences;
    const double mass = closing ? c.trigger_final_in_band_mass : c.in_band_mass;
    std::vector<Code> sentence(length);
    for (auto& code : sentence) {
      if (unit(rng) < mass) {
        code = static_cast<Code>(layout.band_begin(d.emotions[i]) + uniform_int(0, layout.band_width - 1));
      } else {
        code = static_cast<Code>(layout.topic_begin + uniform_int(0, layout.topic_width - 1));
      }
    }
    if (triggered && i == 0) {
      const std::size_t offset = uniform_int(0, length - kMotifLength);
      const auto motif = layout.motif(trigger_emotion);
      std::copy(motif.begin(), motif.end(), sentence.begin() + static_cast<std::ptrdiff_t>(offset));
    }
    d.sentences.push_back(std::move(sentence));
  }
  return d;
}

}  // namespace

std::uint64_t dialogue_seed(std::uint64_t master_seed, std::uint64_t index) {
  return splitmix64(master_seed ^ splitmix64(index + 1));
}

std::vector<DialogueSample> generate_corpus(const GeneratorConfig& config) {
  CodebookLayout layout(config);
  std::vector<DialogueSample> out;
  out.reserve(config.num_dialogues);
  for (std::size_t i = 0; i < config.num_dialogues; ++i) out.push_back(generate_dialogue(config, layout, i));
  return out;
}

Corpus make_corpus(const GeneratorConfig& config) { return {config, generate_corpus(config)}; }

// --- preprocessing ----------------------------------------------------------

TokenStream preprocess_sample(const DialogueSample& sample, const Vocabulary& vocabulary, StreamOptions options) {
  validate(sample, vocabulary.codebook_size, vocabulary.num_emotions);
  TokenStream s;
  s.has_emotion_ids = options.keep_emotion_ids;
  s.emotions = sample.emotions;
  for (std::size_t i = 0; i < sample.sentences.size(); ++i) {
    s.sentence_begin.push_back(s.tokens.size());
    for (Code c : sample.sentences[i]) s.tokens.push_back(vocabulary.audio_id(static_cast<std::size_t>(c)));
    s.audio_end.push_back(s.tokens.size());
    s.tokens.push_back(vocabulary.audio_end_id());
    if (options.keep_emotion_ids) s.tokens.push_back(vocabulary.emotion_id(sample.emotions[i]));
  }
  return s;
}

TokenStream inference_stream(const DialogueSample& sample, const Vocabulary& vocabulary, StreamOptions options) {
  TokenStream s = preprocess_sample(sample, vocabulary, options);
  s.tokens.resize(s.audio_end.back() + 1);
  return s;
}

DialogueSample strip_markers(const TokenStream& stream, const Vocabulary& vocabulary) {
  DialogueSample d;
  std::vector<Code> current;
  for (std::size_t i = 0; i < stream.tokens.size(); ++i) {
    const TokenId t = stream.tokens[i];
    if (vocabulary.is_audio(t)) {
      current.push_back(static_cast<Code>(vocabulary.code_of(t)));
    } else if (t == vocabulary.audio_end_id()) {
      d.sentences.push_back(std::move(current));
      current.clear();
      if (!stream.has_emotion_ids) d.emotions.push_back(stream.emotions.at(d.sentences.size() - 1));
    } else if (vocabulary.is_emotion(t)) {
      d.emotions.push_back(vocabulary.emotion_of(t));
    } else {
      throw std::invalid_argument("strip_markers: unexpected token " + std::to_string(t));
    }
  }
  if (!current.empty()) throw std::invalid_argument("strip_markers: stream ends inside a sentence");
  return d;
}

std::vector<DialogueSample> make_prefix_views(const DialogueSample& sample) {
  std::vector<DialogueSample> views;
  views.reserve(sample.sentences.size());
  for (std::size_t k = 1; k <= sample.sentences.size(); ++k) {
    DialogueSample v;
    v.dialogue_id = sample.dialogue_id;
    v.seed = sample.seed;
    v.sentences.assign(sample.sentences.begin(), sample.sentences.begin() + static_cast<std::ptrdiff_t>(k));
    v.emotions.assign(sample.emotions.begin(), sample.emotions.begin() + static_cast<std::ptrdiff_t>(k));
    views.push_back(std::move(v));
  }
  return views;
}

// --- file format ------------------------------------------------------------

CorpusFormatError::CorpusFormatError(const std::string& path, std::optional<std::size_t> record_index,
                                     const std::string& what)
    : std::runtime_error(path + ": " +
                         (record_index ? "record " + std::to_string(*record_index) : std::string("header")) + ": " +
                         what),
      record_index_(record_index) {}

std::string serialize_corpus(const Corpus& corpus) {
  std::ostringstream out;
  nlohmann::json header = {{"format", "dpmem-corpus"},
                           {"schema_version", kCorpusSchemaVersion},
                           {"num_dialogues", corpus.dialogues.size()},
                           {"generator", to_json(corpus.config)}};
  out << header.dump() << '\n';
  for (const auto& d : corpus.dialogues) {
    nlohmann::json rec = {{"id", d.dialogue_id}, {"seed", d.seed}, {"sentences", d.sentences}, {"emotions", d.emotions}};
    out << rec.dump() << '\n';
  }
  return out.str();
}

Corpus parse_corpus(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw CorpusFormatError(source, std::nullopt, "empty file");
  Corpus corpus;
  std::size_t expected = 0;
  try {
    auto header = nlohmann::json::parse(line);
    if (header.value("format", std::string()) != "dpmem-corpus") {
      throw CorpusFormatError(source, std::nullopt, "not a dpmem corpus file");
    }
    const int version = header.at("schema_version").get<int>();
    if (version != kCorpusSchemaVersion) {
      throw CorpusFormatError(source, std::nullopt,
                              "schema version " + std::to_string(version) + " (expected " +
                                  std::to_string(kCorpusSchemaVersion) + ")");
    }
    expected = header.at("num_dialogues").get<std::size_t>();
    corpus.config = generator_config_from_json(header.at("generator"));
  } catch (const nlohmann::json::exception& e) {
    throw CorpusFormatError(source, std::nullopt, e.what());
  }
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      DialogueSample d;
      d.dialogue_id = rec.at("id").get<std::uint64_t>();
      d.seed = rec.at("seed").get<std::uint64_t>();
      d.sentences = rec.at("sentences").get<std::vector<std::vector<Code>>>();
      d.emotions = rec.at("emotions").get<std::vector<std::size_t>>();
      validate(d, corpus.config.codebook_size, corpus.config.num_emotions);
      corpus.dialogues.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw CorpusFormatError(source, index, e.what());
    } catch (const std::invalid_argument& e) {
      throw CorpusFormatError(source, index, e.what());
    }
    ++index;
  }
  if (corpus.dialogues.size() != expected) {
    throw CorpusFormatError(source, corpus.dialogues.size(),
                            "truncated: header announces " + std::to_string(expected) + " dialogues, found " +
                                std::to_string(corpus.dialogues.size()));
  }
  return corpus;
}

void write_corpus(const std::string& path, const Corpus& corpus) {
  const std::string text = serialize_corpus(corpus);
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write corpus to " + path);
    out << text;
  }
  nlohmann::json sidecar = {{"file", path},
                            {"sha256", sha256_hex(text)},
                            {"schema_version", kCorpusSchemaVersion},
                            {"num_dialogues", corpus.dialogues.size()}};
  std::ofstream side(path + ".hash.json");
  if (!side) throw std::runtime_error("cannot write corpus hash manifest for " + path);
  side << sidecar.dump(2) << '\n';
}

Corpus read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_corpus(buf.str(), path);
}

std::string corpus_hash(const Corpus& corpus) { return sha256_hex(serialize_corpus(corpus)); }

std::pair<std::vector<DialogueSample>, std::vector<DialogueSample>> split_corpus(
    const std::vector<DialogueSample>& dialogues, double train_fraction) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    throw std::invalid_argument("split_corpus: train fraction must lie in [0, 1]");
  }
  const auto cut = static_cast<std::size_t>(train_fraction * static_cast<double>(dialogues.size()));
  return {std::vector<DialogueSample>(dialogues.begin(), dialogues.begin() + static_cast<std::ptrdiff_t>(cut)),
          std::vector<DialogueSample>(dialogues.begin() + static_cast<std::ptrdiff_t>(cut), dialogues.end())};
}

}  // namespace dpmem::corpus
