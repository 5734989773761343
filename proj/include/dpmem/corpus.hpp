#pragma once

// Synthetic conversational-emotion corpora of discrete audio-code sequences,
// and the preprocessing that interleaves sentence-end markers and emotion
// identifiers into a single token stream.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpmem/model.hpp"
#include "json.hpp"

namespace dpmem::corpus {

using model::TokenId;
using model::Vocabulary;
using Code = std::int32_t;

// Nominal token rate of the discrete audio codes.
inline constexpr double kTokensPerSecond = 25.0;

inline double nominal_seconds(std::size_t tokens) { return static_cast<double>(tokens) / kTokensPerSecond; }

struct DialogueSample {
  std::uint64_t dialogue_id = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<Code>> sentences;  // codebook indices
  std::vector<std::size_t> emotions;         // one per sentence

  std::size_t num_sentences() const { return sentences.size(); }
  std::size_t final_emotion() const { return emotions.back(); }
  std::size_t audio_token_count() const;

  bool operator==(const DialogueSample&) const = default;
};

// Throws std::invalid_argument naming the first violated invariant.
void validate(const DialogueSample& sample, std::size_t codebook_size, std::size_t num_emotions);

struct GeneratorConfig {
  std::size_t num_dialogues = 100;
  std::size_t min_sentences = 4;
  std::size_t max_sentences = 12;
  std::size_t min_tokens = 8;
  std::size_t max_tokens = 24;
  std::size_t num_emotions = 4;
  std::size_t codebook_size = 256;
  // Probability that the latent emotion persists into the next sentence; the
  // remaining mass is spread evenly over the other emotions.
  double p_stay = 0.8;
  // Probability that a dialogue opens with a trigger motif that fixes the
  // emotion of its closing sentence.
  double trigger_strength = 0.5;
  double in_band_mass = 0.7;
  std::size_t band_width = 16;
  std::size_t topic_band_width = 32;
  // In-band mass used for the closing sentence of a triggered dialogue.
  double trigger_final_in_band_mass = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const GeneratorConfig&) const = default;
};

void validate(const GeneratorConfig& config);
nlohmann::json to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

inline constexpr std::size_t kMotifLength = 4;

// Codebook partition: E emotion bands, a shared topic band, unused codes,
// then E reserved motif 4-grams at the top of the codebook.
struct CodebookLayout {
  std::size_t band_width;
  std::size_t topic_begin;
  std::size_t topic_width;
  std::size_t motif_begin;
  std::size_t num_emotions;

  explicit CodebookLayout(const GeneratorConfig& config);
  std::size_t band_begin(std::size_t emotion) const { return emotion * band_width; }
  // Emotion whose band contains the code, if any.
  std::optional<std::size_t> band_of(Code code) const;
  std::vector<Code> motif(std::size_t emotion) const;
  bool is_motif_code(Code code) const { return static_cast<std::size_t>(code) >= motif_begin; }
};

// Emotion of the first motif found in a sentence.
std::optional<std::size_t> find_trigger(const std::vector<Code>& sentence, const CodebookLayout& layout);

std::uint64_t dialogue_seed(std::uint64_t master_seed, std::uint64_t index);

std::vector<DialogueSample> generate_corpus(const GeneratorConfig& config);

struct TokenStream {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> sentence_begin;  // first token of each sentence
  std::vector<std::size_t> audio_end;       // index of each sentence's end marker
  std::vector<std::size_t> emotions;
  bool has_emotion_ids = true;

  std::size_t num_sentences() const { return audio_end.size(); }
};

struct StreamOptions {
  // Keep the emotion identifier after each end marker.
  bool keep_emotion_ids = true;
};

// [sentence_i, audio_end, emotion_i] for every sentence.
TokenStream preprocess_sample(const DialogueSample& sample, const Vocabulary& vocabulary,
                              StreamOptions options = {});

// The stream an inference method consumes: preprocessing up to and including
// the final end marker; the closing emotion identifier is what gets predicted.
TokenStream inference_stream(const DialogueSample& sample, const Vocabulary& vocabulary,
                             StreamOptions options = {});

// Removes markers and recovers sentences and labels from a full stream.
DialogueSample strip_markers(const TokenStream& stream, const Vocabulary& vocabulary);

// Prefixes of 1..S sentences; view k is labelled with sentence k's emotion.
std::vector<DialogueSample> make_prefix_views(const DialogueSample& sample);

struct Corpus {
  GeneratorConfig config;
  std::vector<DialogueSample> dialogues;

  bool operator==(const Corpus&) const = default;
};

Corpus make_corpus(const GeneratorConfig& config);

inline constexpr int kCorpusSchemaVersion = 1;

class CorpusFormatError : public std::runtime_error {
 public:
  // record_index is 0-based over dialogue records; nullopt for the header.
  CorpusFormatError(const std::string& path, std::optional<std::size_t> record_index, const std::string& what);
  std::optional<std::size_t> record_index() const { return record_index_; }

 private:
  std::optional<std::size_t> record_index_;
};

std::string serialize_corpus(const Corpus& corpus);
Corpus parse_corpus(const std::string& text, const std::string& source = "<memory>");
// Writes the line-delimited corpus and a "<path>.hash.json" sidecar.
void write_corpus(const std::string& path, const Corpus& corpus);
Corpus read_corpus(const std::string& path);
std::string corpus_hash(const Corpus& corpus);

// Splits by dialogue into a leading training part and a trailing test part.
std::pair<std::vector<DialogueSample>, std::vector<DialogueSample>> split_corpus(
    const std::vector<DialogueSample>& dialogues, double train_fraction);

}  // namespace dpmem::corpus
