#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "dpmem/lora.hpp"
#include "dpmem/model.hpp"
#include "support.hpp"

using namespace dpmem;
using model::Model;
using model::TokenId;
using model::Vocabulary;
using numerics::Tensor;

namespace {

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> id(0, static_cast<TokenId>(vocab) - 1);
  std::vector<TokenId> t(n);
  for (auto& x : t) x = id(rng);
  return t;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("vocabulary totals and layout") {
  CHECK(Vocabulary{100, 256, 4}.total() == 361);
  CHECK(Vocabulary{0, 256, 7}.total() == 264);
  const Vocabulary v{10, 256, 4};
  CHECK(v.audio_id(0) == 10);
  CHECK(v.audio_id(255) == 265);
  CHECK(v.audio_end_id() == 266);
  CHECK(v.emotion_ids() == std::vector<TokenId>{267, 268, 269, 270});
  CHECK(static_cast<std::size_t>(v.emotion_id(3)) + 1 == v.total());
  for (TokenId id = 0; id < static_cast<TokenId>(v.total()); ++id) {
    const int kinds = (id < 10) + v.is_audio(id) + (id == v.audio_end_id()) + v.is_emotion(id);
    CHECK(kinds == 1);
  }
  CHECK(v.emotion_of(269) == 2);
  CHECK(v.code_of(12) == 2);
  CHECK_THROWS(v.audio_id(256));
  CHECK_THROWS(v.emotion_id(4));
  CHECK_THROWS(v.emotion_of(v.audio_end_id()));
}

TEST_CASE("config validation") {
  auto c = test::tiny_config();
  c.n_limit = 1;
  CHECK_THROWS_AS(Model<float>{c}, std::invalid_argument);
  c = test::tiny_config();
  c.vocabulary.codebook_size = 0;
  CHECK_THROWS_AS(Model<float>{c}, std::invalid_argument);
  c = test::tiny_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(Model<float>{c}, std::invalid_argument);
  c = test::tiny_config();
  CHECK(model::model_config_from_json(model::to_json(c)).vocabulary == c.vocabulary);
}

TEST_CASE("same seed builds bitwise-identical parameters") {
  Model<float> a(test::tiny_config(32, 7)), b(test::tiny_config(32, 7)), c(test::tiny_config(32, 8));
  REQUIRE(a.parameters().size() == b.parameters().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].name == b.parameters()[i].name);
    CHECK(test::bitwise_equal(a.parameters()[i].value, b.parameters()[i].value));
    any_diff |= !test::bitwise_equal(a.parameters()[i].value, c.parameters()[i].value);
  }
  CHECK(any_diff);
}

TEST_CASE("base is frozen unless groups are made trainable") {
  Model<float> m(test::tiny_config());
  CHECK(m.base_frozen());
  for (const auto& p : m.parameters()) CHECK_FALSE(p.value.requires_grad());
  m.set_group_trainable(model::ParamGroup::kHead, true);
  CHECK_FALSE(m.base_frozen());
  for (const auto& p : m.parameters()) CHECK(p.value.requires_grad() == (p.group == model::ParamGroup::kHead));
  m.freeze_base();
  CHECK(m.base_frozen());
}

TEST_CASE("forward is causal") {
  Model<double> m(test::tiny_config());
  const auto vocab = m.vocabulary().total();
  auto tokens = random_tokens(20, vocab, 3);
  const auto base = m.forward(tokens);
  CHECK(base.shape() == numerics::Shape{20, vocab});
  for (std::size_t t : {0u, 5u, 19u}) {
    auto perturbed = tokens;
    perturbed[t] = (perturbed[t] + 1) % static_cast<TokenId>(vocab);
    const auto out = m.forward(perturbed);
    for (std::size_t i = 0; i < t * vocab; ++i) CHECK(out.at(i) == base.at(i));
    bool changed = false;
    for (std::size_t i = t * vocab; i < (t + 1) * vocab; ++i) changed |= out.at(i) != base.at(i);
    CHECK(changed);
  }
}

TEST_CASE("forward enforces the window at n_limit and n_limit + 1") {
  Model<float> m(test::tiny_config(16));
  CHECK_NOTHROW(m.forward(random_tokens(16, m.vocabulary().total(), 1)));
  try {
    m.forward(random_tokens(17, m.vocabulary().total(), 1));
    FAIL("expected WindowExceeded");
  } catch (const model::WindowExceeded& e) {
    CHECK(e.length() == 17);
    CHECK(e.limit() == 16);
  }
  std::vector<TokenId> bad{0, static_cast<TokenId>(m.vocabulary().total())};
  CHECK_THROWS(m.forward(bad));
}

TEST_CASE("zero-delta adapter leaves logits unchanged exactly") {
  Model<float> m(test::tiny_config());
  auto tokens = random_tokens(12, m.vocabulary().total(), 4);
  const auto before = m.forward(tokens);
  lora::attach_training_lora(m, {});
  CHECK(test::bitwise_equal(before, m.forward(tokens)));
}

TEST_CASE("adapter delta scales by alpha over rank") {
  Model<double> m(test::tiny_config());
  auto tokens = random_tokens(10, m.vocabulary().total(), 6);
  const auto base = m.forward(tokens);
  lora::LoraOptions o;
  o.rank = 4;
  o.alpha = 4.0;
  auto one = std::make_shared<lora::LoraAdapter<double>>("one", m.linear_sites(), o);
  test::randomize_b(*one, 2);
  one->set_trainable(false);
  o.alpha = 8.0;
  auto two = std::make_shared<lora::LoraAdapter<double>>("two", m.linear_sites(), o);
  for (std::size_t s = 0; s < one->site_count(); ++s) {
    std::copy(one->b(s).data().begin(), one->b(s).data().end(), two->b(s).mutable_data().begin());
  }
  two->set_trainable(false);
  // Same A and B, twice the scale: delta(two) = 2 * delta(one) at every site.
  for (std::size_t s = 0; s < one->site_count(); ++s) {
    const auto d1 = one->dense_delta(s), d2 = two->dense_delta(s);
    for (std::size_t i = 0; i < d1.size(); ++i) CHECK(d2[i] == doctest::Approx(2.0 * d1[i]).epsilon(1e-12));
  }
  // Applying the single-site delta through the adapter equals folding it into W.
  std::vector<const lora::LoraAdapter<double>*> set{one.get()};
  const auto with = m.forward(tokens, set);
  Model<double> folded(test::tiny_config());
  for (std::size_t s = 0; s < folded.linear_sites().size(); ++s) {
    auto w = folded.site_weight(s).mutable_data();
    const auto d = one->dense_delta(s);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += d[i];
  }
  const auto merged = folded.forward(tokens);
  double max_diff = 0;
  for (std::size_t i = 0; i < with.size(); ++i) max_diff = std::max(max_diff, std::abs(with.at(i) - merged.at(i)));
  CHECK(max_diff < 1e-10);
  bool moved = false;
  for (std::size_t i = 0; i < with.size(); ++i) moved |= with.at(i) != base.at(i);
  CHECK(moved);
}

TEST_CASE("adapter registry") {
  Model<float> m(test::tiny_config());
  lora::attach_training_lora(m, {});
  CHECK(m.has_adapter(lora::kTrainingAdapterName));
  CHECK_THROWS(lora::attach_training_lora(m, {}));
  CHECK_THROWS(m.detach_adapter("missing"));
  m.detach_adapter(lora::kTrainingAdapterName);
  CHECK(m.attached_adapters().empty());
}

TEST_CASE("constrained emotion distribution") {
  const Vocabulary v{0, 8, 4};
  SUBCASE("equal logits give 1/E") {
    auto p = model::constrained_emotion_logits(Tensor<double>::full({1, v.total()}, 0.3), v);
    CHECK(p.size() == 4);
    for (double x : p.data()) CHECK(x == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("+10 on emotion 2") {
    auto logits = Tensor<double>::zeros({1, v.total()});
    logits.mutable_data()[v.emotion_id(2)] = 10.0;
    auto p = model::constrained_emotion_logits(logits, v);
    CHECK(std::max_element(p.data().begin(), p.data().end()) - p.data().begin() == 2);
    CHECK(p.at(2) > 0.99);
  }
  SUBCASE("gather then softmax, against a scalar recomputation") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      auto logits = test::random_tensor({1, v.total()}, rng, 3.0, false);
      auto p = model::constrained_emotion_logits(logits, v);
      long double z = 0;
      for (std::size_t e = 0; e < 4; ++e) z += std::exp(static_cast<long double>(logits.at(v.emotion_id(e))));
      double total = 0;
      for (std::size_t e = 0; e < 4; ++e) {
        const double expected = static_cast<double>(std::exp(static_cast<long double>(logits.at(v.emotion_id(e)))) / z);
        CHECK(p.at(e) == doctest::Approx(expected).epsilon(1e-12));
        total += p.at(e);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("argmax is invariant to a uniform shift") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
      auto logits = test::random_tensor({1, v.total()}, rng, 2.0, false);
      auto shifted = logits.clone();
      const double c = (trial - 25) * 7.5;
      for (auto& x : shifted.mutable_data()) x += c;
      auto a = model::constrained_emotion_logits(logits, v), b = model::constrained_emotion_logits(shifted, v);
      CHECK(std::max_element(a.data().begin(), a.data().end()) - a.data().begin() ==
            std::max_element(b.data().begin(), b.data().end()) - b.data().begin());
    }
  }
}

// Values recorded from this build; any change to initialisation or the forward pass shows up here.
TEST_CASE("golden logits for a fixed seed and input") {
  Model<double> m(test::tiny_config(32, 1234));
  std::vector<TokenId> tokens(16);
  std::iota(tokens.begin(), tokens.end(), 3);
  const auto logits = m.forward(tokens);
  const double total = std::accumulate(logits.data().begin(), logits.data().end(), 0.0);
  const std::vector<std::pair<std::size_t, double>> probes = {
      {0, 0.07290791887982169}, {17, -0.14591278993234347}, {200, -0.10250400192998488}, {463, 0.31312208631862332}};
  for (const auto& [i, v] : probes) CHECK(logits.at(i) == doctest::Approx(v).epsilon(1e-9));
  CHECK(total == doctest::Approx(-60.015720941176262).epsilon(1e-9));
}

TEST_CASE("finite differences agree for the model logits") {
  auto c = test::tiny_config(12, 3);
  c.embed_dim = 8;
  c.num_layers = 1;
  c.trainable_groups = test::all_groups();
  Model<double> m(c);
  auto tokens = random_tokens(7, m.vocabulary().total(), 2);
  std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(m.vocabulary().audio_end_id());
  std::vector<Tensor<double>> params;
  for (auto& p : m.parameters()) params.push_back(p.value);
  auto r = test::check_gradients(params, [&] { return numerics::cross_entropy_rows(m.forward(tokens), targets); });
  CHECK(r.max_rel_error < test::kFdTolerance);
}

}  // TEST_SUITE
