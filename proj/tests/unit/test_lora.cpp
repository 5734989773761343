#include <random>

#include "doctest.h"
#include "dpmem/dpm.hpp"
#include "dpmem/lora.hpp"
#include "support.hpp"

using namespace dpmem;
using model::Model;
using model::TokenId;

namespace {

std::vector<TokenId> ramp(std::size_t n, std::size_t vocab) {
  std::vector<TokenId> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<TokenId>((i * 7 + 3) % vocab);
  return t;
}

lora::TempLoraOptions sgd_options(double lr) {
  lora::TempLoraOptions o;
  o.optimizer = {numerics::OptimizerKind::kSgd, lr};
  return o;
}

}  // namespace

TEST_SUITE("lora") {

TEST_CASE("training adapter attach is a no-op on outputs and freezes the base") {
  auto c = test::tiny_config();
  c.trainable_groups = test::all_groups();
  Model<float> m(c);
  const auto tokens = ramp(10, m.vocabulary().total());
  const auto before = m.forward(tokens);
  auto adapter = lora::attach_training_lora(m, {});
  CHECK(m.base_frozen());
  CHECK(adapter->trainable());
  CHECK(test::bitwise_equal(before, m.forward(tokens)));
  for (std::size_t s = 0; s < adapter->site_count(); ++s) {
    for (float b : adapter->b(s).data()) CHECK(b == 0.0f);
  }
}

TEST_CASE("trainable parameter count matches the closed form") {
  Model<float> m(test::tiny_config());
  lora::LoraOptions o;
  o.rank = 3;
  auto adapter = lora::attach_training_lora(m, o);
  CHECK(adapter->parameter_count() == lora::lora_parameter_count(m.linear_sites(), 3));

  // Desk model: d = 128, 4 layers, MLP 4x, vocabulary 261, rank 8.
  Model<float> desk(model::ModelConfig{});
  auto a8 = lora::attach_training_lora(desk, {});
  std::size_t expected = 0;
  for (int layer = 0; layer < 4; ++layer) {
    expected += 4 * 8 * (128 + 128);  // q, k, v, o
    expected += 8 * (128 + 512) * 2;  // up, down
  }
  expected += 8 * (128 + 261);  // output head
  CHECK(expected == 76840);
  CHECK(a8->parameter_count() == expected);
}

TEST_CASE("temporary adapter lifecycle") {
  Model<double> m(test::tiny_config());
  lora::attach_training_lora(m, {});
  const auto tokens = ramp(12, m.vocabulary().total());

  SUBCASE("requires frozen base and frozen adapters") {
    CHECK_THROWS_AS(lora::create_temp_lora(m, {}), std::logic_error);
    m.adapter(lora::kTrainingAdapterName)->set_trainable(false);
    m.set_group_trainable(model::ParamGroup::kNorm, true);
    CHECK_THROWS_AS(lora::create_temp_lora(m, {}), std::logic_error);
  }
  SUBCASE("create leaves predictions unchanged, discard restores them bitwise") {
    auto adapter = m.adapter(lora::kTrainingAdapterName);
    test::randomize_b(*adapter, 4);
    adapter->set_trainable(false);
    const auto before = m.forward(tokens);
    const auto digest = lora::frozen_state_digest(m);
    {
      auto temp = lora::create_temp_lora(m, sgd_options(0.5));
      CHECK(test::bitwise_equal(before, m.forward(tokens)));
      CHECK_THROWS_AS(lora::create_temp_lora(m, {}), std::logic_error);
      dpm::ScheduledStep step{{0, 6}, {6, 12}, std::nullopt};
      for (int i = 0; i < 5; ++i) dpm::dpm_step(m, temp, tokens, step);
      bool moved = false;
      const auto during = m.forward(tokens);
      for (std::size_t i = 0; i < during.size(); ++i) moved |= during.at(i) != before.at(i);
      CHECK(moved);
      lora::discard_temp_lora(m, temp);
      CHECK_THROWS_AS(lora::discard_temp_lora(m, temp), std::logic_error);
    }
    CHECK(test::bitwise_equal(before, m.forward(tokens)));
    CHECK(lora::frozen_state_digest(m) == digest);
    CHECK(m.attached_adapters().size() == 1);
  }
  SUBCASE("consecutive cycles leave no residual parameters") {
    m.adapter(lora::kTrainingAdapterName)->set_trainable(false);
    for (int cycle = 0; cycle < 2; ++cycle) {
      auto temp = lora::create_temp_lora(m, {});
      CHECK(m.has_adapter(lora::kTemporaryAdapterName));
      temp.discard();
      CHECK_FALSE(m.has_adapter(lora::kTemporaryAdapterName));
    }
    CHECK(m.attached_adapters().size() == 1);
  }
  SUBCASE("an adapter from another model is rejected") {
    m.adapter(lora::kTrainingAdapterName)->set_trainable(false);
    Model<double> other(test::tiny_config());
    auto temp = lora::create_temp_lora(other, {});
    CHECK_THROWS_AS(lora::discard_temp_lora(m, temp), std::invalid_argument);
  }
  SUBCASE("scope exit detaches an undiscarded adapter") {
    m.adapter(lora::kTrainingAdapterName)->set_trainable(false);
    { auto temp = lora::create_temp_lora(m, {}); }
    CHECK_FALSE(m.has_adapter(lora::kTemporaryAdapterName));
  }
}

TEST_CASE("fresh optimizer state per temporary adapter") {
  Model<float> m(test::tiny_config());
  lora::attach_training_lora(m, {})->set_trainable(false);
  auto first = lora::create_temp_lora(m, {});
  const auto tokens = ramp(8, m.vocabulary().total());
  dpm::dpm_step(m, first, tokens, {{0, 4}, {4, 8}, std::nullopt});
  CHECK(first.optimizer().step_count() == 1);
  first.discard();
  auto second = lora::create_temp_lora(m, {});
  CHECK(second.optimizer().step_count() == 0);
  CHECK(second.optimizer().has_moments());
}

TEST_CASE("stacked adapters compose additively") {
  Model<double> m(test::tiny_config());
  auto train = lora::attach_training_lora(m, {});
  test::randomize_b(*train, 10);
  train->set_trainable(false);
  lora::TempLoraOptions o;
  o.lora.seed = 77;
  auto temp = lora::create_temp_lora(m, o);
  test::randomize_b(temp.adapter(), 11);
  const auto tokens = ramp(14, m.vocabulary().total());
  const auto stacked = m.forward(tokens);

  Model<double> summed(test::tiny_config());
  for (std::size_t s = 0; s < summed.linear_sites().size(); ++s) {
    auto w = summed.site_weight(s).mutable_data();
    const auto d1 = train->dense_delta(s), d2 = temp.adapter().dense_delta(s);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += d1[i] + d2[i];
  }
  const auto reference = summed.forward(tokens);
  for (std::size_t i = 0; i < stacked.size(); ++i) {
    CHECK(std::abs(stacked.at(i) - reference.at(i)) <= 1e-5 * std::max(1.0, std::abs(reference.at(i))));
  }
}

TEST_CASE("frozen digest tracks base and training adapter but not the temporary one") {
  Model<float> m(test::tiny_config());
  auto train = lora::attach_training_lora(m, {});
  train->set_trainable(false);
  const auto d0 = lora::frozen_state_digest(m);
  CHECK(d0.size() == 64);
  auto temp = lora::create_temp_lora(m, {});
  test::randomize_b(temp.adapter(), 3);
  CHECK(lora::frozen_state_digest(m) == d0);
  temp.discard();
  train->b(0).mutable_data()[0] += 1.0f;
  CHECK(lora::frozen_state_digest(m) != d0);
}

}  // TEST_SUITE
