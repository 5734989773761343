#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dpmem/corpus.hpp"
#include "dpmem/lora.hpp"
#include "dpmem/model.hpp"
#include "dpmem/numerics.hpp"

namespace dpmem::test {

using numerics::Tensor;

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;
// Gradients below this magnitude are compared on an absolute scale.
inline constexpr double kFdFloor = 1e-6;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Central differences of loss() against the analytic gradients of params.
// loss() must rebuild its graph from scratch on every call. With
// max_per_tensor > 0 only that many randomly drawn coordinates of each
// tensor are perturbed.
inline GradCheck check_gradients(std::vector<Tensor<double>> params,
                                 const std::function<Tensor<double>()>& loss, std::size_t max_per_tensor = 0,
                                 std::uint64_t seed = 0) {
  numerics::Tape<double>::current().clear();
  for (auto& p : params) p.drop_grad();
  Tensor<double> l = loss();
  numerics::backward(l);
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.size(), 0.0);
    }
  }
  GradCheck out;
  numerics::NoGradGuard guard;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    std::vector<std::size_t> coords(data.size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    if (max_per_tensor > 0 && coords.size() > max_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_per_tensor);
    }
    for (std::size_t k : coords) {
      const double saved = data[k];
      data[k] = saved + kFdStep;
      const double up = loss().item();
      data[k] = saved - kFdStep;
      const double down = loss().item();
      data[k] = saved;
      const double numeric = (up - down) / (2.0 * kFdStep);
      const double a = analytic[i][k];
      const double denom = std::max({std::abs(a), std::abs(numeric), kFdFloor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

inline Tensor<double> random_tensor(numerics::Shape shape, std::mt19937_64& rng, double scale = 1.0,
                                    bool requires_grad = true) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(numerics::element_count(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

inline model::ModelConfig tiny_config(std::size_t n_limit = 32, std::uint64_t seed = 1) {
  model::ModelConfig c;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.n_limit = n_limit;
  c.vocabulary = {0, 24, 4};
  c.seed = seed;
  c.init_std = 0.1;
  return c;
}

inline std::vector<model::ParamGroup> all_groups() {
  using model::ParamGroup;
  return {ParamGroup::kTokenEmbedding, ParamGroup::kPositionEmbedding, ParamGroup::kAttention,
          ParamGroup::kMlp,            ParamGroup::kNorm,              ParamGroup::kHead};
}

// Fills every B matrix so the adapter has a nonzero delta.
template <typename T>
void randomize_b(lora::LoraAdapter<T>& adapter, std::uint64_t seed, double scale = 0.1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (std::size_t s = 0; s < adapter.site_count(); ++s) {
    for (auto& v : adapter.b(s).mutable_data()) v = static_cast<T>(normal(rng));
  }
}

inline corpus::DialogueSample random_dialogue(std::size_t sentences, std::size_t min_len, std::size_t max_len,
                                              std::size_t codebook, std::size_t emotions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> code(0, static_cast<int>(codebook) - 1);
  std::uniform_int_distribution<std::size_t> emo(0, emotions - 1);
  corpus::DialogueSample d;
  d.dialogue_id = seed;
  d.seed = seed;
  for (std::size_t i = 0; i < sentences; ++i) {
    std::vector<corpus::Code> s(len(rng));
    for (auto& c : s) c = code(rng);
    d.sentences.push_back(std::move(s));
    d.emotions.push_back(emo(rng));
  }
  return d;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace dpmem::test
