#pragma once

// Low-rank adapters: delta(W) = (alpha / rank) * B * A on every linear site.
// A starts Gaussian, B starts at zero, so a fresh adapter changes nothing.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dpmem/model.hpp"
#include "dpmem/numerics.hpp"

namespace dpmem::lora {

using numerics::Tensor;

inline constexpr const char* kTrainingAdapterName = "training";
inline constexpr const char* kTemporaryAdapterName = "temporary";

struct LoraOptions {
  std::size_t rank = 8;
  double alpha = 8.0;
  double init_std = 0.02;
  std::uint64_t seed = 0;
};

template <typename T>
class LoraAdapter {
 public:
  LoraAdapter(std::string name, std::span<const model::LinearSite> sites, LoraOptions options);

  const std::string& name() const { return name_; }
  std::size_t rank() const { return options_.rank; }
  double alpha() const { return options_.alpha; }
  T scale() const { return static_cast<T>(options_.alpha / static_cast<double>(options_.rank)); }
  const LoraOptions& options() const { return options_; }
  std::size_t site_count() const { return a_.size(); }
  const std::vector<model::LinearSite>& sites() const { return sites_; }

  // A: [rank x in], B: [out x rank].
  const Tensor<T>& a(std::size_t site) const { return a_.at(site); }
  const Tensor<T>& b(std::size_t site) const { return b_.at(site); }
  Tensor<T>& a(std::size_t site) { return a_.at(site); }
  Tensor<T>& b(std::size_t site) { return b_.at(site); }

  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  bool trainable() const { return trainable_; }
  void set_trainable(bool trainable);

  // (alpha / rank) * (x A^T) B^T for x: [n x in].
  Tensor<T> apply(std::size_t site, const Tensor<T>& x) const;
  // Dense (alpha / rank) * B A, row-major [out x in].
  std::vector<T> dense_delta(std::size_t site) const;

 private:
  std::string name_;
  std::vector<model::LinearSite> sites_;
  LoraOptions options_;
  std::vector<Tensor<T>> a_;
  std::vector<Tensor<T>> b_;
  bool trainable_ = true;
};

// Closed form: sum over sites of rank * (in + out).
std::size_t lora_parameter_count(std::span<const model::LinearSite> sites, std::size_t rank);

// Registers a trainable adapter on every linear site and freezes the base.
template <typename T>
std::shared_ptr<LoraAdapter<T>> attach_training_lora(model::Model<T>& model, LoraOptions options,
                                                     const std::string& name = kTrainingAdapterName);

struct TempLoraOptions {
  LoraOptions lora;
  numerics::OptimizerSettings optimizer{numerics::OptimizerKind::kAdam, 5e-5};
};

// Per-sample adapter stacked on the frozen model, with its own optimizer
// state. Detaches itself on destruction if discard() was never called.
template <typename T>
class TemporaryLora {
 public:
  TemporaryLora(model::Model<T>& model, const TempLoraOptions& options);
  ~TemporaryLora();
  TemporaryLora(TemporaryLora&& other) noexcept;
  TemporaryLora& operator=(TemporaryLora&&) = delete;
  TemporaryLora(const TemporaryLora&) = delete;
  TemporaryLora& operator=(const TemporaryLora&) = delete;

  bool attached() const { return attached_; }
  LoraAdapter<T>& adapter() { return *adapter_; }
  const LoraAdapter<T>& adapter() const { return *adapter_; }
  numerics::Optimizer<T>& optimizer() { return *optimizer_; }
  const model::Model<T>& model() const { return *model_; }

  // Throws std::logic_error when already discarded.
  void discard();

 private:
  model::Model<T>* model_;
  std::shared_ptr<LoraAdapter<T>> adapter_;
  std::unique_ptr<numerics::Optimizer<T>> optimizer_;
  bool attached_ = false;
};

// Requires a frozen base and frozen attached adapters, and no temporary
// adapter already attached.
template <typename T>
TemporaryLora<T> create_temp_lora(model::Model<T>& model, const TempLoraOptions& options);

// Throws std::invalid_argument when the adapter does not belong to model,
// std::logic_error when it was already discarded.
template <typename T>
void discard_temp_lora(model::Model<T>& model, TemporaryLora<T>& temp);

// SHA-256 over every base parameter and every non-temporary adapter.
template <typename T>
std::string frozen_state_digest(const model::Model<T>& model);

}  // namespace dpmem::lora
