#include "dpmem/lora.hpp"

#include <random>

#include "dpmem/hash.hpp"

namespace dpmem::lora {

template <typename T>
LoraAdapter<T>::LoraAdapter(std::string name, std::span<const model::LinearSite> sites, LoraOptions options)
    : name_(std::move(name)), sites_(sites.begin(), sites.end()), options_(options) {
  if (options_.rank == 0) throw std::invalid_argument("lora: rank must be positive");
  if (!(options_.alpha > 0.0)) throw std::invalid_argument("lora: alpha must be positive");
  if (name_.empty()) throw std::invalid_argument("lora: adapter needs a name");
  std::mt19937_64 rng(options_.seed);
  std::normal_distribution<double> normal(0.0, options_.init_std);
  for (const auto& site : sites_) {
    std::vector<T> a_values(options_.rank * site.in_features);
    for (auto& v : a_values) v = static_cast<T>(normal(rng));
    a_.push_back(Tensor<T>::from({options_.rank, site.in_features}, std::move(a_values), true));
    b_.push_back(Tensor<T>::zeros({site.out_features, options_.rank}, true));
  }
}

template <typename T>
std::vector<Tensor<T>> LoraAdapter<T>::parameters() const {
  std::vector<Tensor<T>> out;
  out.reserve(2 * a_.size());
  for (std::size_t s = 0; s < a_.size(); ++s) {
    out.push_back(a_[s]);
    out.push_back(b_[s]);
  }
  return out;
}

template <typename T>
std::size_t LoraAdapter<T>::parameter_count() const {
  std::size_t total = 0;
  for (std::size_t s = 0; s < a_.size(); ++s) total += a_[s].size() + b_[s].size();
  return total;
}

template <typename T>
void LoraAdapter<T>::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (std::size_t s = 0; s < a_.size(); ++s) {
    a_[s].set_requires_grad(trainable);
    b_[s].set_requires_grad(trainable);
    if (!trainable) {
      a_[s].drop_grad();
      b_[s].drop_grad();
    }
  }
}

template <typename T>
Tensor<T> LoraAdapter<T>::apply(std::size_t site, const Tensor<T>& x) const {
  Tensor<T> low = numerics::matmul(x, a_.at(site), true);
  Tensor<T> delta = numerics::matmul(low, b_.at(site), true);
  if (scale() == T{1}) return delta;
  return numerics::scale(delta, scale());
}

template <typename T>
std::vector<T> LoraAdapter<T>::dense_delta(std::size_t site) const {
  const auto& s = sites_.at(site);
  const std::size_t r = options_.rank;
  auto a = a_.at(site).data();
  auto b = b_.at(site).data();
  std::vector<T> delta(s.out_features * s.in_features, T{0});
  const T factor = scale();
  for (std::size_t o = 0; o < s.out_features; ++o) {
    for (std::size_t i = 0; i < s.in_features; ++i) {
      T acc{0};
      for (std::size_t k = 0; k < r; ++k) acc += b[o * r + k] * a[k * s.in_features + i];
      delta[o * s.in_features + i] = factor * acc;
    }
  }
  return delta;
}

std::size_t lora_parameter_count(std::span<const model::LinearSite> sites, std::size_t rank) {
  std::size_t total = 0;
  for (const auto& s : sites) total += rank * (s.in_features + s.out_features);
  return total;
}

template <typename T>
std::shared_ptr<LoraAdapter<T>> attach_training_lora(model::Model<T>& model, LoraOptions options,
                                                     const std::string& name) {
  if (model.has_adapter(name)) throw std::invalid_argument("adapter '" + name + "' is already attached");
  auto adapter = std::make_shared<LoraAdapter<T>>(name, model.linear_sites(), options);
  model.freeze_base();
  model.attach_adapter(adapter);
  return adapter;
}

// --- temporary adapter ------------------------------------------------------

template <typename T>
TemporaryLora<T>::TemporaryLora(model::Model<T>& model, const TempLoraOptions& options) : model_(&model) {
  if (model.has_adapter(kTemporaryAdapterName)) {
    throw std::logic_error("a temporary adapter is still attached; discard it before creating another");
  }
  if (!model.base_frozen()) throw std::logic_error("create_temp_lora: base model parameters are not frozen");
  for (const auto* a : model.attached_adapters()) {
    if (a->trainable()) {
      throw std::logic_error("create_temp_lora: adapter '" + a->name() + "' is not frozen");
    }
  }
  adapter_ = std::make_shared<LoraAdapter<T>>(kTemporaryAdapterName, model.linear_sites(), options.lora);
  optimizer_ = std::make_unique<numerics::Optimizer<T>>(options.optimizer, adapter_->parameters());
  model.attach_adapter(adapter_);
  attached_ = true;
}

template <typename T>
TemporaryLora<T>::TemporaryLora(TemporaryLora&& other) noexcept
    : model_(other.model_),
      adapter_(std::move(other.adapter_)),
      optimizer_(std::move(other.optimizer_)),
      attached_(other.attached_) {
  other.attached_ = false;
}

template <typename T>
TemporaryLora<T>::~TemporaryLora() {
  if (attached_) {
    try {
      model_->detach_adapter(kTemporaryAdapterName);
    } catch (...) {
    }
  }
}

template <typename T>
void TemporaryLora<T>::discard() {
  if (!attached_) throw std::logic_error("temporary adapter was already discarded");
  if (model_->adapter(kTemporaryAdapterName) != adapter_) {
    throw std::logic_error("temporary adapter is no longer attached to its model");
  }
  model_->detach_adapter(kTemporaryAdapterName);
  attached_ = false;
  optimizer_.reset();
}

template <typename T>
TemporaryLora<T> create_temp_lora(model::Model<T>& model, const TempLoraOptions& options) {
  return TemporaryLora<T>(model, options);
}

template <typename T>
void discard_temp_lora(model::Model<T>& model, TemporaryLora<T>& temp) {
  if (&temp.model() != &model) {
    throw std::invalid_argument("discard_temp_lora: adapter belongs to a different model");
  }
  temp.discard();
}

template <typename T>
std::string frozen_state_digest(const model::Model<T>& model) {
  Sha256 h;
  auto feed = [&h](const std::string& name, const Tensor<T>& t) {
    h.update(name);
    h.update(numerics::to_string(t.shape()));
    h.update(t.data().data(), t.size() * sizeof(T));
  };
  for (const auto& p : model.parameters()) feed(p.name, p.value);
  for (const auto* a : model.attached_adapters()) {
    if (a->name() == kTemporaryAdapterName) continue;
    for (std::size_t s = 0; s < a->site_count(); ++s) {
      feed(a->name() + "/" + a->sites()[s].name + ".A", a->a(s));
      feed(a->name() + "/" + a->sites()[s].name + ".B", a->b(s));
    }
  }
  return h.hex_digest();
}

#define DPMEM_INSTANTIATE(T)                                                                            \
  template class LoraAdapter<T>;                                                                        \
  template class TemporaryLora<T>;                                                                      \
  template std::shared_ptr<LoraAdapter<T>> attach_training_lora<T>(model::Model<T>&, LoraOptions,      \
                                                                   const std::string&);                \
  template TemporaryLora<T> create_temp_lora<T>(model::Model<T>&, const TempLoraOptions&);             \
  template void discard_temp_lora<T>(model::Model<T>&, TemporaryLora<T>&);                             \
  template std::string frozen_state_digest<T>(const model::Model<T>&);

DPMEM_INSTANTIATE(float)
DPMEM_INSTANTIATE(double)

#undef DPMEM_INSTANTIATE

}  // namespace dpmem::lora
