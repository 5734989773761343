#pragma once

// Binary checkpoint container: the magic bytes "DPMCKPT1", a little-endian
// uint64 header length, a JSON header {kind, config, manifest}, then raw
// little-endian tensor blobs in manifest order. Manifest entries carry
// name, shape, dtype and byte offset relative to the start of the blob area.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpmem/baselines.hpp"
#include "dpmem/lora.hpp"
#include "dpmem/model.hpp"
#include "json.hpp"

namespace dpmem::checkpoint {

inline constexpr char kMagic[8] = {'D', 'P', 'M', 'C', 'K', 'P', 'T', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Entry {
  std::string name;
  numerics::Shape shape;
  std::string dtype;  // "f32" or "f64"
  std::vector<std::uint8_t> bytes;
};

struct Container {
  std::string kind;
  nlohmann::json config;
  std::vector<Entry> entries;

  const Entry& entry(const std::string& name) const;
};

void write_container(const std::string& path, const Container& container);
Container read_container(const std::string& path);

template <typename T>
Entry make_entry(const std::string& name, const numerics::Tensor<T>& tensor);
// Copies an entry into a tensor of the same shape; dtype must match T.
template <typename T>
void load_entry(const Entry& entry, numerics::Tensor<T>& tensor);

// Base model weights plus every attached non-temporary adapter, whose
// entries are prefixed "<adapter>/".
template <typename T>
void save_model(const std::string& path, const model::Model<T>& model);
// Rebuilds the model from the stored config and re-attaches stored adapters
// frozen.
template <typename T>
model::Model<T> load_model(const std::string& path);

template <typename T>
void save_adapter(const std::string& path, const lora::LoraAdapter<T>& adapter);
template <typename T>
std::shared_ptr<lora::LoraAdapter<T>> load_adapter(const std::string& path, const model::Model<T>& model);

template <typename T>
void save_classifier(const std::string& path, const baselines::Classifier<T>& classifier);
template <typename T>
baselines::Classifier<T> load_classifier(const std::string& path);

}  // namespace dpmem::checkpoint
