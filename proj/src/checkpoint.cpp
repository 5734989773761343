#include "dpmem/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace dpmem::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

const Entry& Container::entry(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw CheckpointError("checkpoint has no entry '" + name + "'");
}

namespace {

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw CheckpointError("unsupported dtype '" + dtype + "'");
}

template <typename T>
std::string dtype_of() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw CheckpointError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

void write_container(const std::string& path, const Container& c) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : c.entries) {
    if (e.bytes.size() != numerics::element_count(e.shape) * dtype_size(e.dtype)) {
      throw CheckpointError("entry '" + e.name + "' has inconsistent byte size");
    }
    manifest.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", offset}});
    offset += e.bytes.size();
  }
  nlohmann::json header = {{"kind", c.kind}, {"config", c.config}, {"manifest", manifest}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : c.entries) out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError(path + ": not a DPMCKPT1 checkpoint");
  const std::uint64_t length = get_u64(in);
  if (length > (1ULL << 30)) throw CheckpointError(path + ": implausible header length");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw CheckpointError(path + ": truncated header");
  Container c;
  std::vector<std::uint64_t> offsets;
  try {
    auto header = nlohmann::json::parse(text);
    c.kind = header.at("kind").get<std::string>();
    c.config = header.at("config");
    for (const auto& m : header.at("manifest")) {
      Entry e;
      e.name = m.at("name").get<std::string>();
      e.shape = m.at("shape").get<numerics::Shape>();
      e.dtype = m.at("dtype").get<std::string>();
      offsets.push_back(m.at("offset").get<std::uint64_t>());
      c.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(path + ": malformed header: " + ex.what());
  }
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < c.entries.size(); ++i) {
    auto& e = c.entries[i];
    if (offsets[i] != expected) throw CheckpointError(path + ": entry '" + e.name + "' has an unexpected offset");
    e.bytes.resize(numerics::element_count(e.shape) * dtype_size(e.dtype));
    in.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    if (!in) throw CheckpointError(path + ": truncated blob for '" + e.name + "'");
    expected += e.bytes.size();
  }
  return c;
}

template <typename T>
Entry make_entry(const std::string& name, const numerics::Tensor<T>& tensor) {
  Entry e{name, tensor.shape(), dtype_of<T>(), {}};
  e.bytes.resize(tensor.size() * sizeof(T));
  std::memcpy(e.bytes.data(), tensor.data().data(), e.bytes.size());
  return e;
}

template <typename T>
void load_entry(const Entry& entry, numerics::Tensor<T>& tensor) {
  if (entry.dtype != dtype_of<T>()) {
    throw CheckpointError("entry '" + entry.name + "' is " + entry.dtype + ", expected " + dtype_of<T>());
  }
  if (entry.shape != tensor.shape()) {
    throw CheckpointError("entry '" + entry.name + "' has shape " + numerics::to_string(entry.shape) +
                          ", expected " + numerics::to_string(tensor.shape()));
  }
  std::memcpy(tensor.mutable_data().data(), entry.bytes.data(), entry.bytes.size());
}

namespace {

template <typename T>
nlohmann::json adapter_header(const lora::LoraAdapter<T>& a) {
  const auto& o = a.options();
  return {{"name", a.name()}, {"rank", o.rank}, {"alpha", o.alpha}, {"init_std", o.init_std}, {"seed", o.seed}};
}

template <typename T>
void append_adapter(Container& c, const lora::LoraAdapter<T>& a) {
  for (std::size_t s = 0; s < a.site_count(); ++s) {
    c.entries.push_back(make_entry(a.name() + "/" + a.sites()[s].name + ".A", a.a(s)));
    c.entries.push_back(make_entry(a.name() + "/" + a.sites()[s].name + ".B", a.b(s)));
  }
}

template <typename T>
std::shared_ptr<lora::LoraAdapter<T>> restore_adapter(const Container& c, const nlohmann::json& h,
                                                      const model::Model<T>& model, std::set<std::string>& used) {
  lora::LoraOptions o;
  o.rank = h.at("rank").get<std::size_t>();
  o.alpha = h.at("alpha").get<double>();
  o.init_std = h.value("init_std", o.init_std);
  o.seed = h.value("seed", o.seed);
  const std::string name = h.at("name").get<std::string>();
  auto adapter = std::make_shared<lora::LoraAdapter<T>>(name, model.linear_sites(), o);
  for (std::size_t s = 0; s < adapter->site_count(); ++s) {
    const std::string base = name + "/" + adapter->sites()[s].name;
    load_entry(c.entry(base + ".A"), adapter->a(s));
    load_entry(c.entry(base + ".B"), adapter->b(s));
    used.insert(base + ".A");
    used.insert(base + ".B");
  }
  adapter->set_trainable(false);
  return adapter;
}

void check_all_used(const Container& c, const std::set<std::string>& used, const std::string& what) {
  if (used.size() != c.entries.size()) {
    for (const auto& e : c.entries) {
      if (!used.count(e.name)) throw CheckpointError(what + ": unexpected entry '" + e.name + "'");
    }
  }
}

}  // namespace

template <typename T>
void save_model(const std::string& path, const model::Model<T>& model) {
  Container c;
  c.kind = "model";
  c.config = {{"model", model::to_json(model.config())}, {"adapters", nlohmann::json::array()}};
  for (const auto& p : model.parameters()) c.entries.push_back(make_entry(p.name, p.value));
  for (const auto* a : model.attached_adapters()) {
    if (a->name() == lora::kTemporaryAdapterName) continue;
    c.config["adapters"].push_back(adapter_header(*a));
    append_adapter(c, *a);
  }
  write_container(path, c);
}

template <typename T>
model::Model<T> load_model(const std::string& path) {
  const Container c = read_container(path);
  if (c.kind != "model") throw CheckpointError(path + ": expected a model checkpoint, found '" + c.kind + "'");
  model::ModelConfig config;
  try {
    config = model::model_config_from_json(c.config.at("model"));
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(path + ": bad model config: " + ex.what());
  }
  model::Model<T> m(config);
  std::set<std::string> used;
  for (auto& p : m.parameters()) {
    load_entry(c.entry(p.name), p.value);
    used.insert(p.name);
  }
  for (const auto& h : c.config.value("adapters", nlohmann::json::array())) {
    m.attach_adapter(restore_adapter<T>(c, h, m, used));
  }
  check_all_used(c, used, path);
  return m;
}

template <typename T>
void save_adapter(const std::string& path, const lora::LoraAdapter<T>& adapter) {
  Container c;
  c.kind = "adapter";
  c.config = adapter_header(adapter);
  append_adapter(c, adapter);
  write_container(path, c);
}

template <typename T>
std::shared_ptr<lora::LoraAdapter<T>> load_adapter(const std::string& path, const model::Model<T>& model) {
  const Container c = read_container(path);
  if (c.kind != "adapter") throw CheckpointError(path + ": expected an adapter checkpoint, found '" + c.kind + "'");
  std::set<std::string> used;
  auto a = restore_adapter<T>(c, c.config, model, used);
  check_all_used(c, used, path);
  return a;
}

template <typename T>
void save_classifier(const std::string& path, const baselines::Classifier<T>& classifier) {
  Container c;
  c.kind = "classifier";
  c.config = baselines::to_json(classifier.config());
  for (const auto& p : classifier.parameters()) c.entries.push_back(make_entry(p.name, p.value));
  write_container(path, c);
}

template <typename T>
baselines::Classifier<T> load_classifier(const std::string& path) {
  const Container c = read_container(path);
  if (c.kind != "classifier") {
    throw CheckpointError(path + ": expected a classifier checkpoint, found '" + c.kind + "'");
  }
  baselines::Classifier<T> classifier(baselines::classifier_config_from_json(c.config));
  std::set<std::string> used;
  for (auto& p : classifier.parameters()) {
    load_entry(c.entry(p.name), p.value);
    used.insert(p.name);
  }
  check_all_used(c, used, path);
  return classifier;
}

#define DPMEM_INSTANTIATE(T)                                                                            \
  template Entry make_entry<T>(const std::string&, const numerics::Tensor<T>&);                         \
  template void load_entry<T>(const Entry&, numerics::Tensor<T>&);                                      \
  template void save_model<T>(const std::string&, const model::Model<T>&);                              \
  template model::Model<T> load_model<T>(const std::string&);                                           \
  template void save_adapter<T>(const std::string&, const lora::LoraAdapter<T>&);                       \
  template std::shared_ptr<lora::LoraAdapter<T>> load_adapter<T>(const std::string&, const model::Model<T>&); \
  template void save_classifier<T>(const std::string&, const baselines::Classifier<T>&);                \
  template baselines::Classifier<T> load_classifier<T>(const std::string&);

DPMEM_INSTANTIATE(float)
DPMEM_INSTANTIATE(double)

#undef DPMEM_INSTANTIATE

}  // namespace dpmem::checkpoint
