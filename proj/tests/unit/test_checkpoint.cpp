#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dpmem/checkpoint.hpp"
#include "support.hpp"

using namespace dpmem;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dpmem-ckpt-" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<model::TokenId> probe_tokens(std::size_t vocab) {
  std::vector<model::TokenId> t(11);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<model::TokenId>((5 * i + 2) % vocab);
  return t;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("model with its training adapter round-trips bitwise") {
  TempDir dir;
  model::Model<float> m(test::tiny_config(32, 21));
  auto adapter = lora::attach_training_lora(m, {});
  test::randomize_b(*adapter, 8);
  adapter->set_trainable(false);
  const auto tokens = probe_tokens(m.vocabulary().total());
  const auto before = m.forward(tokens);
  checkpoint::save_model(dir.file("m.ckpt"), m);

  auto loaded = checkpoint::load_model<float>(dir.file("m.ckpt"));
  CHECK(loaded.base_frozen());
  REQUIRE(loaded.has_adapter(lora::kTrainingAdapterName));
  CHECK_FALSE(loaded.adapter(lora::kTrainingAdapterName)->trainable());
  CHECK(test::bitwise_equal(before, loaded.forward(tokens)));
  CHECK(lora::frozen_state_digest(loaded) == lora::frozen_state_digest(m));
  CHECK(model::to_json(loaded.config()) == model::to_json(m.config()));
}

TEST_CASE("double-precision weights keep their dtype") {
  TempDir dir;
  model::Model<double> m(test::tiny_config(16, 3));
  checkpoint::save_model(dir.file("d.ckpt"), m);
  CHECK(checkpoint::read_container(dir.file("d.ckpt")).entries.front().dtype == "f64");
  CHECK_THROWS_AS(checkpoint::load_model<float>(dir.file("d.ckpt")), checkpoint::CheckpointError);
  auto loaded = checkpoint::load_model<double>(dir.file("d.ckpt"));
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(test::bitwise_equal(m.parameters()[i].value, loaded.parameters()[i].value));
  }
}

TEST_CASE("standalone adapter round trip") {
  TempDir dir;
  model::Model<float> m(test::tiny_config());
  auto adapter = lora::attach_training_lora(m, {5, 10.0, 0.1, 2});
  test::randomize_b(*adapter, 1);
  checkpoint::save_adapter(dir.file("a.ckpt"), *adapter);
  auto loaded = checkpoint::load_adapter<float>(dir.file("a.ckpt"), m);
  REQUIRE(loaded->site_count() == adapter->site_count());
  for (std::size_t s = 0; s < adapter->site_count(); ++s) {
    CHECK(test::bitwise_equal(adapter->a(s), loaded->a(s)));
    CHECK(test::bitwise_equal(adapter->b(s), loaded->b(s)));
  }
  auto wide = test::tiny_config();
  wide.embed_dim = 32;
  model::Model<float> mismatched(wide);
  CHECK_THROWS_AS(checkpoint::load_adapter<float>(dir.file("a.ckpt"), mismatched), checkpoint::CheckpointError);
}

TEST_CASE("classifier round trip") {
  TempDir dir;
  baselines::ClassifierConfig c;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.window = 16;
  c.codebook_size = 24;
  c.seed = 4;
  baselines::Classifier<float> cls(c);
  checkpoint::save_classifier(dir.file("c.ckpt"), cls);
  auto loaded = checkpoint::load_classifier<float>(dir.file("c.ckpt"));
  const auto d = test::random_dialogue(3, 2, 5, 24, 4, 6);
  CHECK(cls.predict_proba(d) == loaded.predict_proba(d));
  CHECK(baselines::to_json(loaded.config()) == baselines::to_json(c));
  CHECK_THROWS_AS(checkpoint::load_model<float>(dir.file("c.ckpt")), checkpoint::CheckpointError);
}

TEST_CASE("corrupt files are rejected") {
  TempDir dir;
  model::Model<float> m(test::tiny_config(16, 2));
  checkpoint::save_model(dir.file("ok.ckpt"), m);
  std::string bytes;
  {
    std::ifstream in(dir.file("ok.ckpt"), std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir.file(name), std::ios::binary);
    out << content;
    return dir.file(name);
  };
  CHECK(bytes.compare(0, 8, "DPMCKPT1") == 0);
  auto bad_magic = bytes;
  bad_magic[3] = 'X';
  CHECK_THROWS_AS(checkpoint::read_container(write("magic.ckpt", bad_magic)), checkpoint::CheckpointError);
  CHECK_THROWS_AS(checkpoint::read_container(write("short.ckpt", bytes.substr(0, bytes.size() - 5))),
                  checkpoint::CheckpointError);
  CHECK_THROWS_AS(checkpoint::read_container(write("header.ckpt", bytes.substr(0, 20))), checkpoint::CheckpointError);
  CHECK_THROWS_AS(checkpoint::read_container(write("empty.ckpt", "")), checkpoint::CheckpointError);
  CHECK_THROWS_AS(checkpoint::read_container(dir.file("missing.ckpt")), checkpoint::CheckpointError);
}

TEST_CASE("container entries by name") {
  TempDir dir;
  checkpoint::Container c;
  c.kind = "test";
  c.config = {{"x", 1}};
  auto t = numerics::Tensor<float>::from({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  c.entries.push_back(checkpoint::make_entry("t", t));
  checkpoint::write_container(dir.file("c.ckpt"), c);
  const auto back = checkpoint::read_container(dir.file("c.ckpt"));
  CHECK(back.kind == "test");
  CHECK(back.config == c.config);
  auto out = numerics::Tensor<float>::zeros({2, 2});
  checkpoint::load_entry(back.entry("t"), out);
  CHECK(test::bitwise_equal(out, t));
  auto wrong = numerics::Tensor<float>::zeros({4});
  CHECK_THROWS_AS(checkpoint::load_entry(back.entry("t"), wrong), checkpoint::CheckpointError);
  CHECK_THROWS_AS(back.entry("nope"), checkpoint::CheckpointError);
}

}  // TEST_SUITE
