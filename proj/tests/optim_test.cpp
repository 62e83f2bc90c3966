#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gran/checkpoint.hpp"
#include "gran/optim.hpp"

using gran::ParamStore;
using gran::Tensor;

namespace {

std::filesystem::path temp_file(const char* tag) {
  return std::filesystem::temp_directory_path() / (std::string("gran_optim_test_") + tag);
}

}  // namespace

TEST_CASE("adam first step moves a scalar parameter by ~lr") {
  ParamStore<double> store;
  auto& p = store.add("w", Tensor<double>::from({1}, {1.0}));
  p.mutable_grad()[0] = 1.0;
  gran::adam_step(store, 0.1);
  // bias-corrected first step: lr * 1 / (1 + eps)
  CHECK(std::abs(p.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12);
  CHECK(p.grad()[0] == 0.0);  // gradients consumed
  CHECK(store.step_count() == 1);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  ParamStore<double> store;
  auto& p = store.add("w", Tensor<double>::from({2}, {3.0, -4.0}));
  p.mutable_grad();  // allocate zeros
  gran::adam_step(store, 0.5);
  CHECK(p.data()[0] == 3.0);
  CHECK(p.data()[1] == -4.0);
}

TEST_CASE("adam determinism: identical params with identical grads update identically") {
  ParamStore<double> store;
  auto& a = store.add("a", Tensor<double>::from({1}, {0.7}));
  auto& b = store.add("b", Tensor<double>::from({1}, {0.7}));
  for (int step = 0; step < 5; ++step) {
    a.mutable_grad()[0] = 0.3 * (step + 1);
    b.mutable_grad()[0] = 0.3 * (step + 1);
    gran::adam_step(store, 1e-2);
    CHECK(a.data()[0] == b.data()[0]);
  }
}

TEST_CASE("adam with lr=0 is a no-op on parameters") {
  ParamStore<float> store;
  auto& p = store.add("w", Tensor<float>::from({3}, {1.f, 2.f, 3.f}));
  auto g = p.mutable_grad();
  g[0] = 0.5f;
  g[1] = -2.f;
  g[2] = 9.f;
  gran::adam_step(store, 0.0);
  CHECK(p.data()[0] == 1.f);
  CHECK(p.data()[1] == 2.f);
  CHECK(p.data()[2] == 3.f);
}

TEST_CASE("adam names the parameter whose gradient is missing") {
  ParamStore<double> store;
  store.add("present", Tensor<double>::from({1}, {1.0})).mutable_grad();
  store.add("embed.table", Tensor<double>::from({1}, {1.0}));
  try {
    gran::adam_step(store, 0.1);
    FAIL("expected error");
  } catch (const gran::contract_error& e) {
    CHECK(std::string(e.what()).find("embed.table") != std::string::npos);
  }
}

TEST_CASE("lr schedule anchors") {
  auto s = gran::LrSchedule::make(5e-4, 100);
  CHECK(s.warmup_steps == 10);
  CHECK(gran::lr_at(s, 10) == 5e-4);
  CHECK(gran::lr_at(s, 55) == 2.5e-4);
  CHECK(gran::lr_at(s, 100) == 0.0);
  CHECK(gran::lr_at(s, 0) == 5e-4 / 10);  // ramps linearly from near zero
  CHECK(gran::lr_at(s, 4) < gran::lr_at(s, 5));
  CHECK_THROWS_AS(gran::lr_at(s, -1), gran::input_error);
  CHECK_THROWS_AS(gran::lr_at(s, 101), gran::input_error);

  // warmup is ceil(10%)
  CHECK(gran::LrSchedule::make(1.0, 101).warmup_steps == 11);
  CHECK(gran::LrSchedule::make(1.0, 7).warmup_steps == 1);
}

TEST_CASE("checkpoint round-trips a float store bit-exactly") {
  ParamStore<float> store;
  gran::Rng rng(17);
  std::vector<float> w1(12), w2(5);
  for (auto& v : w1) v = float(rng.normal());
  for (auto& v : w2) v = float(rng.normal());
  store.add("layer.0.attn.Wq", Tensor<float>::from({3, 4}, std::move(w1)));
  store.add("head.b1", Tensor<float>::from({5}, std::move(w2)));

  // a few adam steps so moments exist
  for (int i = 0; i < 3; ++i) {
    for (const auto& name : store.names()) {
      auto g = store.at(name).mutable_grad();
      for (auto& v : g) v = float(rng.normal());
    }
    gran::adam_step(store, 1e-3);
  }

  const auto path = temp_file("roundtrip.ckpt");
  gran::save_checkpoint(path.string(), gran::checkpoint_from_store(store, "kind = test\n"));
  auto loaded = gran::load_checkpoint(path.string());
  CHECK(loaded.meta == "kind = test\n");

  ParamStore<float> restored;
  restored.add("layer.0.attn.Wq", Tensor<float>::zeros({3, 4}));
  restored.add("head.b1", Tensor<float>::zeros({5}));
  gran::load_into_store(loaded, restored);
  for (const auto& name : store.names()) {
    auto a = store.at(name).data();
    auto b = restored.at(name).data();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] == b[i]);
      CHECK(restored.find_moments(name)->m[i] == store.find_moments(name)->m[i]);
      CHECK(restored.find_moments(name)->v[i] == store.find_moments(name)->v[i]);
    }
  }
  CHECK(restored.step_count() == store.step_count());

  // re-saving the restored store reproduces the file byte for byte
  const auto path2 = temp_file("roundtrip2.ckpt");
  gran::save_checkpoint(path2.string(), gran::checkpoint_from_store(restored, "kind = test\n"));
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint loader rejects shape mismatches and missing entries") {
  ParamStore<float> store;
  store.add("w", Tensor<float>::from({2, 2}, {1, 2, 3, 4}));
  auto ckpt = gran::checkpoint_from_store(store, "");

  ParamStore<float> wrong_shape;
  wrong_shape.add("w", Tensor<float>::zeros({4}));
  CHECK_THROWS_AS(gran::load_into_store(ckpt, wrong_shape), gran::input_error);

  ParamStore<float> missing;
  missing.add("other", Tensor<float>::zeros({2, 2}));
  CHECK_THROWS_AS(gran::load_into_store(ckpt, missing), gran::input_error);
}
