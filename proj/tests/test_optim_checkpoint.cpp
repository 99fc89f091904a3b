#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "opc/checkpoint.hpp"
#include "opc/optim.hpp"

using namespace opc;

TEST_CASE("adam follows the closed-form update with bias correction") {
  ParamStore store;
  store.add("w", Tensor({2}, {1.0, -2.0}));
  AdamOptimizer adam(0.1, 0.9, 0.999, 1e-8);
  GradMap g;
  g["w"] = Tensor({2}, {0.5, -0.25});

  double m[2] = {0, 0}, v[2] = {0, 0}, p[2] = {1.0, -2.0};
  for (int t = 1; t <= 3; ++t) {
    adam.step(store, g);
    for (int i = 0; i < 2; ++i) {
      double gi = g["w"][i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      double mhat = m[i] / (1.0 - std::pow(0.9, t));
      double vhat = v[i] / (1.0 - std::pow(0.999, t));
      p[i] -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(store.at("w")[i] == doctest::Approx(p[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("rmsprop follows the closed-form update") {
  ParamStore store;
  store.add("w", Tensor({1}, {3.0}));
  RMSPropOptimizer rp(0.01, 0.9, 1e-8);
  GradMap g;
  g["w"] = Tensor({1}, {2.0});

  double ms = 0.0, p = 3.0;
  for (int t = 0; t < 4; ++t) {
    rp.step(store, g);
    ms = 0.9 * ms + 0.1 * 4.0;
    p -= 0.01 * 2.0 / (std::sqrt(ms) + 1e-8);
    CHECK(store.at("w")[0] == doctest::Approx(p).epsilon(1e-12));
  }
}

TEST_CASE("optimizer prefix filters which parameters move") {
  ParamStore store;
  store.add("phi/w", Tensor({1}, {1.0}));
  store.add("zeta/w", Tensor({1}, {1.0}));
  GradMap g;
  g["phi/w"] = Tensor({1}, {1.0});
  g["zeta/w"] = Tensor({1}, {1.0});
  AdamOptimizer adam(0.1);
  adam.step(store, g, "phi/");
  CHECK(store.at("phi/w")[0] != 1.0);
  CHECK(store.at("zeta/w")[0] == 1.0);
}

TEST_CASE("optimizer state round-trips bit-exactly") {
  ParamStore a, b;
  a.add("w", Tensor({3}, {0.1, 0.2, 0.3}));
  b.add("w", Tensor({3}, {0.1, 0.2, 0.3}));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  AdamOptimizer adam_a(0.05), adam_b(0.05);
  RMSPropOptimizer rp_a(0.02), rp_b(0.02);
  auto rand_grad = [&]() {
    GradMap g;
    g["w"] = Tensor({3}, {u(rng), u(rng), u(rng)});
    return g;
  };
  std::vector<GradMap> warm{rand_grad(), rand_grad()}, cont{rand_grad(), rand_grad()};
  for (const auto& g : warm) {
    adam_a.step(a, g);
    rp_a.step(a, g);
    adam_b.step(b, g);
    rp_b.step(b, g);
  }

  // Serialize b's state into fresh optimizers, then continue both in lockstep.
  AdamOptimizer adam_c(0.05);
  RMSPropOptimizer rp_c(0.02);
  adam_c.load_state("opt/adam", adam_b.state_tensors("opt/adam"));
  rp_c.load_state("opt/rmsprop", rp_b.state_tensors("opt/rmsprop"));
  for (const auto& g : cont) {
    adam_a.step(a, g);
    rp_a.step(a, g);
    adam_c.step(b, g);
    rp_c.step(b, g);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.at("w")[i] == b.at("w")[i]);
}

TEST_CASE("checkpoint archive round-trips tensors and metadata bit-exactly") {
  std::map<std::string, Tensor> tensors;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  Tensor big({4, 7});
  for (std::size_t i = 0; i < big.size(); ++i) big[i] = u(rng);
  big[0] = 0.1 + 0.2;  // value with no short decimal form
  tensors.emplace("a/b/c", big);
  tensors.emplace("scalar", Tensor::scalar(-0.0));
  tensors.emplace("rank3", Tensor({2, 1, 3}, {1, 2, 3, 4, 5, 6}));

  const std::string path = "/tmp/opc_test_ckpt.opc";
  save_checkpoint(path, tensors, "meta line\nsecond line");
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.metadata == "meta line\nsecond line");
  REQUIRE(loaded.tensors.size() == tensors.size());
  for (const auto& [name, t] : tensors) {
    REQUIRE(loaded.tensors.count(name) == 1);
    const Tensor& r = loaded.tensors.at(name);
    REQUIRE(r.shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(r[i] == t[i]);
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects missing and corrupt files") {
  CHECK_THROWS_AS(load_checkpoint("/tmp/opc_no_such_file.opc"), std::runtime_error);
  const std::string path = "/tmp/opc_bad_magic.opc";
  FILE* f = std::fopen(path.c_str(), "wb");
  std::fputs("NOTACKPT garbage", f);
  std::fclose(f);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("uniform_init stays within the fan-in bound") {
  std::mt19937_64 rng(3);
  Tensor t = uniform_init({100}, 16, rng);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::fabs(t[i]) <= 0.25);
}
