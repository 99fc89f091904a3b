#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "opc/env.hpp"

using namespace opc;

namespace {

EnvConfig desk_env() {
  EnvConfig ec;
  ec.image_side = 32;
  ec.target_radius = 3.0;
  ec.episode_len = 200;
  return ec;
}

}  // namespace

TEST_CASE("trajectory is a pure function of seed and actions") {
  EnvConfig ec = desk_env();
  WaterworldEnv a(ec, 42), b(ec, 42);
  std::mt19937_64 rng(1);
  ObservationFrame fa = a.reset(42), fb = b.reset(42);
  CHECK(fa.pixels == fb.pixels);
  CHECK(fa.labels == fb.labels);
  for (int t = 0; t < 50; ++t) {
    Action act = static_cast<Action>(rng() % kNumActions);
    StepResult ra = a.step(act), rb = b.step(act);
    CHECK(ra.reward == rb.reward);
    CHECK(ra.frame.pixels == rb.frame.pixels);
    CHECK(ra.frame.labels == rb.frame.labels);
  }
}

TEST_CASE("different seeds give different initial frames") {
  EnvConfig ec = desk_env();
  WaterworldEnv a(ec, 1), b(ec, 2);
  CHECK(a.reset(1).pixels != b.reset(2).pixels);
}

TEST_CASE("state serialization resumes the trajectory bit-exactly") {
  EnvConfig ec = desk_env();
  WaterworldEnv a(ec, 7);
  a.reset(7);
  for (int t = 0; t < 20; ++t) a.step(Action::Left);
  std::string blob = a.serialize_state();

  WaterworldEnv b(ec, 999);
  b.reset(999);
  b.restore_state(blob);
  CHECK(b.step_count() == a.step_count());
  for (int t = 0; t < 30; ++t) {
    StepResult ra = a.step(Action::Up), rb = b.step(Action::Up);
    CHECK(ra.reward == rb.reward);
    CHECK(ra.frame.pixels == rb.frame.pixels);
    CHECK(ra.frame.labels == rb.frame.labels);
  }
}

TEST_CASE("rendered frames are binary with labels matching foreground") {
  EnvConfig ec = desk_env();
  ec.noise_p = 0.0;  // label-pixel correspondence only holds pre-noise
  WaterworldEnv env(ec, 11);
  ObservationFrame f = env.reset(11);
  REQUIRE(f.size() == ec.image_side * ec.image_side);
  REQUIRE(f.labels.size() == f.size());
  std::size_t fg = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    CHECK((f.pixels[i] == 0.0 || f.pixels[i] == 1.0));
    // Noise-free render: label is nonzero exactly where a pixel is lit.
    CHECK((f.labels[i] != 0) == (f.pixels[i] == 1.0));
    if (f.labels[i] != 0) {
      ++fg;
      CHECK(f.labels[i] >= 1);
      CHECK(f.labels[i] <= static_cast<int>(1 + ec.num_food + ec.num_poison));
    }
  }
  CHECK(fg > 0);  // all entities visible at reset
}

TEST_CASE("all entities appear in the initial label map") {
  EnvConfig ec = desk_env();
  WaterworldEnv env(ec, 23);
  ObservationFrame f = env.reset(23);
  const int ids = static_cast<int>(1 + ec.num_food + ec.num_poison);
  std::vector<bool> seen(ids + 1, false);
  for (int lab : f.labels)
    if (lab > 0) seen[lab] = true;
  for (int id = 1; id <= ids; ++id) CHECK(seen[id]);
}

TEST_CASE("noise flips pixels at the configured rate and leaves labels alone") {
  ObservationFrame f;
  f.side = 1000;
  f.pixels.assign(1000 * 1000, 0.0);
  f.labels.assign(1000 * 1000, 5);
  std::mt19937_64 rng(123);
  add_noise(f, 0.2, rng);
  std::size_t flipped = 0;
  for (double p : f.pixels) {
    CHECK((p == 0.0 || p == 1.0));
    if (p == 1.0) ++flipped;
  }
  const double rate = static_cast<double>(flipped) / f.pixels.size();
  CHECK(rate > 0.19);
  CHECK(rate < 0.21);
  for (int lab : f.labels) CHECK(lab == 5);
}

TEST_CASE("noise at p=0 is the identity") {
  EnvConfig ec = desk_env();
  WaterworldEnv env(ec, 3);
  ObservationFrame f = env.reset(3);
  ObservationFrame g = f;
  std::mt19937_64 rng(1);
  add_noise(g, 0.0, rng);
  CHECK(f.pixels == g.pixels);
}

TEST_CASE("agent speed stays clamped and positions stay inside the frame") {
  EnvConfig ec = desk_env();
  WaterworldEnv env(ec, 31);
  env.reset(31);
  for (int t = 0; t < 200; ++t) {
    env.step(Action::Right);  // constant thrust would exceed max_speed unclamped
    const EnvState& s = env.state();
    for (const Entity& e : s.entities) {
      // Food is a rectangle with a reduced half-height; circles are symmetric.
      const double rx = e.kind == EntityKind::Agent ? ec.agent_radius() : ec.target_radius;
      const double ry = e.kind == EntityKind::Food ? 0.6 * ec.target_radius : rx;
      const double speed = std::sqrt(e.vel.x * e.vel.x + e.vel.y * e.vel.y);
      if (e.kind == EntityKind::Agent) CHECK(speed <= ec.max_speed + 1e-9);
      CHECK(e.pos.x >= rx - 1e-9);
      CHECK(e.pos.x <= ec.image_side - rx + 1e-9);
      CHECK(e.pos.y >= ry - 1e-9);
      CHECK(e.pos.y <= ec.image_side - ry + 1e-9);
    }
  }
}

TEST_CASE("episode terminates exactly at episode_len") {
  EnvConfig ec = desk_env();
  ec.episode_len = 5;
  WaterworldEnv env(ec, 2);
  env.reset(2);
  for (int t = 0; t < 5; ++t) {
    CHECK_FALSE(env.episode_done());
    env.step(Action::Down);
  }
  CHECK(env.episode_done());
}

TEST_CASE("rewards only take contact values") {
  EnvConfig ec = desk_env();
  WaterworldEnv env(ec, 77);
  env.reset(77);
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    double r = env.step(static_cast<Action>(rng() % kNumActions)).reward;
    CHECK((r == 0.0 || r == ec.reward_food || r == ec.reward_poison ||
           r == ec.reward_food + ec.reward_poison || r == 2 * ec.reward_poison));
  }
}

TEST_CASE("config validation rejects inconsistent settings") {
  EnvConfig ec = desk_env();
  ec.noise_p = 1.5;
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
  ec = desk_env();
  ec.max_speed = 0.1;  // slower than a single thrust increment
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
  ec = desk_env();
  ec.image_side = 0;
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
  ec = desk_env();
  ec.reward_poison = 1.0;
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
}
