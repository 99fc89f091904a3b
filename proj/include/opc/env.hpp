#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace opc {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

enum class Action : int { Left = 0, Right = 1, Up = 2, Down = 3 };
inline constexpr int kNumActions = 4;

enum class EntityKind : int { Agent = 0, Food = 1, Poison = 2 };

struct EnvConfig {
  std::size_t image_side = 84;
  std::size_t num_poison = 2;
  std::size_t num_food = 1;
  double target_radius = 6.0;      // pixels
  double agent_scale = 1.5;        // agent radius = target_radius / agent_scale
  double target_speed = 1.0;       // pixels per step
  double thrust = 0.5;             // velocity increment per action
  double max_speed = 2.0;          // agent speed clamp
  double reward_food = 1.0;
  double reward_poison = -1.0;
  double noise_p = 0.2;            // bit-flip probability
  double threshold = 0.0001;       // binarization threshold
  std::size_t episode_len = 10000;

  double agent_radius() const { return target_radius / agent_scale; }
  void validate() const;  // throws std::invalid_argument on violated invariants
};

struct Entity {
  EntityKind kind;
  Vec2 pos;
  Vec2 vel;
};

struct EnvState {
  std::vector<Entity> entities;  // entity id = index + 1 in label maps
  std::size_t step_count = 0;
  std::mt19937_64 rng;
};

// One binary observation plus the evaluation-only ground-truth label map
// (0 = background, otherwise entity id). Labels never feed the learner.
struct ObservationFrame {
  std::size_t side = 0;
  std::vector<double> pixels;       // values in {0,1}
  std::vector<int> labels;
  std::size_t size() const { return pixels.size(); }
};

ObservationFrame render(const EnvState& state, const EnvConfig& config);

// Flips each pixel independently with probability p; labels untouched.
void add_noise(ObservationFrame& frame, double p, std::mt19937_64& rng);

struct StepResult {
  ObservationFrame frame;
  double reward = 0.0;
};

// Deterministic seedable Pixel Waterworld instance. The full trajectory is a
// pure function of (config, seed, action sequence).
class WaterworldEnv {
 public:
  WaterworldEnv(EnvConfig config, std::uint64_t seed);

  ObservationFrame reset(std::uint64_t seed);
  StepResult step(Action action);

  const EnvConfig& config() const { return config_; }
  const EnvState& state() const { return state_; }
  std::size_t step_count() const { return state_.step_count; }
  bool episode_done() const { return state_.step_count >= config_.episode_len; }

  // Bit-exact state serialization for checkpoint resume.
  std::string serialize_state() const;
  void restore_state(const std::string& blob);

 private:
  ObservationFrame observe();
  Vec2 random_free_position(double margin, std::size_t skip_index);
  bool overlaps_any(const Vec2& pos, EntityKind kind, std::size_t skip_index) const;

  EnvConfig config_;
  EnvState state_;
};

double entity_entity_distance_gap(const Entity& a, const Entity& b, const EnvConfig& cfg);

void write_pgm(const std::string& path, const ObservationFrame& frame);

}  // namespace opc
