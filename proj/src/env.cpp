#include "opc/env.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace opc {

namespace {
constexpr double kRectAspect = 0.6;     // food half-height = aspect * half-width
constexpr double kPlacementGap = 1.0;   // minimum clearance between fresh entities, pixels
constexpr int kPlacementAttempts = 1000;

double food_half_w(const EnvConfig& c) { return c.target_radius; }
double food_half_h(const EnvConfig& c) { return kRectAspect * c.target_radius; }

double entity_radius_x(const Entity& e, const EnvConfig& c) {
  switch (e.kind) {
    case EntityKind::Agent: return c.agent_radius();
    case EntityKind::Food: return food_half_w(c);
    case EntityKind::Poison: return c.target_radius;
  }
  return 0.0;
}

double entity_radius_y(const Entity& e, const EnvConfig& c) {
  return e.kind == EntityKind::Food ? food_half_h(c) : entity_radius_x(e, c);
}

bool covers_pixel(const Entity& e, const EnvConfig& c, double px, double py) {
  const double dx = px - e.pos.x;
  const double dy = py - e.pos.y;
  if (e.kind == EntityKind::Food) {
    return std::abs(dx) <= food_half_w(c) && std::abs(dy) <= food_half_h(c);
  }
  const double r = entity_radius_x(e, c);
  return dx * dx + dy * dy <= r * r;
}

double circle_rect_gap(const Vec2& center, double radius, const Vec2& rect_center, double hw, double hh) {
  const double cx = std::clamp(center.x, rect_center.x - hw, rect_center.x + hw);
  const double cy = std::clamp(center.y, rect_center.y - hh, rect_center.y + hh);
  const double dx = center.x - cx;
  const double dy = center.y - cy;
  return std::sqrt(dx * dx + dy * dy) - radius;
}
}  // namespace

void EnvConfig::validate() const {
  if (image_side < 8) throw std::invalid_argument("env: image_side must be at least 8");
  if (target_radius <= 0.0) throw std::invalid_argument("env: target_radius must be positive");
  if (agent_scale <= 0.0) throw std::invalid_argument("env: agent_scale must be positive");
  if (noise_p < 0.0 || noise_p >= 0.5) throw std::invalid_argument("env: noise_p must be in [0, 0.5)");
  if (!(reward_poison < 0.0 && reward_food > 0.0)) {
    throw std::invalid_argument("env: requires reward_poison < 0 < reward_food");
  }
  if (max_speed < thrust) throw std::invalid_argument("env: max_speed must be >= thrust");
  if (threshold < 0.0) throw std::invalid_argument("env: threshold must be non-negative");
}

// Negative gap means the two entities are in contact (continuous coordinates,
// independent of rasterization).
double entity_entity_distance_gap(const Entity& a, const Entity& b, const EnvConfig& cfg) {
  const bool a_rect = a.kind == EntityKind::Food;
  const bool b_rect = b.kind == EntityKind::Food;
  if (!a_rect && !b_rect) {
    const double dx = a.pos.x - b.pos.x, dy = a.pos.y - b.pos.y;
    return std::sqrt(dx * dx + dy * dy) - (entity_radius_x(a, cfg) + entity_radius_x(b, cfg));
  }
  if (a_rect && b_rect) {
    const double gx = std::abs(a.pos.x - b.pos.x) - 2.0 * food_half_w(cfg);
    const double gy = std::abs(a.pos.y - b.pos.y) - 2.0 * food_half_h(cfg);
    return std::max(gx, gy);
  }
  const Entity& circ = a_rect ? b : a;
  const Entity& rect = a_rect ? a : b;
  return circle_rect_gap(circ.pos, entity_radius_x(circ, cfg), rect.pos, food_half_w(cfg),
                         food_half_h(cfg));
}

ObservationFrame render(const EnvState& state, const EnvConfig& config) {
  const std::size_t side = config.image_side;
  ObservationFrame frame;
  frame.side = side;
  frame.pixels.assign(side * side, 0.0);
  frame.labels.assign(side * side, 0);
  // Draw order: poison, food, agent; the later-drawn entity wins overlaps.
  auto draw_kind = [&](EntityKind kind) {
    for (std::size_t e = 0; e < state.entities.size(); ++e) {
      const Entity& ent = state.entities[e];
      if (ent.kind != kind) continue;
      const double rx = entity_radius_x(ent, config), ry = entity_radius_y(ent, config);
      const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(ent.pos.x - rx)));
      const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(ent.pos.y - ry)));
      const auto x1 = std::min(side, static_cast<std::size_t>(std::max(0.0, std::ceil(ent.pos.x + rx) + 1.0)));
      const auto y1 = std::min(side, static_cast<std::size_t>(std::max(0.0, std::ceil(ent.pos.y + ry) + 1.0)));
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          if (covers_pixel(ent, config, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
            frame.pixels[y * side + x] = 1.0;
            frame.labels[y * side + x] = static_cast<int>(e) + 1;
          }
        }
      }
    }
  };
  draw_kind(EntityKind::Poison);
  draw_kind(EntityKind::Food);
  draw_kind(EntityKind::Agent);
  for (double& v : frame.pixels) v = v > config.threshold ? 1.0 : 0.0;
  return frame;
}

void add_noise(ObservationFrame& frame, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 0.5) throw std::invalid_argument("add_noise: p must be in [0, 0.5)");
  if (p == 0.0) return;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : frame.pixels) {
    if (u(rng) < p) v = 1.0 - v;
  }
}

WaterworldEnv::WaterworldEnv(EnvConfig config, std::uint64_t seed) : config_(std::move(config)) {
  reset(seed);
}

bool WaterworldEnv::overlaps_any(const Vec2& pos, EntityKind kind, std::size_t skip_index) const {
  Entity probe{kind, pos, {}};
  for (std::size_t i = 0; i < state_.entities.size(); ++i) {
    if (i == skip_index) continue;
    if (entity_entity_distance_gap(probe, state_.entities[i], config_) < kPlacementGap) return true;
  }
  return false;
}

Vec2 WaterworldEnv::random_free_position(double margin, std::size_t skip_index) {
  const double side = static_cast<double>(config_.image_side);
  if (2.0 * margin >= side) {
    throw std::runtime_error("env: arena too small for entity of extent " + std::to_string(margin));
  }
  std::uniform_real_distribution<double> u(margin, side - margin);
  EntityKind kind = skip_index < state_.entities.size() ? state_.entities[skip_index].kind
                                                        : EntityKind::Poison;
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    Vec2 pos{u(state_.rng), u(state_.rng)};
    if (!overlaps_any(pos, kind, skip_index)) return pos;
  }
  throw std::runtime_error("env: arena too small to place all entities without overlap");
}

ObservationFrame WaterworldEnv::observe() {
  ObservationFrame frame = render(state_, config_);
  add_noise(frame, config_.noise_p, state_.rng);
  return frame;
}

ObservationFrame WaterworldEnv::reset(std::uint64_t seed) {
  config_.validate();
  state_.entities.clear();
  state_.step_count = 0;
  state_.rng.seed(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  auto place = [&](EntityKind kind, double margin, bool moving) {
    state_.entities.push_back(Entity{kind, {}, {}});
    const std::size_t idx = state_.entities.size() - 1;
    state_.entities[idx].pos = random_free_position(margin, idx);
    if (moving) {
      const double a = angle(state_.rng);
      state_.entities[idx].vel = {config_.target_speed * std::cos(a),
                                  config_.target_speed * std::sin(a)};
    }
  };
  for (std::size_t i = 0; i < config_.num_poison; ++i) place(EntityKind::Poison, config_.target_radius, true);
  for (std::size_t i = 0; i < config_.num_food; ++i) place(EntityKind::Food, food_half_w(config_), true);
  place(EntityKind::Agent, config_.agent_radius(), false);
  return observe();
}

StepResult WaterworldEnv::step(Action action) {
  Entity& agent = state_.entities.back();
  switch (action) {
    case Action::Left: agent.vel.x -= config_.thrust; break;
    case Action::Right: agent.vel.x += config_.thrust; break;
    case Action::Up: agent.vel.y -= config_.thrust; break;
    case Action::Down: agent.vel.y += config_.thrust; break;
  }
  const double speed = std::sqrt(agent.vel.x * agent.vel.x + agent.vel.y * agent.vel.y);
  if (speed > config_.max_speed) {
    const double s = config_.max_speed / speed;
    agent.vel.x *= s;
    agent.vel.y *= s;
  }
  const double side = static_cast<double>(config_.image_side);
  for (Entity& e : state_.entities) {
    e.pos.x += e.vel.x;
    e.pos.y += e.vel.y;
    const double rx = entity_radius_x(e, config_), ry = entity_radius_y(e, config_);
    // Elastic wall reflection, applied per axis.
    if (e.pos.x < rx) { e.pos.x = 2.0 * rx - e.pos.x; e.vel.x = -e.vel.x; }
    if (e.pos.x > side - rx) { e.pos.x = 2.0 * (side - rx) - e.pos.x; e.vel.x = -e.vel.x; }
    if (e.pos.y < ry) { e.pos.y = 2.0 * ry - e.pos.y; e.vel.y = -e.vel.y; }
    if (e.pos.y > side - ry) { e.pos.y = 2.0 * (side - ry) - e.pos.y; e.vel.y = -e.vel.y; }
    e.pos.x = std::clamp(e.pos.x, rx, side - rx);
    e.pos.y = std::clamp(e.pos.y, ry, side - ry);
  }
  double reward = 0.0;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  Entity& ag = state_.entities.back();
  for (std::size_t i = 0; i + 1 < state_.entities.size(); ++i) {
    Entity& target = state_.entities[i];
    if (entity_entity_distance_gap(ag, target, config_) < 0.0) {
      reward += target.kind == EntityKind::Food ? config_.reward_food : config_.reward_poison;
      target.pos = random_free_position(entity_radius_x(target, config_), i);
      const double a = angle(state_.rng);
      target.vel = {config_.target_speed * std::cos(a), config_.target_speed * std::sin(a)};
    }
  }
  ++state_.step_count;
  return StepResult{observe(), reward};
}

std::string WaterworldEnv::serialize_state() const {
  std::ostringstream os;
  auto bits = [](double v) { return std::bit_cast<std::uint64_t>(v); };
  os << state_.step_count << "\n" << state_.entities.size() << "\n";
  for (const Entity& e : state_.entities) {
    os << static_cast<int>(e.kind) << " " << bits(e.pos.x) << " " << bits(e.pos.y) << " "
       << bits(e.vel.x) << " " << bits(e.vel.y) << "\n";
  }
  os << state_.rng << "\n";
  return os.str();
}

void WaterworldEnv::restore_state(const std::string& blob) {
  std::istringstream is(blob);
  std::size_t count = 0;
  is >> state_.step_count >> count;
  state_.entities.resize(count);
  auto read_double = [&is]() {
    std::uint64_t b = 0;
    is >> b;
    return std::bit_cast<double>(b);
  };
  for (Entity& e : state_.entities) {
    int kind = 0;
    is >> kind;
    e.kind = static_cast<EntityKind>(kind);
    e.pos.x = read_double();
    e.pos.y = read_double();
    e.vel.x = read_double();
    e.vel.y = read_double();
  }
  is >> state_.rng;
  if (!is) throw std::runtime_error("env: corrupt serialized state");
}

void write_pgm(const std::string& path, const ObservationFrame& frame) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "P5\n" << frame.side << " " << frame.side << "\n255\n";
  for (double v : frame.pixels) {
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
}

}  // namespace opc
