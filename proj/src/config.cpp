#include "opc/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace opc {

void TrainConfig::validate(const EMConfig& em, const EnvConfig& env) const {
  if (n_envs < 1) throw std::invalid_argument("train.n_envs must be >= 1");
  if (env.episode_len <= em.rollout_len) {
    throw std::invalid_argument("env.episode_len must exceed em.t_ro");
  }
  if (nstep < 1) throw std::invalid_argument("train.nstep must be >= 1");
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("train.gamma must be in [0,1)");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
}

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config: cannot open " + path);
  KeyValueConfig kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
    }
    kv.apply_override(line);
  }
  return kv;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { values_[key] = value; }

void KeyValueConfig::apply_override(const std::string& kev) {
  const auto eq = kev.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("config: override must be key=value, got '" + kev + "'");
  }
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  };
  const std::string key = trim(kev.substr(0, eq));
  const std::string value = trim(kev.substr(eq + 1));
  if (key.empty()) throw std::invalid_argument("config: empty key in '" + kev + "'");
  values_[key] = value;
}

std::string KeyValueConfig::serialized() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
  return os.str();
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' has non-numeric value '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  const double d = parse_double(key, v);
  if (d < 0.0 || d != static_cast<double>(static_cast<std::uint64_t>(d))) {
    throw std::invalid_argument("config: key '" + key + "' must be a non-negative integer, got '" +
                                v + "'");
  }
  return static_cast<std::uint64_t>(d);
}

}  // namespace

FullConfig resolve_config(const KeyValueConfig& kv) {
  FullConfig cfg;
  // Arch profile first: it sets the defaults the other keys refine.
  if (kv.contains("arch.profile")) cfg.arch_profile = kv.values().at("arch.profile");
  std::size_t side = cfg.arch_profile == "desk" ? 32 : cfg.arch_profile == "reduced" ? 16 : 84;
  if (kv.contains("env.image_side")) side = parse_uint("env.image_side", kv.values().at("env.image_side"));
  if (cfg.arch_profile == "full") {
    cfg.arch = ArchConfig::full(side);
  } else if (cfg.arch_profile == "desk") {
    cfg.arch = ArchConfig::desk(side);
    cfg.em.num_components = 4;
    cfg.em.rollout_len = 10;
    cfg.train.policy_hidden = 128;
    cfg.train.batch_size = 4;
    cfg.env.target_radius = 4.0;
    cfg.env.target_speed = 0.5;
    cfg.env.thrust = 0.5;
    cfg.env.max_speed = 2.0;
  } else if (cfg.arch_profile == "reduced") {
    cfg.arch = ArchConfig::reduced(side);
    cfg.em.num_components = 2;
    cfg.em.rollout_len = 3;
    cfg.train.policy_hidden = 32;
    cfg.env.target_radius = 2.0;
    cfg.env.target_speed = 0.5;
  } else {
    throw std::invalid_argument("config: unknown arch.profile '" + cfg.arch_profile + "'");
  }
  cfg.env.image_side = side;

  for (const auto& [key, value] : kv.values()) {
    if (key == "arch.profile" || key == "env.image_side") continue;
    if (key == "env.num_poison") cfg.env.num_poison = parse_uint(key, value);
    else if (key == "env.num_food") cfg.env.num_food = parse_uint(key, value);
    else if (key == "env.target_radius") cfg.env.target_radius = parse_double(key, value);
    else if (key == "env.agent_scale") cfg.env.agent_scale = parse_double(key, value);
    else if (key == "env.target_speed") cfg.env.target_speed = parse_double(key, value);
    else if (key == "env.thrust") cfg.env.thrust = parse_double(key, value);
    else if (key == "env.max_speed") cfg.env.max_speed = parse_double(key, value);
    else if (key == "env.reward_food") cfg.env.reward_food = parse_double(key, value);
    else if (key == "env.reward_poison") cfg.env.reward_poison = parse_double(key, value);
    else if (key == "env.noise_p") cfg.env.noise_p = parse_double(key, value);
    else if (key == "env.threshold") cfg.env.threshold = parse_double(key, value);
    else if (key == "env.episode_len") cfg.env.episode_len = parse_uint(key, value);
    else if (key == "em.k") cfg.em.num_components = parse_uint(key, value);
    else if (key == "em.t_ro") cfg.em.rollout_len = parse_uint(key, value);
    else if (key == "em.sigma2") cfg.em.sigma2 = parse_double(key, value);
    else if (key == "arch.m") cfg.arch.m = parse_uint(key, value);
    else if (key == "arch.fc") cfg.arch.fc = parse_uint(key, value);
    else if (key == "train.n_envs") cfg.train.n_envs = parse_uint(key, value);
    else if (key == "train.batch_size") cfg.train.batch_size = parse_uint(key, value);
    else if (key == "train.adam_lr") cfg.train.adam_lr = parse_double(key, value);
    else if (key == "train.rmsprop_lr") cfg.train.rmsprop_lr = parse_double(key, value);
    else if (key == "train.rmsprop_decay") cfg.train.rmsprop_decay = parse_double(key, value);
    else if (key == "train.gamma") cfg.train.gamma = parse_double(key, value);
    else if (key == "train.nstep") cfg.train.nstep = parse_uint(key, value);
    else if (key == "train.entropy_beta") cfg.train.entropy_beta = parse_double(key, value);
    else if (key == "train.policy_hidden") cfg.train.policy_hidden = parse_uint(key, value);
    else if (key == "train.seed") cfg.train.seed = parse_uint(key, value);
    else if (key == "train.obs_budget") cfg.train.obs_budget = parse_uint(key, value);
    else if (key == "train.checkpoint_interval") cfg.train.checkpoint_interval = parse_uint(key, value);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  cfg.arch.validate();
  cfg.env.validate();
  cfg.em.validate();
  cfg.train.validate(cfg.em, cfg.env);
  return cfg;
}

KeyValueConfig snapshot_config(const FullConfig& cfg) {
  KeyValueConfig kv;
  auto d = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv.set("arch.profile", cfg.arch_profile);
  kv.set("arch.m", std::to_string(cfg.arch.m));
  kv.set("arch.fc", std::to_string(cfg.arch.fc));
  kv.set("env.image_side", std::to_string(cfg.env.image_side));
  kv.set("env.num_poison", std::to_string(cfg.env.num_poison));
  kv.set("env.num_food", std::to_string(cfg.env.num_food));
  kv.set("env.target_radius", d(cfg.env.target_radius));
  kv.set("env.agent_scale", d(cfg.env.agent_scale));
  kv.set("env.target_speed", d(cfg.env.target_speed));
  kv.set("env.thrust", d(cfg.env.thrust));
  kv.set("env.max_speed", d(cfg.env.max_speed));
  kv.set("env.reward_food", d(cfg.env.reward_food));
  kv.set("env.reward_poison", d(cfg.env.reward_poison));
  kv.set("env.noise_p", d(cfg.env.noise_p));
  kv.set("env.threshold", d(cfg.env.threshold));
  kv.set("env.episode_len", std::to_string(cfg.env.episode_len));
  kv.set("em.k", std::to_string(cfg.em.num_components));
  kv.set("em.t_ro", std::to_string(cfg.em.rollout_len));
  kv.set("em.sigma2", d(cfg.em.sigma2));
  kv.set("train.n_envs", std::to_string(cfg.train.n_envs));
  kv.set("train.batch_size", std::to_string(cfg.train.batch_size));
  kv.set("train.adam_lr", d(cfg.train.adam_lr));
  kv.set("train.rmsprop_lr", d(cfg.train.rmsprop_lr));
  kv.set("train.rmsprop_decay", d(cfg.train.rmsprop_decay));
  kv.set("train.gamma", d(cfg.train.gamma));
  kv.set("train.nstep", std::to_string(cfg.train.nstep));
  kv.set("train.entropy_beta", d(cfg.train.entropy_beta));
  kv.set("train.policy_hidden", std::to_string(cfg.train.policy_hidden));
  kv.set("train.seed", std::to_string(cfg.train.seed));
  kv.set("train.obs_budget", std::to_string(cfg.train.obs_budget));
  kv.set("train.checkpoint_interval", std::to_string(cfg.train.checkpoint_interval));
  return kv;
}

}  // namespace opc
