#pragma once

#include <map>
#include <string>
#include <vector>

#include "opc/env.hpp"
#include "opc/perception.hpp"

namespace opc {

struct TrainConfig {
  std::size_t n_envs = 4;
  std::size_t batch_size = 32;      // perception batch; gradient accumulation span
  double adam_lr = 1e-3;            // perception optimizer
  double rmsprop_lr = 7e-4;         // control optimizer
  double rmsprop_decay = 0.99;
  double gamma = 0.99;
  std::size_t nstep = 1;            // forward-view n-step horizon
  double entropy_beta = 0.01;       // 0 disables the bonus
  std::size_t policy_hidden = 512;
  std::uint64_t seed = 1;
  std::uint64_t obs_budget = 200000;        // stop after this many experienced observations
  std::size_t checkpoint_interval = 10000;  // outer steps between checkpoints
  void validate(const EMConfig& em, const EnvConfig& env) const;
};

// Flat key=value configuration. Unknown keys are rejected by resolve().
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path);  // throws on missing file
  void set(const std::string& key, const std::string& value);
  void apply_override(const std::string& key_eq_value);  // "k=v" form
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }
  std::string serialized() const;  // sorted key=value lines

 private:
  std::map<std::string, std::string> values_;
};

struct FullConfig {
  EnvConfig env;
  EMConfig em;
  ArchConfig arch;
  TrainConfig train;
  std::string arch_profile = "full";
};

// Maps flat keys onto the config structs; throws std::invalid_argument naming
// any unknown key or malformed value.
FullConfig resolve_config(const KeyValueConfig& kv);

// The fully resolved key set (defaults filled in), suitable for the manifest.
KeyValueConfig snapshot_config(const FullConfig& cfg);

}  // namespace opc
