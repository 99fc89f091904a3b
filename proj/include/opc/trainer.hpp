#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "opc/config.hpp"
#include "opc/control.hpp"
#include "opc/env.hpp"
#include "opc/optim.hpp"
#include "opc/perception.hpp"

namespace opc {

struct StepMetrics {
  std::uint64_t observations = 0;
  std::size_t episode = 0;
  std::size_t step = 0;
  double reward = 0.0;         // summed over environments this outer step
  double period_reward = 0.0;  // running sum within the current observation window
  double neg_lambda = 0.0;     // mean perception loss per EM iteration
  double td_loss = 0.0;
  double entropy = 0.0;
  double wall_ms = 0.0;
  std::string csv_row() const;
  static std::string csv_header();
};

// Sliding history windows for one environment: actions, frames and the
// responsibilities that opened the current window. The action stored at slot
// t produced the frame stored at slot t.
struct HistoryWindows {
  std::deque<int> actions;               // length t_ro (no action precedes frame 0)
  std::deque<ObservationFrame> frames;   // length t_ro + 1
  Tensor eta_open;                       // [D,K], responsibilities of frames[0]
  Tensor theta_carry;                    // [K,M], hidden state entering frames[1]
};

// Algorithm-1 trainer: N_e parallel environments, t_ro perception rollouts
// over the stored windows, TD actor-critic on the final hidden state, and
// synchronous parameter updates.
class Trainer {
 public:
  explicit Trainer(FullConfig cfg);

  void init_fresh();
  void load_checkpoint_file(const std::string& path);
  void save_checkpoint_file(const std::string& path) const;

  // One outer-loop iteration across all environments.
  StepMetrics train_step();

  // Full loop: warmup (if fresh), outer steps until the observation budget,
  // periodic checkpoints, CSV metric log. Returns the number of outer steps.
  std::uint64_t train(const std::string& out_dir);

  std::uint64_t observations() const { return observations_; }
  const ParamStore& params() const { return store_; }
  ParamStore& params() { return store_; }
  const FullConfig& config() const { return cfg_; }
  const PerceptionNet& net() const { return net_; }
  const PolicyHead& head() const { return head_; }
  const HistoryWindows& windows(std::size_t env) const { return slots_[env].windows; }
  const WaterworldEnv& env(std::size_t env) const { return slots_[env].env; }

  // Sum of gradient contributions of one outer step without applying any
  // update; used by decomposition tests.
  GradMap peek_phi_gradient();

 private:
  struct PendingControl {
    double reward = 0.0;
    double value = 0.0;
    GradMap actor;    // d(-log pi(a))/d zeta at advantage 1
    GradMap critic;   // dV/d{zetav, phi}
    GradMap entropy;  // d(-beta H)/d zeta
  };

  struct EnvSlot {
    EnvSlot(const EnvConfig& ec, std::uint64_t seed) : env(ec, seed) {}
    WaterworldEnv env;
    HistoryWindows windows;
    std::mt19937_64 policy_rng;
    std::size_t episode_index = 0;
    std::size_t episode_step = 0;  // outer steps taken in the current episode
    std::deque<PendingControl> pending;
  };

  // Per-env contribution of one outer step, computed at a fixed snapshot.
  struct EnvStepResult {
    GradMap phi;
    GradMap control;  // zeta + zetav (+ phi via the critic, merged into phi)
    double reward = 0.0;
    double neg_lambda = 0.0;
    double td_loss = 0.0;
    double entropy = 0.0;
    std::uint64_t obs = 0;
  };

  std::uint64_t warmup_env(EnvSlot& slot, std::uint64_t env_seed, double* reward_sum);
  EnvStepResult step_env(EnvSlot& slot);
  void flush_pending(EnvSlot& slot, double bootstrap_value, EnvStepResult& out);
  Tensor forward_only_em_step(const Tensor& theta, const Tensor& eta, const Tensor& psi,
                              const ObservationFrame& frame, Tensor* psi_out) const;
  Tensor decode_value(const Tensor& theta) const;
  std::uint64_t episode_seed(std::size_t env_index, std::size_t episode_index) const;

  FullConfig cfg_;
  PerceptionNet net_;
  PolicyHead head_;
  ParamStore store_;
  AdamOptimizer adam_;
  RMSPropOptimizer rmsprop_;
  std::vector<EnvSlot> slots_;
  GradMap phi_accum_;
  std::size_t accum_count_ = 0;
  std::size_t accum_span_ = 1;  // outer steps between ADAM applications
  std::uint64_t observations_ = 0;
  std::uint64_t outer_step_ = 0;
  double cumulative_reward_ = 0.0;
  double window_reward_ = 0.0;
  std::uint64_t window_index_ = 0;
  static constexpr std::uint64_t kPeriodWindow = 20000;  // observations per period-reward window
  bool initialized_ = false;
};

// Adds scale * from[name] into `into` for every name starting with `prefix`.
void merge_grads(GradMap& into, const GradMap& from, double scale = 1.0,
                 const std::string& prefix = "");

}  // namespace opc
