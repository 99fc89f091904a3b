#pragma once

#include <random>
#include <vector>

#include "opc/optim.hpp"
#include "opc/tape.hpp"

namespace opc {

struct PolicyOutput {
  std::vector<double> logits;  // 4 action logits
  double value = 0.0;
};

// Actor-critic head on the flattened object representations. The shared
// 512-unit rectified hidden layer lives under "phi/head/" (its gradient flows
// with the perception parameters); the logit map is "zeta/", the value map
// "zetav/".
class PolicyHead {
 public:
  PolicyHead(std::size_t input_dim, std::size_t hidden, std::size_t num_actions = 4);

  void init_params(ParamStore& store, std::mt19937_64& rng) const;

  struct Out {
    VarId logits;  // rank-1, num_actions
    VarId value;   // scalar
  };
  // theta may be [K,M] (flattened internally) or already [1,input_dim].
  Out forward(Tape& tape, VarId theta) const;

  PolicyOutput evaluate(const ParamStore& store, const Tensor& theta) const;

  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_actions() const { return num_actions_; }

 private:
  std::size_t input_dim_, hidden_, num_actions_;
};

// One-step bootstrapped TD target y = r + gamma * v_next. The target is a
// constant in every downstream gradient.
double td_target(double reward, double gamma, double v_next);

// loss = -log pi(a) * advantage - entropy_beta * H(pi). The advantage is a
// constant; the zeta-gradient of the first term is the policy gradient.
VarId actor_loss(Tape& tape, VarId logits, int action, double advantage, double entropy_beta);

// loss = (y - v)^2 with constant target y.
VarId critic_loss(Tape& tape, VarId value, double y);

// Forward-view n-step targets y_t = sum_{j<h} gamma^j r_{t+j} + gamma^h V_{t+h}
// with h = min(n, window_end - t). values must hold one more entry than
// rewards (the bootstrap value). Throws if n exceeds the window.
std::vector<double> nstep_returns(const std::vector<double>& rewards,
                                  const std::vector<double>& values, double gamma, std::size_t n);

double entropy_of_logits(const std::vector<double>& logits);
std::vector<double> softmax(const std::vector<double>& logits);
int sample_action(const std::vector<double>& logits, std::mt19937_64& rng);

}  // namespace opc
