#include "opc/control.hpp"

#include <cmath>
#include <stdexcept>

namespace opc {

PolicyHead::PolicyHead(std::size_t input_dim, std::size_t hidden, std::size_t num_actions)
    : input_dim_(input_dim), hidden_(hidden), num_actions_(num_actions) {}

void PolicyHead::init_params(ParamStore& store, std::mt19937_64& rng) const {
  store.add("phi/head/w", uniform_init({input_dim_, hidden_}, input_dim_, rng));
  store.add("phi/head/b", Tensor({hidden_}));
  store.add("zeta/w", uniform_init({hidden_, num_actions_}, hidden_, rng));
  store.add("zeta/b", Tensor({num_actions_}));
  store.add("zetav/w", uniform_init({hidden_, 1}, hidden_, rng));
  store.add("zetav/b", Tensor({1}));
}

PolicyHead::Out PolicyHead::forward(Tape& t, VarId theta) const {
  VarId flat = t.reshape(theta, {1, input_dim_});
  VarId h = t.relu(t.linear(flat, t.param_id("phi/head/w"), t.param_id("phi/head/b")));
  VarId logits = t.reshape(t.linear(h, t.param_id("zeta/w"), t.param_id("zeta/b")), {num_actions_});
  VarId value = t.pick(t.linear(h, t.param_id("zetav/w"), t.param_id("zetav/b")), 0);
  return Out{logits, value};
}

PolicyOutput PolicyHead::evaluate(const ParamStore& store, const Tensor& theta) const {
  Tape tape;
  store.register_on(tape, "phi/head/");
  store.register_on(tape, "zeta");
  Out out = forward(tape, tape.constant(theta));
  PolicyOutput result;
  result.logits = tape.value(out.logits).values();
  result.value = tape.value(out.value)[0];
  return result;
}

double td_target(double reward, double gamma, double v_next) {
  if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("td_target: gamma must be in [0,1)");
  return reward + gamma * v_next;
}

VarId actor_loss(Tape& t, VarId logits, int action, double advantage, double entropy_beta) {
  VarId lp = t.log_softmax(logits);
  VarId loss = t.scale(t.pick(lp, static_cast<std::size_t>(action)), -advantage);
  if (entropy_beta != 0.0) {
    VarId entropy = t.neg(t.sum(t.mul(t.exp(lp), lp)));
    loss = t.sub(loss, t.scale(entropy, entropy_beta));
  }
  return loss;
}

VarId critic_loss(Tape& t, VarId value, double y) {
  VarId d = t.sub(t.constant(Tensor::scalar(y)), value);
  return t.mul(d, d);
}

std::vector<double> nstep_returns(const std::vector<double>& rewards,
                                  const std::vector<double>& values, double gamma, std::size_t n) {
  if (n < 1) throw std::invalid_argument("nstep_returns: n must be >= 1");
  if (n > rewards.size()) throw std::invalid_argument("nstep_returns: n exceeds the window");
  if (values.size() != rewards.size() + 1) {
    throw std::invalid_argument("nstep_returns: need one more value than rewards");
  }
  const std::size_t window = rewards.size();
  std::vector<double> targets(window);
  for (std::size_t s = 0; s < window; ++s) {
    const std::size_t horizon = std::min(n, window - s);
    double y = 0.0;
    double g = 1.0;
    for (std::size_t j = 0; j < horizon; ++j) {
      y += g * rewards[s + j];
      g *= gamma;
    }
    y += g * values[s + horizon];
    targets[s] = y;
  }
  return targets;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

double entropy_of_logits(const std::vector<double>& logits) {
  const auto p = softmax(logits);
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

int sample_action(const std::vector<double>& logits, std::mt19937_64& rng) {
  const auto p = softmax(logits);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    r -= p[i];
    if (r <= 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;
}

}  // namespace opc
