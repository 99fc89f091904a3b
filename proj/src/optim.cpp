#include "opc/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace opc {

void ParamStore::add(const std::string& name, Tensor value) {
  if (params_.count(name)) throw std::runtime_error("duplicate parameter name: " + name);
  params_.emplace(name, std::move(value));
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::runtime_error("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::runtime_error("unknown parameter: " + name);
  return it->second;
}

void ParamStore::register_on(Tape& tape, const std::string& prefix) const {
  for (const auto& [name, value] : params_) {
    if (name.rfind(prefix, 0) == 0) tape.param(name, value);
  }
}

Tensor uniform_init(std::vector<std::size_t> shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

void AdamOptimizer::step(ParamStore& store, const GradMap& grads, const std::string& prefix) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    if (name.rfind(prefix, 0) != 0) continue;
    Tensor& p = store.at(name);
    if (!p.same_shape(g)) throw ShapeError("adam: grad shape mismatch for " + name);
    auto mit = m_.find(name);
    if (mit == m_.end()) {
      m_.emplace(name, Tensor::zeros_like(p));
      v_.emplace(name, Tensor::zeros_like(p));
      mit = m_.find(name);
    }
    Tensor& m = mit->second;
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

std::map<std::string, Tensor> AdamOptimizer::state_tensors(const std::string& tag) const {
  std::map<std::string, Tensor> out;
  out.emplace(tag + "/t", Tensor::scalar(static_cast<double>(t_)));
  for (const auto& [name, m] : m_) out.emplace(tag + "/m/" + name, m);
  for (const auto& [name, v] : v_) out.emplace(tag + "/v/" + name, v);
  return out;
}

void AdamOptimizer::load_state(const std::string& tag, const std::map<std::string, Tensor>& tensors) {
  m_.clear();
  v_.clear();
  t_ = 0;
  const std::string mt = tag + "/m/", vt = tag + "/v/", tt = tag + "/t";
  for (const auto& [name, t] : tensors) {
    if (name == tt) {
      t_ = static_cast<std::int64_t>(t[0]);
    } else if (name.rfind(mt, 0) == 0) {
      m_.emplace(name.substr(mt.size()), t);
    } else if (name.rfind(vt, 0) == 0) {
      v_.emplace(name.substr(vt.size()), t);
    }
  }
}

void RMSPropOptimizer::step(ParamStore& store, const GradMap& grads, const std::string& prefix) {
  for (const auto& [name, g] : grads) {
    if (name.rfind(prefix, 0) != 0) continue;
    Tensor& p = store.at(name);
    if (!p.same_shape(g)) throw ShapeError("rmsprop: grad shape mismatch for " + name);
    auto it = ms_.find(name);
    if (it == ms_.end()) it = ms_.emplace(name, Tensor::zeros_like(p)).first;
    Tensor& ms = it->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      ms[i] = decay_ * ms[i] + (1.0 - decay_) * g[i] * g[i];
      p[i] -= lr_ * g[i] / (std::sqrt(ms[i]) + eps_);
    }
  }
}

std::map<std::string, Tensor> RMSPropOptimizer::state_tensors(const std::string& tag) const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, ms] : ms_) out.emplace(tag + "/ms/" + name, ms);
  return out;
}

void RMSPropOptimizer::load_state(const std::string& tag, const std::map<std::string, Tensor>& tensors) {
  ms_.clear();
  const std::string mt = tag + "/ms/";
  for (const auto& [name, t] : tensors) {
    if (name.rfind(mt, 0) == 0) ms_.emplace(name.substr(mt.size()), t);
  }
}

}  // namespace opc
