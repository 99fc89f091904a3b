#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "opc/tape.hpp"
#include "opc/tensor.hpp"

namespace opc {

// Named parameter tensors plus whatever optimizer state is attached to them.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  // Registers every parameter whose name starts with `prefix` on the tape.
  void register_on(Tape& tape, const std::string& prefix = "") const;

 private:
  std::map<std::string, Tensor> params_;
};

// Fan-in scaled uniform init for conv/linear weights.
Tensor uniform_init(std::vector<std::size_t> shape, std::size_t fan_in, std::mt19937_64& rng);

// Standard ADAM with bias correction. Applies only to parameters present in
// the grad map whose names start with `prefix`.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store, const GradMap& grads, const std::string& prefix = "");
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // Serialization of moments + step counter for bit-exact resume.
  std::map<std::string, Tensor> state_tensors(const std::string& tag) const;
  void load_state(const std::string& tag, const std::map<std::string, Tensor>& tensors);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// RMSProp with a mean-square accumulator (no momentum, no centering).
class RMSPropOptimizer {
 public:
  explicit RMSPropOptimizer(double lr = 7e-4, double decay = 0.99, double eps = 1e-8)
      : lr_(lr), decay_(decay), eps_(eps) {}

  void step(ParamStore& store, const GradMap& grads, const std::string& prefix = "");
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  double decay() const { return decay_; }

  std::map<std::string, Tensor> state_tensors(const std::string& tag) const;
  void load_state(const std::string& tag, const std::map<std::string, Tensor>& tensors);

 private:
  double lr_, decay_, eps_;
  std::map<std::string, Tensor> ms_;
};

}  // namespace opc
