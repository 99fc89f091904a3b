#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "opc/tensor.hpp"

namespace opc {

using VarId = std::size_t;
using GradMap = std::map<std::string, Tensor>;

struct Conv2dSpec {
  std::size_t in_ch = 1, out_ch = 1, kh = 1, kw = 1, stride = 1;
  std::size_t pad_top = 0, pad_left = 0, pad_bottom = 0, pad_right = 0;
  std::size_t out_h(std::size_t in_h) const { return (in_h + pad_top + pad_bottom - kh) / stride + 1; }
  std::size_t out_w(std::size_t in_w) const { return (in_w + pad_left + pad_right - kw) / stride + 1; }
};

// Append-only recording tape for reverse-mode differentiation. Nodes are
// whole-tensor operations; node order is a topological order by construction.
// One tape records one forward computation; backward() may be called for
// several scalar roots on the same tape, each call starts from fresh grads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. Constants never receive gradients.
  VarId constant(Tensor value);
  VarId param(const std::string& name, const Tensor& value);
  bool has_param(const std::string& name) const { return params_.count(name) != 0; }
  VarId param_id(const std::string& name) const { return params_.at(name); }

  const Tensor& value(VarId id) const { return nodes_[id].value; }
  const Tensor& grad(VarId id) const { return grads_[id]; }

  // Elementwise / shape ops.
  VarId add(VarId a, VarId b);
  VarId sub(VarId a, VarId b);
  VarId mul(VarId a, VarId b);
  VarId scale(VarId a, double s);
  VarId neg(VarId a) { return scale(a, -1.0); }
  VarId exp(VarId a);
  VarId sigmoid(VarId a);
  VarId relu(VarId a);
  VarId elu(VarId a);
  VarId reshape(VarId a, std::vector<std::size_t> shape);
  VarId sum(VarId a);
  VarId pick(VarId a, std::size_t flat_index);

  // x: [B,I], w: [I,O], b: [O] -> [B,O]
  VarId linear(VarId x, VarId w, VarId b);
  // x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]
  VarId conv2d(VarId x, VarId w, VarId b, const Conv2dSpec& spec);
  // Normalizes each dim-0 row over all remaining dims; gain/bias match the row shape (flattened).
  VarId layer_norm(VarId x, VarId gain, VarId bias, double eps = 1e-5);
  // x: [B,C,H,W], integer factor along H and W.
  VarId upsample_nearest(VarId x, std::size_t factor);
  // Rank-1 input.
  VarId log_softmax(VarId a);

  // Scalar -Lambda = sum_{i,k} eta[i,k] * (-log N(x[i]; psi[k,i], sigma2)).
  // eta and x are constants; gradient flows into psi only.
  VarId weighted_gaussian_nll(VarId psi, const Tensor& x, const Tensor& eta, double sigma2);

  // Reverse sweep from a scalar root. Returns d(root)/d(param) for every
  // registered parameter; parameters unreachable from root map to zeros.
  GradMap backward(VarId root);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    std::function<void(Tape&)> backprop;  // empty for leaves
  };

  VarId emit(Tensor value, bool needs_grad, std::function<void(Tape&)> backprop);
  bool needs(VarId id) const { return nodes_[id].needs_grad; }
  Tensor& g(VarId id) { return grads_[id]; }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<std::string, VarId> params_;
};

}  // namespace opc
