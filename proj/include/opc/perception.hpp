#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "opc/env.hpp"
#include "opc/optim.hpp"
#include "opc/tape.hpp"
#include "opc/tensor.hpp"

namespace opc {

struct EMConfig {
  std::size_t num_components = 4;  // K
  std::size_t rollout_len = 20;    // t_ro
  double sigma2 = 0.25;            // fixed pixel variance
  void validate() const;
};

// Gaussian pixel density N(x; psi, sigma2).
double pixel_likelihood(double x, double psi, double sigma2);

// Exact posterior responsibilities under the K-component mixture with a
// uniform mixing prior. psi is [K,D]; the result is [D,K] with unit row sums.
// Computed in log space with per-pixel max subtraction.
Tensor e_step(const std::vector<double>& x, const Tensor& psi, double sigma2);

// Expected log-likelihood Lambda = sum_i sum_k eta[i,k] log N(x_i; psi[k,i]).
// The constant uniform-prior term is excluded.
double expected_loglik(const std::vector<double>& x, const Tensor& psi, const Tensor& eta,
                       double sigma2);

// Per-copy network input eta_k ⊙ (psi_k − x), shaped [K,D].
Tensor em_input(const Tensor& eta, const Tensor& psi, const std::vector<double>& x);

// dLambda/dtheta_k = sum_i eta[i,k] (x_i − psi[k,i]) / sigma2 * dpsi[k,i]/dtheta_k.
// dpsi_dtheta is the [K,D,M] Jacobian; the result is [K,M]. This is the ascent
// direction of Lambda (the sign the finite-difference oracle confirms).
Tensor analytic_theta_grad(const std::vector<double>& x, const Tensor& psi, const Tensor& eta,
                           const Tensor& dpsi_dtheta, double sigma2);

// Encoder/decoder geometry. The target output side of every conv is fixed and
// zero-padding (possibly asymmetric) is derived from it, so the decoder always
// lands exactly on the frame size.
struct ArchConfig {
  std::size_t side = 84;
  std::size_t k1 = 8, s1 = 4, c1 = 16;   // encoder conv 1
  std::size_t k2 = 4, s2 = 2, c2 = 32;   // encoder conv 2
  std::size_t e1 = 21, e2 = 10;          // conv output sides
  std::size_t fc = 256;                  // fully connected width
  std::size_t m = 250;                   // recurrent state size
  std::size_t kd1 = 4, kd2 = 8;          // decoder conv kernels

  static ArchConfig full(std::size_t side = 84);
  static ArchConfig desk(std::size_t side = 32);
  static ArchConfig reduced(std::size_t side = 16);
  void validate() const;
};

// Computes total zero padding so that a k/stride conv maps `in` to `out`.
struct PadPair {
  std::size_t before = 0, after = 0;
};
PadPair conv_padding(std::size_t in, std::size_t out, std::size_t k, std::size_t stride);

// K weight-shared copies of the recurrent encoder-decoder. Parameters live in
// a ParamStore under the "phi/" prefix; forward passes record on a Tape.
class PerceptionNet {
 public:
  explicit PerceptionNet(ArchConfig arch);

  void init_params(ParamStore& store, std::mt19937_64& rng) const;
  const ArchConfig& arch() const { return arch_; }
  std::size_t pixel_count() const { return arch_.side * arch_.side; }

  struct StepOut {
    VarId theta;  // [K,M]
    VarId psi;    // [K,D]
  };
  // One EM iteration: encode input [K,D], update hidden state, decode psi.
  StepOut step(Tape& tape, VarId input, VarId theta) const;
  // Decoder only; used to recover psi for a carried hidden state.
  VarId decode(Tape& tape, VarId theta) const;

  // Learned initial state broadcast to K copies plus small per-copy
  // symmetry-breaking noise.
  Tensor initial_theta(const ParamStore& store, std::size_t num_components,
                       std::mt19937_64& rng) const;

 private:
  VarId encode(Tape& tape, VarId input) const;
  ArchConfig arch_;
};

struct RolloutStep {
  Tensor eta;     // [D,K] responsibilities after this iteration
  double lambda;  // expected log-likelihood of this iteration
};

struct RolloutResult {
  VarId loss;         // scalar, sum_t -Lambda
  VarId theta_final;  // [K,M]
  VarId psi_final;    // [K,D]
  Tensor theta_first;  // value after iteration 1; the carry for the next window
  std::vector<RolloutStep> steps;  // one per iteration, plus step 0 carries eta0
};

// Unrolls t_ro EM iterations over frames[1..t_ro] starting from the carried
// (theta0, eta0); frames[0] is the window-opening observation whose
// responsibilities eta0 already reflect. Responsibilities are constants in the
// recorded graph; gradients flow through theta/psi across all iterations.
RolloutResult rollout(Tape& tape, const PerceptionNet& net,
                      const std::vector<const ObservationFrame*>& frames, const Tensor& theta0,
                      const Tensor& eta0, const EMConfig& config);

// Uniform responsibilities, shape [D,K].
Tensor uniform_eta(std::size_t num_pixels, std::size_t num_components);

// Fig. 4-style panel dump: observation, sum_k psi_k, eta argmax map, and each
// psi_k as graymaps, plus a manifest CSV row per dumped step.
void dump_segmentation_panels(const std::string& dir, std::size_t step_index,
                              const ObservationFrame& frame, const Tensor& psi, const Tensor& eta);

}  // namespace opc
