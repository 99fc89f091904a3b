#include "opc/checks.hpp"

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "opc/metrics.hpp"
#include "opc/optim.hpp"
#include "opc/perception.hpp"
#include "opc/tape.hpp"

namespace opc {
namespace {

std::string fmt_stat(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

CheckResult check_estep(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_d(1, 16), pick_k(1, 4);
  const double sigmas[] = {0.1, 0.25, 1.0};
  double max_err = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t D = pick_d(rng), K = pick_k(rng);
    const double sigma2 = sigmas[i % 3];
    std::vector<double> x(D);
    for (auto& v : x) v = unit(rng);
    Tensor psi({K, D});
    for (std::size_t j = 0; j < psi.size(); ++j) psi[j] = unit(rng);
    Tensor eta = e_step(x, psi, sigma2);
    // Direct enumeration: unnormalized densities, plain normalization.
    for (std::size_t d = 0; d < D; ++d) {
      double z = 0.0;
      std::vector<double> p(K);
      for (std::size_t k = 0; k < K; ++k) {
        p[k] = pixel_likelihood(x[d], psi[k * D + d], sigma2);
        z += p[k];
      }
      for (std::size_t k = 0; k < K; ++k) {
        max_err = std::max(max_err, std::abs(eta[d * K + k] - p[k] / z));
      }
    }
  }
  return {"estep-oracle", max_err <= 1e-10, max_err, "max abs error " + fmt_stat(max_err)};
}

CheckResult check_theta_grad(std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0), sym(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_d(2, 8), pick_k(1, 3), pick_m(1, 5);
  double max_rel = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t D = pick_d(rng), K = pick_k(rng), M = pick_m(rng);
    const double sigma2 = (i % 3 == 0) ? 0.1 : (i % 3 == 1 ? 0.25 : 1.0);
    std::vector<double> x(D);
    for (auto& v : x) v = unit(rng);
    // Linear decoder psi_k = W_k theta_k; the Jacobian is exactly W.
    Tensor theta({K, M}), W({K, D, M});
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] = sym(rng);
    for (std::size_t j = 0; j < W.size(); ++j) W[j] = sym(rng);
    auto decode = [&](const Tensor& th) {
      Tensor psi({K, D});
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t d = 0; d < D; ++d) {
          double s = 0.0;
          for (std::size_t m = 0; m < M; ++m) s += W[(k * D + d) * M + m] * th[k * M + m];
          psi[k * D + d] = s;
        }
      }
      return psi;
    };
    Tensor psi = decode(theta);
    Tensor eta({D, K});
    for (std::size_t j = 0; j < eta.size(); ++j) eta[j] = unit(rng);
    for (std::size_t d = 0; d < D; ++d) {
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) z += eta[d * K + k];
      for (std::size_t k = 0; k < K; ++k) eta[d * K + k] /= z;
    }
    Tensor grad = analytic_theta_grad(x, psi, eta, W, sigma2);
    const double eps = 1e-6;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      Tensor tp = theta, tm = theta;
      tp[j] += eps;
      tm[j] -= eps;
      const double fd =
          (expected_loglik(x, decode(tp), eta, sigma2) - expected_loglik(x, decode(tm), eta, sigma2)) /
          (2 * eps);
      const double denom = std::max({std::abs(fd), std::abs(grad[j]), 1e-8});
      max_rel = std::max(max_rel, std::abs(fd - grad[j]) / denom);
    }
  }
  return {"theta-grad-fd", max_rel <= 1e-5, max_rel, "max rel error " + fmt_stat(max_rel)};
}

CheckResult check_bptt(std::uint64_t seed, std::size_t dirs_per_block) {
  const ArchConfig arch = ArchConfig::reduced(16);
  EMConfig em;
  em.num_components = 2;
  em.rollout_len = 3;
  PerceptionNet net(arch);
  ParamStore store;
  std::mt19937_64 rng(seed);
  net.init_params(store, rng);

  // Random binary frames stand in for observations.
  const std::size_t D = net.pixel_count();
  std::uniform_real_distribution<double> unit(0.0, 1.0), sym(-1.0, 1.0);
  std::vector<ObservationFrame> frames(em.rollout_len + 1);
  for (auto& f : frames) {
    f.side = arch.side;
    f.pixels.resize(D);
    f.labels.assign(D, 0);
    for (auto& p : f.pixels) p = unit(rng) < 0.3 ? 1.0 : 0.0;
  }
  Tensor theta0 = net.initial_theta(store, em.num_components, rng);
  Tensor eta0 = uniform_eta(D, em.num_components);

  // The training objective holds the responsibilities constant (truncation
  // boundary of the amortized E-step), so the finite-difference oracle must
  // freeze them at the base-run values: first collect the eta sequence, then
  // difference the fixed-eta loss.
  std::vector<Tensor> etas;
  GradMap grads;
  {
    Tape tape;
    store.register_on(tape, "phi/");
    std::vector<const ObservationFrame*> ptrs;
    for (const auto& f : frames) ptrs.push_back(&f);
    RolloutResult rr = rollout(tape, net, ptrs, theta0, eta0, em);
    for (std::size_t s = 0; s < em.rollout_len; ++s) etas.push_back(rr.steps[s].eta);
    grads = tape.backward(rr.loss);
  }
  const std::size_t K = em.num_components;
  auto loss_at = [&]() {
    Tape t;
    store.register_on(t, "phi/");
    VarId theta = t.constant(theta0);
    VarId psi = net.decode(t, theta);
    VarId loss = t.constant(Tensor::scalar(0.0));
    for (std::size_t s = 1; s <= em.rollout_len; ++s) {
      const Tensor& eta = etas[s - 1];
      Tensor eta_kd({K, D}), xb({K, D});
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < D; ++i) {
          eta_kd[k * D + i] = eta[i * K + k];
          xb[k * D + i] = frames[s].pixels[i];
        }
      }
      VarId input = t.mul(t.constant(eta_kd), t.sub(psi, t.constant(xb)));
      auto out = net.step(t, input, theta);
      theta = out.theta;
      psi = out.psi;
      loss = t.add(loss, t.weighted_gaussian_nll(psi, Tensor({D}, frames[s].pixels), eta, em.sigma2));
    }
    return t.value(loss)[0];
  };

  double max_rel = 0.0;
  std::string worst;
  const double eps = 1e-6;
  for (auto& [name, base] : store.all()) {
    const GradMap::const_iterator git = grads.find(name);
    if (git == grads.end()) continue;
    for (std::size_t d = 0; d < dirs_per_block; ++d) {
      Tensor dir = Tensor::zeros_like(base);
      for (std::size_t j = 0; j < dir.size(); ++j) dir[j] = sym(rng);
      double norm = 0.0;
      for (std::size_t j = 0; j < dir.size(); ++j) norm += dir[j] * dir[j];
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < dir.size(); ++j) dir[j] /= norm;

      Tensor saved = base;
      base.add_scaled(dir, eps);
      const double lp = loss_at();
      base = saved;
      base.add_scaled(dir, -eps);
      const double lm = loss_at();
      base = saved;

      const double fd = (lp - lm) / (2 * eps);
      double proj = 0.0;
      for (std::size_t j = 0; j < dir.size(); ++j) proj += git->second[j] * dir[j];
      const double denom = std::max({std::abs(fd), std::abs(proj), 1e-5});
      const double rel = std::abs(fd - proj) / denom;
      if (rel > max_rel) {
        max_rel = rel;
        worst = name;
      }
    }
  }
  return {"bptt-grad-fd", max_rel <= 1e-3, max_rel,
          "max rel error " + fmt_stat(max_rel) + " (block " + worst + ")"};
}

CheckResult check_emtoy(std::size_t seeds) {
  std::size_t violations = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(1000 + s);
    std::normal_distribution<double> g0(-2.0, 0.5), g1(2.0, 0.5);
    std::vector<double> data;
    for (std::size_t i = 0; i < 200; ++i) data.push_back(i % 2 ? g0(rng) : g1(rng));
    ToyEMResult r = toy_em_1d(data, 2, 0.25, 50, rng);
    violations += r.violations(1e-9);
  }
  return {"emtoy-monotone", violations == 0, static_cast<double>(violations),
          std::to_string(violations) + " monotonicity violations over " + std::to_string(seeds) +
              " seeds"};
}

std::vector<CheckResult> run_checks(const std::string& scope) {
  std::vector<CheckResult> out;
  const bool all = scope == "all";
  if (all || scope == "estep") out.push_back(check_estep());
  if (all || scope == "grad") {
    out.push_back(check_theta_grad());
    out.push_back(check_bptt());
  }
  if (all || scope == "emtoy") out.push_back(check_emtoy());
  if (out.empty()) throw std::invalid_argument("unknown check scope: " + scope);
  return out;
}

}  // namespace opc
