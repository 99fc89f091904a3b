#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace opc {

struct CheckResult {
  std::string name;
  bool pass = false;
  double stat = 0.0;  // the max error / violation count backing the verdict
  std::string detail;
};

// Posterior responsibilities vs direct (non-log-space) enumeration on random
// small instances. Passes at max abs error <= 1e-10.
CheckResult check_estep(std::size_t instances = 1000, std::uint64_t seed = 7);

// Analytic expected-log-likelihood gradient vs central finite differences
// through a random linear decoder. Passes at max rel error <= 1e-5.
CheckResult check_theta_grad(std::size_t instances = 100, std::uint64_t seed = 11);

// Full rollout loss gradient vs random directional finite differences, one
// per parameter block, on the reduced net. Passes at max rel error <= 1e-3.
CheckResult check_bptt(std::uint64_t seed = 13, std::size_t dirs_per_block = 2);

// Exact 1-D toy EM monotonicity over `seeds` random datasets, 50 iterations,
// tolerance 1e-9. Passes at zero violations.
CheckResult check_emtoy(std::size_t seeds = 20);

std::vector<CheckResult> run_checks(const std::string& scope);  // grad|estep|emtoy|all

}  // namespace opc
