#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "opc/config.hpp"
#include "opc/control.hpp"
#include "opc/env.hpp"
#include "opc/perception.hpp"
#include "opc/trainer.hpp"

namespace opc {

struct RewardPoint {
  std::uint64_t observations = 0;
  double reward = 0.0;
};

// Sums step rewards into disjoint windows by observation count: window w
// covers observations (w*window, (w+1)*window]. Trailing partial windows are
// dropped.
std::vector<double> period_reward(const std::vector<RewardPoint>& series,
                                  std::uint64_t window = 20000);

// Adjusted mutual information between two labelings of the same points,
// arithmetic normalization, hypergeometric expected-MI correction.
// 1.0 for identical partitions (up to relabeling), ~0 for independent ones.
double adjusted_mutual_info(const std::vector<int>& a, const std::vector<int>& b);

// AMI between argmax_k eta and the ground-truth entity labels, restricted to
// foreground pixels (label != 0). defined=false when the frame has no
// foreground (score skipped).
double grouping_ami_frame(const Tensor& eta, const std::vector<int>& labels, bool* defined);

struct GroupingReport {
  double mean_ami = 0.0;
  std::vector<double> per_frame;
  std::size_t skipped = 0;
};

// Runs the trained model forward-only over `num_frames` policy steps of a
// fresh seeded env and scores per-frame grouping. Optionally dumps
// segmentation panels for the first `dump_panels` frames into panel_dir.
GroupingReport evaluate_grouping(const PerceptionNet& net, const PolicyHead& head,
                                 const ParamStore& store, const FullConfig& cfg,
                                 std::uint64_t seed, std::size_t num_frames,
                                 std::size_t dump_panels = 0, const std::string& panel_dir = "");

// Baseline runners. Both log the trainer's CSV schema into out_dir/metrics.csv
// and stop at the observation budget. Returns the logged series.
std::vector<StepMetrics> run_random_baseline(const FullConfig& cfg, std::uint64_t seed,
                                             const std::string& out_dir);
std::vector<StepMetrics> run_plain_actor_critic(const FullConfig& cfg, std::uint64_t seed,
                                                const std::string& out_dir);

// Reads a trainer metrics.csv back into (observations, reward) points.
std::vector<RewardPoint> read_reward_series(const std::string& csv_path);

// Exact EM on 1-D data with K fixed-variance components and uniform mixing
// weights (closed-form M-step). loglik is the complete data log-likelihood
// after every iteration; the EM theorem makes it non-decreasing.
struct ToyEMResult {
  std::vector<double> loglik;
  std::vector<double> means;
  std::size_t violations(double tol) const;
};
ToyEMResult toy_em_1d(const std::vector<double>& data, std::size_t K, double sigma2,
                      std::size_t iters, std::mt19937_64& rng);

// Frozen-phi diagnostics: repeated analytic gradient-ascent steps on theta
// (E-step between each), reporting the Lambda sequence and monotonicity
// violations at step sizes alpha and alpha/10.
struct EMDiagReport {
  std::vector<double> lambda_alpha;
  std::vector<double> lambda_alpha_tenth;
  std::size_t violations_alpha = 0;
  std::size_t violations_alpha_tenth = 0;
};
EMDiagReport em_ascent_diagnostics(const PerceptionNet& net, const ParamStore& store,
                                   const ObservationFrame& frame, const EMConfig& em,
                                   std::size_t iters, double alpha, std::mt19937_64& rng);

}  // namespace opc
