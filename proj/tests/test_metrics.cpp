#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "opc/metrics.hpp"

using namespace opc;

TEST_CASE("period_reward sums disjoint observation windows and drops the tail") {
  std::vector<RewardPoint> series;
  // Window size 10: observations 1..10 -> window 0, 11..20 -> window 1, ...
  for (std::uint64_t o = 1; o <= 25; ++o) series.push_back({o, static_cast<double>(o)});
  std::vector<double> w = period_reward(series, 10);
  REQUIRE(w.size() == 2);  // the partial 21..25 tail is dropped
  CHECK(w[0] == doctest::Approx(55.0));   // 1+...+10
  CHECK(w[1] == doctest::Approx(155.0));  // 11+...+20
}

TEST_CASE("period_reward handles sparse observation counts") {
  std::vector<RewardPoint> series{{4, 1.0}, {10, 2.0}, {11, 4.0}, {20, 8.0}, {21, 16.0}};
  std::vector<double> w = period_reward(series, 10);
  REQUIRE(w.size() == 2);
  CHECK(w[0] == doctest::Approx(3.0));
  CHECK(w[1] == doctest::Approx(12.0));
}

TEST_CASE("AMI is 1 for identical partitions and invariant to relabeling") {
  std::vector<int> a{0, 0, 1, 1, 2, 2, 2, 0};
  std::vector<int> same = a;
  CHECK(adjusted_mutual_info(a, same) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<int> perm(a.size());
  std::transform(a.begin(), a.end(), perm.begin(), [](int v) { return (v + 7) * 3; });
  CHECK(adjusted_mutual_info(a, perm) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("AMI of independent labelings concentrates near zero") {
  std::mt19937_64 rng(99);
  const std::size_t n = 5000;
  std::vector<int> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = static_cast<int>(rng() % 4);
    b[i] = static_cast<int>(rng() % 4);
  }
  CHECK(std::fabs(adjusted_mutual_info(a, b)) < 0.02);
}

TEST_CASE("AMI is symmetric and handles trivial partitions") {
  std::vector<int> a{0, 1, 0, 1, 2, 2};
  std::vector<int> b{1, 1, 0, 0, 2, 0};
  CHECK(adjusted_mutual_info(a, b) == doctest::Approx(adjusted_mutual_info(b, a)).epsilon(1e-12));
  std::vector<int> flat(6, 3);
  // One trivial partition carries no information; adjusted score is 0.
  CHECK(adjusted_mutual_info(a, flat) == doctest::Approx(0.0));
  CHECK(adjusted_mutual_info(flat, flat) == doctest::Approx(1.0));
}

TEST_CASE("frame grouping score restricts to foreground and flags empty frames") {
  const std::size_t D = 6, K = 2;
  Tensor eta({D, K});
  // Pixels 0-2 assigned to component 0, pixels 3-5 to component 1.
  for (std::size_t i = 0; i < D; ++i) {
    eta[i * K + 0] = i < 3 ? 0.9 : 0.1;
    eta[i * K + 1] = i < 3 ? 0.1 : 0.9;
  }
  // Background on pixels 0 and 3; the rest split into two entities.
  std::vector<int> labels{0, 7, 7, 0, 4, 4};
  bool defined = false;
  double score = grouping_ami_frame(eta, labels, &defined);
  CHECK(defined);
  CHECK(score == doctest::Approx(1.0).epsilon(1e-12));  // perfect split on foreground

  std::vector<int> empty(D, 0);
  grouping_ami_frame(eta, empty, &defined);
  CHECK_FALSE(defined);
}

TEST_CASE("toy EM log-likelihood is monotone and recovers well-separated means") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n1(-2.0, 0.5), n2(2.0, 0.5);
  std::vector<double> data;
  for (int i = 0; i < 150; ++i) data.push_back(n1(rng));
  for (int i = 0; i < 150; ++i) data.push_back(n2(rng));
  ToyEMResult r = toy_em_1d(data, 2, 0.25, 50, rng);
  REQUIRE(r.loglik.size() == 50);
  CHECK(r.violations(1e-9) == 0);
  std::vector<double> means = r.means;
  std::sort(means.begin(), means.end());
  CHECK(means[0] == doctest::Approx(-2.0).epsilon(0.15));
  CHECK(means[1] == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("reward series round-trips through the trainer CSV format") {
  namespace fs = std::filesystem;
  const std::string path = "/tmp/opc_metrics_series.csv";
  {
    std::ofstream out(path);
    out << StepMetrics::csv_header() << '\n';
    StepMetrics m;
    m.observations = 10;
    m.reward = 1.5;
    out << m.csv_row() << '\n';
    m.observations = 20;
    m.reward = -0.5;
    out << m.csv_row() << '\n';
  }
  std::vector<RewardPoint> pts = read_reward_series(path);
  REQUIRE(pts.size() == 2);
  CHECK(pts[0].observations == 10);
  CHECK(pts[0].reward == doctest::Approx(1.5));
  CHECK(pts[1].observations == 20);
  CHECK(pts[1].reward == doctest::Approx(-0.5));
  fs::remove(path);
}

TEST_CASE("frozen-weight gradient ascent on theta increases the objective") {
  FullConfig cfg;
  cfg.arch = ArchConfig::reduced();
  cfg.env.image_side = cfg.arch.side;
  cfg.env.target_radius = 2.0;
  cfg.em.num_components = 2;
  PerceptionNet net(cfg.arch);
  ParamStore store;
  std::mt19937_64 rng(3);
  net.init_params(store, rng);
  WaterworldEnv env(cfg.env, 4);
  ObservationFrame frame = env.reset(4);

  EMDiagReport rep = em_ascent_diagnostics(net, store, frame, cfg.em, 15, 1e-3, rng);
  REQUIRE(rep.lambda_alpha.size() == 15);
  REQUIRE(rep.lambda_alpha_tenth.size() == 15);
  CHECK(rep.violations_alpha_tenth == 0);  // small enough steps never descend
  CHECK(rep.lambda_alpha.back() > rep.lambda_alpha.front());
}

TEST_CASE("random baseline logs the trainer schema and respects the budget") {
  namespace fs = std::filesystem;
  const std::string dir = "/tmp/opc_random_baseline";
  fs::remove_all(dir);
  FullConfig cfg;
  cfg.arch = ArchConfig::reduced();
  cfg.arch_profile = "reduced";
  cfg.env.image_side = cfg.arch.side;
  cfg.env.target_radius = 2.0;
  cfg.env.episode_len = 30;
  cfg.em.num_components = 2;
  cfg.em.rollout_len = 3;
  cfg.train.obs_budget = 50;
  std::vector<StepMetrics> series = run_random_baseline(cfg, 1, dir);
  REQUIRE(!series.empty());
  CHECK(series.back().observations >= 50);
  std::ifstream csv(dir + "/metrics.csv");
  REQUIRE(csv.good());
  std::string header;
  std::getline(csv, header);
  CHECK(header == StepMetrics::csv_header());
  // Deterministic under the same seed.
  const std::string dir2 = dir + "_2";
  fs::remove_all(dir2);
  std::vector<StepMetrics> again = run_random_baseline(cfg, 1, dir2);
  REQUIRE(again.size() == series.size());
  for (std::size_t i = 0; i < series.size(); ++i) CHECK(again[i].reward == series[i].reward);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("grouping evaluation runs on an untrained model and stays in range") {
  FullConfig cfg;
  cfg.arch = ArchConfig::reduced();
  cfg.env.image_side = cfg.arch.side;
  cfg.env.target_radius = 2.0;
  cfg.env.episode_len = 30;
  cfg.em.num_components = 2;
  cfg.em.rollout_len = 3;
  cfg.train.policy_hidden = 16;
  PerceptionNet net(cfg.arch);
  PolicyHead head(cfg.em.num_components * cfg.arch.m, cfg.train.policy_hidden);
  ParamStore store;
  std::mt19937_64 rng(8);
  net.init_params(store, rng);
  head.init_params(store, rng);

  GroupingReport rep = evaluate_grouping(net, head, store, cfg, 3, 10);
  CHECK(rep.per_frame.size() + rep.skipped == 10);
  CHECK(rep.mean_ami >= -1.0);
  CHECK(rep.mean_ami <= 1.0);
}
