#include "opc/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace opc {
namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Compacts arbitrary labels to 0..n-1.
std::vector<int> compact(const std::vector<int>& labels, std::size_t& num_classes) {
  std::map<int, int> remap;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i] = remap.emplace(labels[i], static_cast<int>(remap.size())).first->second;
  }
  num_classes = remap.size();
  return out;
}

}  // namespace

std::vector<double> period_reward(const std::vector<RewardPoint>& series, std::uint64_t window) {
  if (window == 0) throw std::invalid_argument("period_reward: window must be positive");
  if (series.empty()) return {};
  std::uint64_t prev = 0;
  std::uint64_t last = series.back().observations;
  const std::size_t num_windows = last / window;
  std::vector<double> out(num_windows, 0.0);
  for (const auto& p : series) {
    if (p.observations < prev) throw std::invalid_argument("period_reward: non-monotone series");
    prev = p.observations;
    if (p.observations == 0) continue;
    const std::uint64_t w = (p.observations - 1) / window;
    if (w < num_windows) out[w] += p.reward;
  }
  return out;
}

double adjusted_mutual_info(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("adjusted_mutual_info: size mismatch or empty input");
  }
  const double N = static_cast<double>(a.size());
  std::size_t R = 0, C = 0;
  std::vector<int> u = compact(a, R), v = compact(b, C);
  std::vector<double> row(R, 0.0), col(C, 0.0);
  std::vector<double> joint(R * C, 0.0);
  for (std::size_t i = 0; i < u.size(); ++i) {
    row[u[i]] += 1.0;
    col[v[i]] += 1.0;
    joint[u[i] * C + v[i]] += 1.0;
  }
  double mi = 0.0, hu = 0.0, hv = 0.0;
  for (double r : row) hu -= (r / N) * std::log(r / N);
  for (double c : col) hv -= (c / N) * std::log(c / N);
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const double nij = joint[i * C + j];
      if (nij > 0.0) mi += (nij / N) * std::log(N * nij / (row[i] * col[j]));
    }
  }
  if (hu == 0.0 && hv == 0.0) return 1.0;  // both partitions trivial and identical

  // Expected MI under the hypergeometric model of random labelings with the
  // same marginals.
  double emi = 0.0;
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const double ai = row[i], bj = col[j];
      const double lo = std::max(1.0, ai + bj - N);
      const double hi = std::min(ai, bj);
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double logp = std::lgamma(ai + 1) + std::lgamma(bj + 1) + std::lgamma(N - ai + 1) +
                            std::lgamma(N - bj + 1) - std::lgamma(N + 1) - std::lgamma(nij + 1) -
                            std::lgamma(ai - nij + 1) - std::lgamma(bj - nij + 1) -
                            std::lgamma(N - ai - bj + nij + 1);
        emi += std::exp(logp) * (nij / N) * std::log(N * nij / (ai * bj));
      }
    }
  }
  const double denom = 0.5 * (hu + hv) - emi;
  if (std::abs(denom) < 1e-15) return 0.0;
  return (mi - emi) / denom;
}

double grouping_ami_frame(const Tensor& eta, const std::vector<int>& labels, bool* defined) {
  const std::size_t D = labels.size();
  if (eta.rank() != 2 || eta.extent(0) != D) throw ShapeError("grouping_ami_frame: eta shape");
  const std::size_t K = eta.extent(1);
  std::vector<int> truth, pred;
  for (std::size_t i = 0; i < D; ++i) {
    if (labels[i] == 0) continue;
    truth.push_back(labels[i]);
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (eta[i * K + k] > eta[i * K + best]) best = k;
    }
    pred.push_back(static_cast<int>(best));
  }
  if (truth.empty()) {
    if (defined) *defined = false;
    return 0.0;
  }
  if (defined) *defined = true;
  return adjusted_mutual_info(pred, truth);
}

namespace {

// One forward-only EM iteration at fixed parameters.
Tensor em_forward(const PerceptionNet& net, const ParamStore& store, const Tensor& theta,
                  const Tensor& eta, const Tensor& psi, const ObservationFrame& frame,
                  Tensor* psi_out) {
  Tape tape;
  store.register_on(tape, "phi/");
  auto out = net.step(tape, tape.constant(em_input(eta, psi, frame.pixels)), tape.constant(theta));
  if (psi_out) *psi_out = tape.value(out.psi);
  return tape.value(out.theta);
}

Tensor decode_only(const PerceptionNet& net, const ParamStore& store, const Tensor& theta) {
  Tape tape;
  store.register_on(tape, "phi/");
  return tape.value(net.decode(tape, tape.constant(theta)));
}

}  // namespace

GroupingReport evaluate_grouping(const PerceptionNet& net, const PolicyHead& head,
                                 const ParamStore& store, const FullConfig& cfg,
                                 std::uint64_t seed, std::size_t num_frames,
                                 std::size_t dump_panels, const std::string& panel_dir) {
  const std::size_t K = cfg.em.num_components;
  WaterworldEnv env(cfg.env, seed);
  std::mt19937_64 rng(mix64(seed ^ 0x5eedull));
  ObservationFrame frame = env.reset(seed);

  Tensor theta = net.initial_theta(store, K, rng);
  Tensor psi = decode_only(net, store, theta);
  Tensor eta = uniform_eta(net.pixel_count(), K);
  theta = em_forward(net, store, theta, eta, psi, frame, &psi);
  eta = e_step(frame.pixels, psi, cfg.em.sigma2);

  // Settle on the first frame for a full rollout's worth of iterations before
  // scoring; mirrors the trainer's warm start.
  for (std::size_t i = 1; i < cfg.em.rollout_len; ++i) {
    theta = em_forward(net, store, theta, eta, psi, frame, &psi);
    eta = e_step(frame.pixels, psi, cfg.em.sigma2);
  }

  if (dump_panels) std::filesystem::create_directories(panel_dir);
  GroupingReport report;
  for (std::size_t f = 0; f < num_frames; ++f) {
    PolicyOutput po = head.evaluate(store, theta);
    int a = sample_action(po.logits, rng);
    StepResult sr = env.step(static_cast<Action>(a));
    frame = sr.frame;
    theta = em_forward(net, store, theta, eta, psi, frame, &psi);
    eta = e_step(frame.pixels, psi, cfg.em.sigma2);
    bool defined = false;
    const double score = grouping_ami_frame(eta, frame.labels, &defined);
    if (defined) {
      report.per_frame.push_back(score);
    } else {
      ++report.skipped;
    }
    if (f < dump_panels) dump_segmentation_panels(panel_dir, f, frame, psi, eta);
    if (env.episode_done()) frame = env.reset(mix64(seed + f + 1));
  }
  if (!report.per_frame.empty()) {
    double s = 0.0;
    for (double v : report.per_frame) s += v;
    report.mean_ami = s / static_cast<double>(report.per_frame.size());
  }
  return report;
}

std::vector<RewardPoint> read_reward_series(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty csv " + csv_path);
  std::vector<RewardPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    RewardPoint p;
    for (int col = 0; std::getline(ss, cell, ','); ++col) {
      if (col == 0) p.observations = std::stoull(cell);
      if (col == 3) p.reward = std::stod(cell);
    }
    out.push_back(p);
  }
  return out;
}

namespace {

void write_metrics_csv(const std::string& out_dir, const std::vector<StepMetrics>& rows) {
  std::filesystem::create_directories(out_dir);
  std::ofstream csv(out_dir + "/metrics.csv");
  if (!csv) throw std::runtime_error("cannot open " + out_dir + "/metrics.csv");
  csv << StepMetrics::csv_header() << '\n';
  for (const auto& r : rows) csv << r.csv_row() << '\n';
}

}  // namespace

std::vector<StepMetrics> run_random_baseline(const FullConfig& cfg, std::uint64_t seed,
                                             const std::string& out_dir) {
  WaterworldEnv env(cfg.env, seed);
  env.reset(seed);
  std::mt19937_64 rng(mix64(seed ^ 0xba5eull));
  std::uniform_int_distribution<int> pick(0, kNumActions - 1);
  std::vector<StepMetrics> rows;
  std::uint64_t obs = 1;
  std::size_t episode = 0;
  double window_reward = 0.0;
  std::uint64_t window_index = 0;
  constexpr std::uint64_t kWindow = 20000;
  while (obs < cfg.train.obs_budget) {
    const auto t0 = std::chrono::steady_clock::now();
    StepResult sr = env.step(static_cast<Action>(pick(rng)));
    ++obs;
    if (obs / kWindow > window_index) {
      window_index = obs / kWindow;
      window_reward = 0.0;
    }
    window_reward += sr.reward;
    StepMetrics m;
    m.observations = obs;
    m.episode = episode;
    m.step = env.step_count();
    m.reward = sr.reward;
    m.period_reward = window_reward;
    m.entropy = std::log(static_cast<double>(kNumActions));
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(m);
    if (env.episode_done()) {
      ++episode;
      env.reset(mix64(seed + episode));
      ++obs;
    }
  }
  if (!out_dir.empty()) write_metrics_csv(out_dir, rows);
  return rows;
}

namespace {

// Frame-input actor-critic: the perception encoder architecture applied to the
// raw frame, feeding the same rectified hidden head. All parameters trained
// with RMSProp.
class PlainA2C {
 public:
  PlainA2C(const ArchConfig& arch, std::size_t hidden, std::mt19937_64& rng)
      : arch_(arch), hidden_(hidden) {
    const ArchConfig& a = arch_;
    auto ln = [&](const std::string& name, std::size_t n) {
      store_.add(name + "/g", Tensor::full({n}, 1.0));
      store_.add(name + "/b", Tensor({n}));
    };
    store_.add("base/conv1/w", uniform_init({a.c1, 1, a.k1, a.k1}, a.k1 * a.k1, rng));
    store_.add("base/conv1/b", Tensor({a.c1}));
    ln("base/ln1", a.c1 * a.e1 * a.e1);
    store_.add("base/conv2/w", uniform_init({a.c2, a.c1, a.k2, a.k2}, a.c1 * a.k2 * a.k2, rng));
    store_.add("base/conv2/b", Tensor({a.c2}));
    ln("base/ln2", a.c2 * a.e2 * a.e2);
    store_.add("base/fc/w", uniform_init({a.c2 * a.e2 * a.e2, a.fc}, a.c2 * a.e2 * a.e2, rng));
    store_.add("base/fc/b", Tensor({a.fc}));
    ln("base/ln3", a.fc);
    store_.add("base/head/w", uniform_init({a.fc, hidden_}, a.fc, rng));
    store_.add("base/head/b", Tensor({hidden_}));
    store_.add("base/zeta/w", uniform_init({hidden_, kNumActions}, hidden_, rng));
    store_.add("base/zeta/b", Tensor({kNumActions}));
    store_.add("base/zetav/w", uniform_init({hidden_, 1}, hidden_, rng));
    store_.add("base/zetav/b", Tensor({1}));
  }

  struct Out {
    VarId logits;
    VarId value;
  };

  Out forward(Tape& t, const ObservationFrame& frame) const {
    const ArchConfig& a = arch_;
    Tensor x({1, static_cast<std::size_t>(frame.size())}, frame.pixels);
    VarId h = t.reshape(t.constant(x), {1, 1, a.side, a.side});
    const PadPair p1 = conv_padding(a.side, a.e1, a.k1, a.s1);
    h = t.conv2d(h, t.param_id("base/conv1/w"), t.param_id("base/conv1/b"),
                 {1, a.c1, a.k1, a.k1, a.s1, p1.before, p1.before, p1.after, p1.after});
    h = t.layer_norm(h, t.param_id("base/ln1/g"), t.param_id("base/ln1/b"));
    h = t.elu(h);
    const PadPair p2 = conv_padding(a.e1, a.e2, a.k2, a.s2);
    h = t.conv2d(h, t.param_id("base/conv2/w"), t.param_id("base/conv2/b"),
                 {a.c1, a.c2, a.k2, a.k2, a.s2, p2.before, p2.before, p2.after, p2.after});
    h = t.layer_norm(h, t.param_id("base/ln2/g"), t.param_id("base/ln2/b"));
    h = t.elu(h);
    h = t.reshape(h, {1, a.c2 * a.e2 * a.e2});
    h = t.linear(h, t.param_id("base/fc/w"), t.param_id("base/fc/b"));
    h = t.layer_norm(h, t.param_id("base/ln3/g"), t.param_id("base/ln3/b"));
    h = t.elu(h);
    h = t.relu(t.linear(h, t.param_id("base/head/w"), t.param_id("base/head/b")));
    VarId logits =
        t.reshape(t.linear(h, t.param_id("base/zeta/w"), t.param_id("base/zeta/b")), {kNumActions});
    VarId value = t.pick(t.linear(h, t.param_id("base/zetav/w"), t.param_id("base/zetav/b")), 0);
    return Out{logits, value};
  }

  PolicyOutput evaluate(const ObservationFrame& frame) const {
    Tape tape;
    store_.register_on(tape);
    Out out = forward(tape, frame);
    return PolicyOutput{tape.value(out.logits).values(), tape.value(out.value)[0]};
  }

  ParamStore& store() { return store_; }

 private:
  ArchConfig arch_;
  std::size_t hidden_;
  ParamStore store_;
};

}  // namespace

std::vector<StepMetrics> run_plain_actor_critic(const FullConfig& cfg, std::uint64_t seed,
                                                const std::string& out_dir) {
  WaterworldEnv env(cfg.env, seed);
  std::mt19937_64 rng(seed);
  PlainA2C model(cfg.arch, cfg.train.policy_hidden, rng);
  RMSPropOptimizer opt(cfg.train.rmsprop_lr, cfg.train.rmsprop_decay);

  ObservationFrame frame = env.reset(seed);
  std::vector<StepMetrics> rows;
  std::uint64_t obs = 1;
  std::size_t episode = 0;
  double window_reward = 0.0;
  std::uint64_t window_index = 0;
  constexpr std::uint64_t kWindow = 20000;
  while (obs < cfg.train.obs_budget) {
    const auto t0 = std::chrono::steady_clock::now();
    Tape tape;
    model.store().register_on(tape);
    auto out = model.forward(tape, frame);
    const std::vector<double> logits = tape.value(out.logits).values();
    const double v_cur = tape.value(out.value)[0];
    const int a = sample_action(logits, rng);
    StepResult sr = env.step(static_cast<Action>(a));
    ++obs;
    const double v_next = model.evaluate(sr.frame).value;
    const double y = td_target(sr.reward, cfg.train.gamma, v_next);
    VarId aloss = actor_loss(tape, out.logits, a, y - v_cur, cfg.train.entropy_beta);
    VarId closs = critic_loss(tape, out.value, y);
    GradMap grads = tape.backward(aloss);
    merge_grads(grads, tape.backward(closs));
    opt.step(model.store(), grads);
    frame = sr.frame;

    if (obs / kWindow > window_index) {
      window_index = obs / kWindow;
      window_reward = 0.0;
    }
    window_reward += sr.reward;
    StepMetrics m;
    m.observations = obs;
    m.episode = episode;
    m.step = env.step_count();
    m.reward = sr.reward;
    m.period_reward = window_reward;
    m.td_loss = (y - v_cur) * (y - v_cur);
    m.entropy = entropy_of_logits(logits);
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(m);
    if (env.episode_done()) {
      ++episode;
      frame = env.reset(mix64(seed + episode));
      ++obs;
    }
  }
  if (!out_dir.empty()) write_metrics_csv(out_dir, rows);
  return rows;
}

std::size_t ToyEMResult::violations(double tol) const {
  std::size_t count = 0;
  for (std::size_t i = 1; i < loglik.size(); ++i) {
    if (loglik[i] < loglik[i - 1] - tol) ++count;
  }
  return count;
}

ToyEMResult toy_em_1d(const std::vector<double>& data, std::size_t K, double sigma2,
                      std::size_t iters, std::mt19937_64& rng) {
  if (data.empty() || K == 0) throw std::invalid_argument("toy_em_1d: empty input");
  const std::size_t N = data.size();
  std::uniform_int_distribution<std::size_t> pick(0, N - 1);
  std::vector<double> mu(K);
  for (auto& m : mu) m = data[pick(rng)] + 1e-6 * std::uniform_real_distribution<double>(-1, 1)(rng);

  auto loglik = [&] {
    double ll = 0.0;
    for (double x : data) {
      double mx = -1e300;
      std::vector<double> lk(K);
      for (std::size_t k = 0; k < K; ++k) {
        lk[k] = -0.5 * (x - mu[k]) * (x - mu[k]) / sigma2 - 0.5 * std::log(2.0 * M_PI * sigma2) -
                std::log(static_cast<double>(K));
        mx = std::max(mx, lk[k]);
      }
      double s = 0.0;
      for (double v : lk) s += std::exp(v - mx);
      ll += mx + std::log(s);
    }
    return ll;
  };

  ToyEMResult result;
  std::vector<double> resp(N * K);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t n = 0; n < N; ++n) {
      double mx = -1e300;
      for (std::size_t k = 0; k < K; ++k) {
        resp[n * K + k] = -0.5 * (data[n] - mu[k]) * (data[n] - mu[k]) / sigma2;
        mx = std::max(mx, resp[n * K + k]);
      }
      double z = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        resp[n * K + k] = std::exp(resp[n * K + k] - mx);
        z += resp[n * K + k];
      }
      for (std::size_t k = 0; k < K; ++k) resp[n * K + k] /= z;
    }
    for (std::size_t k = 0; k < K; ++k) {
      double num = 0.0, den = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        num += resp[n * K + k] * data[n];
        den += resp[n * K + k];
      }
      if (den > 0.0) mu[k] = num / den;
    }
    result.loglik.push_back(loglik());
  }
  result.means = mu;
  return result;
}

namespace {

std::vector<double> ascent_lambda_sequence(const PerceptionNet& net, const ParamStore& store,
                                           const ObservationFrame& frame, const EMConfig& em,
                                           std::size_t iters, double alpha, Tensor theta) {
  std::vector<double> seq;
  for (std::size_t it = 0; it < iters; ++it) {
    Tape tape;
    store.register_on(tape, "phi/");
    VarId th = tape.param("diag/theta", theta);
    VarId psi = net.decode(tape, th);
    Tensor eta = e_step(frame.pixels, tape.value(psi), em.sigma2);
    Tensor x({static_cast<std::size_t>(frame.size())}, frame.pixels);
    VarId nll = tape.weighted_gaussian_nll(psi, x, eta, em.sigma2);
    seq.push_back(-tape.value(nll)[0]);
    GradMap g = tape.backward(nll);
    theta.add_scaled(g.at("diag/theta"), -alpha);
  }
  return seq;
}

std::size_t count_violations(const std::vector<double>& seq, double tol) {
  std::size_t count = 0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    if (seq[i] < seq[i - 1] - tol) ++count;
  }
  return count;
}

}  // namespace

EMDiagReport em_ascent_diagnostics(const PerceptionNet& net, const ParamStore& store,
                                   const ObservationFrame& frame, const EMConfig& em,
                                   std::size_t iters, double alpha, std::mt19937_64& rng) {
  Tensor theta = net.initial_theta(store, em.num_components, rng);
  EMDiagReport report;
  report.lambda_alpha = ascent_lambda_sequence(net, store, frame, em, iters, alpha, theta);
  report.lambda_alpha_tenth =
      ascent_lambda_sequence(net, store, frame, em, iters, alpha / 10.0, theta);
  report.violations_alpha = count_violations(report.lambda_alpha, 1e-9);
  report.violations_alpha_tenth = count_violations(report.lambda_alpha_tenth, 1e-9);
  return report;
}

}  // namespace opc
