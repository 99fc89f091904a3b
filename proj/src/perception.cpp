#include "opc/perception.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace opc {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;
}

void EMConfig::validate() const {
  if (num_components < 2) throw std::invalid_argument("em: K must be >= 2");
  if (rollout_len < 1) throw std::invalid_argument("em: t_ro must be >= 1");
  if (sigma2 <= 0.0) throw std::invalid_argument("em: sigma2 must be positive");
}

double pixel_likelihood(double x, double psi, double sigma2) {
  const double r = x - psi;
  return std::exp(-r * r / (2.0 * sigma2)) / std::sqrt(2.0 * M_PI * sigma2);
}

Tensor e_step(const std::vector<double>& x, const Tensor& psi, double sigma2) {
  const std::size_t K = psi.extent(0), D = psi.extent(1);
  if (x.size() != D) throw ShapeError("e_step: frame size != psi columns");
  Tensor eta({D, K});
  std::vector<double> logp(K);
  for (std::size_t i = 0; i < D; ++i) {
    if (!std::isfinite(x[i])) throw std::invalid_argument("e_step: non-finite pixel value");
    double mx = -1e300;
    for (std::size_t k = 0; k < K; ++k) {
      const double r = x[i] - psi[k * D + i];
      // Uniform mixing prior cancels in the normalization.
      logp[k] = -r * r / (2.0 * sigma2);
      mx = std::max(mx, logp[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      logp[k] = std::exp(logp[k] - mx);
      z += logp[k];
    }
    for (std::size_t k = 0; k < K; ++k) eta[i * K + k] = logp[k] / z;
  }
  return eta;
}

double expected_loglik(const std::vector<double>& x, const Tensor& psi, const Tensor& eta,
                       double sigma2) {
  const std::size_t K = psi.extent(0), D = psi.extent(1);
  if (x.size() != D || eta.shape() != std::vector<std::size_t>{D, K}) {
    throw ShapeError("expected_loglik: shape mismatch");
  }
  const double log_norm = -0.5 * (kLog2Pi + std::log(sigma2));
  double acc = 0.0;
  for (std::size_t i = 0; i < D; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const double r = x[i] - psi[k * D + i];
      acc += eta[i * K + k] * (log_norm - r * r / (2.0 * sigma2));
    }
  }
  return acc;
}

Tensor em_input(const Tensor& eta, const Tensor& psi, const std::vector<double>& x) {
  const std::size_t K = psi.extent(0), D = psi.extent(1);
  if (x.size() != D || eta.shape() != std::vector<std::size_t>{D, K}) {
    throw ShapeError("em_input: shape mismatch");
  }
  Tensor out({K, D});
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < D; ++i) {
      out[k * D + i] = eta[i * K + k] * (psi[k * D + i] - x[i]);
    }
  }
  return out;
}

Tensor analytic_theta_grad(const std::vector<double>& x, const Tensor& psi, const Tensor& eta,
                           const Tensor& dpsi_dtheta, double sigma2) {
  const std::size_t K = psi.extent(0), D = psi.extent(1);
  const std::size_t M = dpsi_dtheta.extent(2);
  if (dpsi_dtheta.extent(0) != K || dpsi_dtheta.extent(1) != D) {
    throw ShapeError("analytic_theta_grad: Jacobian shape mismatch");
  }
  Tensor grad({K, M});
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < D; ++i) {
      const double w = eta[i * K + k] * (x[i] - psi[k * D + i]) / sigma2;
      const double* j = dpsi_dtheta.data() + (k * D + i) * M;
      double* g = grad.data() + k * M;
      for (std::size_t m = 0; m < M; ++m) g[m] += w * j[m];
    }
  }
  return grad;
}

PadPair conv_padding(std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
  const std::size_t needed = (out - 1) * stride + k;
  if (needed < in) throw std::invalid_argument("conv_padding: output too small for kernel/stride");
  const std::size_t total = needed - in;
  return PadPair{total / 2, total - total / 2};
}

ArchConfig ArchConfig::full(std::size_t side) {
  ArchConfig a;
  a.side = side;
  a.e1 = (side + a.s1 - 1) / a.s1;
  a.e2 = side == 84 ? 10 : (a.e1 + a.s2 - 1) / a.s2;  // 10x10x32 decoder seed at 84
  a.kd1 = a.k2;
  a.kd2 = a.k1;
  a.validate();
  return a;
}

ArchConfig ArchConfig::desk(std::size_t side) {
  ArchConfig a;
  a.side = side;
  a.k1 = 8; a.s1 = 4; a.c1 = 8;
  a.k2 = 4; a.s2 = 2; a.c2 = 16;
  a.fc = 64;
  a.m = 64;
  a.e1 = (side + a.s1 - 1) / a.s1;
  a.e2 = (a.e1 + a.s2 - 1) / a.s2;
  a.kd1 = 4;
  a.kd2 = 4;
  a.validate();
  return a;
}

ArchConfig ArchConfig::reduced(std::size_t side) {
  ArchConfig a;
  a.side = side;
  a.k1 = 4; a.s1 = 2; a.c1 = 4;
  a.k2 = 4; a.s2 = 2; a.c2 = 8;
  a.fc = 32;
  a.m = 16;
  a.e1 = (side + a.s1 - 1) / a.s1;
  a.e2 = (a.e1 + a.s2 - 1) / a.s2;
  a.kd1 = 4;
  a.kd2 = 4;
  a.validate();
  return a;
}

void ArchConfig::validate() const {
  // Every conv padding must be realizable; computing them throws otherwise.
  conv_padding(side, e1, k1, s1);
  conv_padding(e1, e2, k2, s2);
  conv_padding(e2 * s2, e1, kd1, 1);
  conv_padding(e1 * s1, side, kd2, 1);
  if (m == 0 || fc == 0) throw std::invalid_argument("arch: m and fc must be positive");
}

PerceptionNet::PerceptionNet(ArchConfig arch) : arch_(arch) { arch_.validate(); }

void PerceptionNet::init_params(ParamStore& store, std::mt19937_64& rng) const {
  const ArchConfig& a = arch_;
  auto ln = [&](const std::string& name, std::size_t n) {
    store.add(name + "/g", Tensor::full({n}, 1.0));
    store.add(name + "/b", Tensor({n}));
  };
  store.add("phi/enc/conv1/w", uniform_init({a.c1, 1, a.k1, a.k1}, a.k1 * a.k1, rng));
  store.add("phi/enc/conv1/b", Tensor({a.c1}));
  ln("phi/enc/ln1", a.c1 * a.e1 * a.e1);
  store.add("phi/enc/conv2/w", uniform_init({a.c2, a.c1, a.k2, a.k2}, a.c1 * a.k2 * a.k2, rng));
  store.add("phi/enc/conv2/b", Tensor({a.c2}));
  ln("phi/enc/ln2", a.c2 * a.e2 * a.e2);
  store.add("phi/enc/fc/w", uniform_init({a.c2 * a.e2 * a.e2, a.fc}, a.c2 * a.e2 * a.e2, rng));
  store.add("phi/enc/fc/b", Tensor({a.fc}));
  ln("phi/enc/ln3", a.fc);
  store.add("phi/rnn/wx", uniform_init({a.fc, a.m}, a.fc, rng));
  store.add("phi/rnn/wh", uniform_init({a.m, a.m}, a.m, rng));
  store.add("phi/rnn/b", Tensor({a.m}));
  ln("phi/rnn/ln", a.m);
  store.add("phi/dec/fc1/w", uniform_init({a.m, a.fc}, a.m, rng));
  store.add("phi/dec/fc1/b", Tensor({a.fc}));
  ln("phi/dec/ln1", a.fc);
  store.add("phi/dec/fc2/w", uniform_init({a.fc, a.c2 * a.e2 * a.e2}, a.fc, rng));
  store.add("phi/dec/fc2/b", Tensor({a.c2 * a.e2 * a.e2}));
  ln("phi/dec/ln2", a.c2 * a.e2 * a.e2);
  store.add("phi/dec/conv1/w", uniform_init({a.c1, a.c2, a.kd1, a.kd1}, a.c2 * a.kd1 * a.kd1, rng));
  store.add("phi/dec/conv1/b", Tensor({a.c1}));
  ln("phi/dec/ln3", a.c1 * a.e1 * a.e1);
  store.add("phi/dec/conv2/w", uniform_init({1, a.c1, a.kd2, a.kd2}, a.c1 * a.kd2 * a.kd2, rng));
  store.add("phi/dec/conv2/b", Tensor({1}));
  store.add("phi/theta0", Tensor({a.m}));
}

VarId PerceptionNet::encode(Tape& t, VarId input) const {
  const ArchConfig& a = arch_;
  const std::size_t K = t.value(input).extent(0);
  VarId h = t.reshape(input, {K, 1, a.side, a.side});
  const PadPair p1 = conv_padding(a.side, a.e1, a.k1, a.s1);
  h = t.conv2d(h, t.param_id("phi/enc/conv1/w"), t.param_id("phi/enc/conv1/b"),
               {1, a.c1, a.k1, a.k1, a.s1, p1.before, p1.before, p1.after, p1.after});
  h = t.layer_norm(h, t.param_id("phi/enc/ln1/g"), t.param_id("phi/enc/ln1/b"));
  h = t.elu(h);
  const PadPair p2 = conv_padding(a.e1, a.e2, a.k2, a.s2);
  h = t.conv2d(h, t.param_id("phi/enc/conv2/w"), t.param_id("phi/enc/conv2/b"),
               {a.c1, a.c2, a.k2, a.k2, a.s2, p2.before, p2.before, p2.after, p2.after});
  h = t.layer_norm(h, t.param_id("phi/enc/ln2/g"), t.param_id("phi/enc/ln2/b"));
  h = t.elu(h);
  h = t.reshape(h, {K, a.c2 * a.e2 * a.e2});
  h = t.linear(h, t.param_id("phi/enc/fc/w"), t.param_id("phi/enc/fc/b"));
  h = t.layer_norm(h, t.param_id("phi/enc/ln3/g"), t.param_id("phi/enc/ln3/b"));
  return t.elu(h);
}

VarId PerceptionNet::decode(Tape& t, VarId theta) const {
  const ArchConfig& a = arch_;
  const std::size_t K = t.value(theta).extent(0);
  VarId h = t.linear(theta, t.param_id("phi/dec/fc1/w"), t.param_id("phi/dec/fc1/b"));
  h = t.layer_norm(h, t.param_id("phi/dec/ln1/g"), t.param_id("phi/dec/ln1/b"));
  h = t.relu(h);
  h = t.linear(h, t.param_id("phi/dec/fc2/w"), t.param_id("phi/dec/fc2/b"));
  h = t.layer_norm(h, t.param_id("phi/dec/ln2/g"), t.param_id("phi/dec/ln2/b"));
  h = t.relu(h);
  h = t.reshape(h, {K, a.c2, a.e2, a.e2});
  h = t.upsample_nearest(h, a.s2);
  const PadPair pd1 = conv_padding(a.e2 * a.s2, a.e1, a.kd1, 1);
  h = t.conv2d(h, t.param_id("phi/dec/conv1/w"), t.param_id("phi/dec/conv1/b"),
               {a.c2, a.c1, a.kd1, a.kd1, 1, pd1.before, pd1.before, pd1.after, pd1.after});
  h = t.layer_norm(h, t.param_id("phi/dec/ln3/g"), t.param_id("phi/dec/ln3/b"));
  h = t.relu(h);
  h = t.upsample_nearest(h, a.s1);
  const PadPair pd2 = conv_padding(a.e1 * a.s1, a.side, a.kd2, 1);
  h = t.conv2d(h, t.param_id("phi/dec/conv2/w"), t.param_id("phi/dec/conv2/b"),
               {a.c1, 1, a.kd2, a.kd2, 1, pd2.before, pd2.before, pd2.after, pd2.after});
  h = t.sigmoid(h);
  return t.reshape(h, {K, a.side * a.side});
}

PerceptionNet::StepOut PerceptionNet::step(Tape& t, VarId input, VarId theta) const {
  const ArchConfig& a = arch_;
  VarId enc = encode(t, input);
  // h' = sigmoid(LN(Wx*enc + Wh*h + b))
  VarId zero_bias = t.constant(Tensor({a.m}));
  VarId pre = t.add(t.linear(enc, t.param_id("phi/rnn/wx"), t.param_id("phi/rnn/b")),
                    t.linear(theta, t.param_id("phi/rnn/wh"), zero_bias));
  pre = t.layer_norm(pre, t.param_id("phi/rnn/ln/g"), t.param_id("phi/rnn/ln/b"));
  VarId theta_next = t.sigmoid(pre);
  return StepOut{theta_next, decode(t, theta_next)};
}

Tensor PerceptionNet::initial_theta(const ParamStore& store, std::size_t num_components,
                                    std::mt19937_64& rng) const {
  const Tensor& theta0 = store.at("phi/theta0");
  Tensor out({num_components, arch_.m});
  std::normal_distribution<double> noise(0.0, 1e-3);
  for (std::size_t k = 0; k < num_components; ++k) {
    for (std::size_t j = 0; j < arch_.m; ++j) out[k * arch_.m + j] = theta0[j] + noise(rng);
  }
  return out;
}

Tensor uniform_eta(std::size_t num_pixels, std::size_t num_components) {
  return Tensor::full({num_pixels, num_components}, 1.0 / static_cast<double>(num_components));
}

RolloutResult rollout(Tape& t, const PerceptionNet& net,
                      const std::vector<const ObservationFrame*>& frames, const Tensor& theta0,
                      const Tensor& eta0, const EMConfig& config) {
  config.validate();
  if (frames.size() != config.rollout_len + 1) {
    throw std::invalid_argument("rollout: expected t_ro+1 frames, got " +
                                std::to_string(frames.size()));
  }
  const std::size_t K = config.num_components;
  const std::size_t D = net.pixel_count();
  if (theta0.shape() != std::vector<std::size_t>{K, net.arch().m}) {
    throw ShapeError("rollout: theta0 shape mismatch");
  }
  RolloutResult result;
  result.steps.reserve(config.rollout_len + 1);
  result.steps.push_back(RolloutStep{eta0, 0.0});

  VarId theta = t.constant(theta0);  // carried state: truncation boundary for BPTT
  VarId psi = net.decode(t, theta);
  Tensor eta = eta0;
  VarId loss = t.constant(Tensor::scalar(0.0));
  for (std::size_t step = 1; step <= config.rollout_len; ++step) {
    const ObservationFrame& frame = *frames[step];
    if (frame.size() != D) throw ShapeError("rollout: frame size mismatch");
    // input_k = eta_k ⊙ (psi_k − x), with eta held constant.
    Tensor eta_kd({K, D});
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < D; ++i) eta_kd[k * D + i] = eta[i * K + k];
    }
    VarId x_bcast = t.constant([&] {
      Tensor xs({K, D});
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t i = 0; i < D; ++i) xs[k * D + i] = frame.pixels[i];
      }
      return xs;
    }());
    VarId input = t.mul(t.constant(eta_kd), t.sub(psi, x_bcast));
    auto out = net.step(t, input, theta);
    theta = out.theta;
    psi = out.psi;
    if (step == 1) result.theta_first = t.value(theta);
    Tensor x_tensor({D}, frame.pixels);
    VarId nll = t.weighted_gaussian_nll(psi, x_tensor, eta, config.sigma2);
    loss = t.add(loss, nll);
    const double lambda = -t.value(nll)[0];
    eta = e_step(frame.pixels, t.value(psi), config.sigma2);
    result.steps.push_back(RolloutStep{eta, lambda});
  }
  result.loss = loss;
  result.theta_final = theta;
  result.psi_final = psi;
  return result;
}

void dump_segmentation_panels(const std::string& dir, std::size_t step_index,
                              const ObservationFrame& frame, const Tensor& psi, const Tensor& eta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::size_t K = psi.extent(0), D = psi.extent(1);
  const auto side = frame.side;
  auto gray = [&](const std::string& name, const std::vector<double>& px) {
    ObservationFrame f;
    f.side = side;
    f.pixels = px;
    write_pgm(dir + "/" + name, f);
    return name;
  };
  std::vector<std::string> files;
  files.push_back(gray("step" + std::to_string(step_index) + "_obs.pgm", frame.pixels));
  std::vector<double> total(D, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < D; ++i) total[i] = std::min(1.0, total[i] + psi[k * D + i]);
  }
  files.push_back(gray("step" + std::to_string(step_index) + "_psi_sum.pgm", total));
  std::vector<double> argmax(D, 0.0);
  for (std::size_t i = 0; i < D; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (eta[i * K + k] > eta[i * K + best]) best = k;
    }
    argmax[i] = static_cast<double>(best) / static_cast<double>(K - 1);
  }
  files.push_back(gray("step" + std::to_string(step_index) + "_eta_argmax.pgm", argmax));
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> comp(psi.data() + k * D, psi.data() + (k + 1) * D);
    files.push_back(gray("step" + std::to_string(step_index) + "_psi" + std::to_string(k) + ".pgm",
                         comp));
  }
  std::ofstream manifest(dir + "/manifest.csv", std::ios::app);
  manifest << step_index;
  for (const auto& f : files) manifest << "," << f;
  manifest << "\n";
}

}  // namespace opc
