#include "opc/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "opc/checkpoint.hpp"

namespace opc {
namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Tensor string_tensor(const std::string& s) {
  Tensor t({s.empty() ? std::size_t{1} : s.size()});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  if (s.empty()) t[0] = -1.0;  // marker for the empty string
  return t;
}

std::string tensor_string(const Tensor& t) {
  if (t.size() == 1 && t[0] == -1.0) return {};
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) s[i] = static_cast<char>(static_cast<unsigned char>(t[i]));
  return s;
}

std::string rng_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_restore(std::mt19937_64& rng, const std::string& blob) {
  std::istringstream is(blob);
  is >> rng;
  if (is.fail()) throw std::runtime_error("checkpoint: bad rng state");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void merge_grads(GradMap& into, const GradMap& from, double scale, const std::string& prefix) {
  for (const auto& [name, g] : from) {
    if (!prefix.empty() && !starts_with(name, prefix)) continue;
    auto it = into.find(name);
    if (it == into.end()) it = into.emplace(name, Tensor::zeros_like(g)).first;
    it->second.add_scaled(g, scale);
  }
}

std::string StepMetrics::csv_header() {
  return "observations,episode,step,reward,period_reward,neg_lambda,td_loss,entropy,wall_ms";
}

std::string StepMetrics::csv_row() const {
  std::ostringstream os;
  os << observations << ',' << episode << ',' << step << ',' << fmt(reward) << ','
     << fmt(period_reward) << ',' << fmt(neg_lambda) << ',' << fmt(td_loss) << ','
     << fmt(entropy) << ',' << fmt(wall_ms);
  return os.str();
}

Trainer::Trainer(FullConfig cfg)
    : cfg_(std::move(cfg)),
      net_(cfg_.arch),
      head_(cfg_.em.num_components * cfg_.arch.m, cfg_.train.policy_hidden),
      adam_(cfg_.train.adam_lr),
      rmsprop_(cfg_.train.rmsprop_lr, cfg_.train.rmsprop_decay) {
  cfg_.env.validate();
  cfg_.em.validate();
  cfg_.arch.validate();
  cfg_.train.validate(cfg_.em, cfg_.env);
  if (cfg_.arch.side != cfg_.env.image_side) {
    throw std::invalid_argument("trainer: arch side does not match env image side");
  }
  accum_span_ = std::max<std::size_t>(1, cfg_.train.batch_size / cfg_.train.n_envs);
}

std::uint64_t Trainer::episode_seed(std::size_t env_index, std::size_t episode_index) const {
  return splitmix64(cfg_.train.seed ^ splitmix64(env_index * 104729ull + episode_index + 1));
}

Tensor Trainer::decode_value(const Tensor& theta) const {
  Tape tape;
  store_.register_on(tape, "phi/");
  return tape.value(net_.decode(tape, tape.constant(theta)));
}

Tensor Trainer::forward_only_em_step(const Tensor& theta, const Tensor& eta, const Tensor& psi,
                                     const ObservationFrame& frame, Tensor* psi_out) const {
  Tape tape;
  store_.register_on(tape, "phi/");
  VarId input = tape.constant(em_input(eta, psi, frame.pixels));
  auto out = net_.step(tape, input, tape.constant(theta));
  if (psi_out) *psi_out = tape.value(out.psi);
  return tape.value(out.theta);
}

std::uint64_t Trainer::warmup_env(EnvSlot& slot, std::uint64_t env_seed, double* reward_sum) {
  const std::size_t t_ro = cfg_.em.rollout_len;
  const std::size_t K = cfg_.em.num_components;
  slot.windows.actions.clear();
  slot.windows.frames.clear();
  slot.pending.clear();
  slot.episode_step = 0;

  ObservationFrame x0 = slot.env.reset(env_seed);
  std::uint64_t obs = 1;
  slot.windows.frames.push_back(x0);

  Tensor theta = net_.initial_theta(store_, K, slot.policy_rng);
  Tensor psi = decode_value(theta);
  Tensor eta = uniform_eta(net_.pixel_count(), K);
  theta = forward_only_em_step(theta, eta, psi, x0, &psi);
  eta = e_step(x0.pixels, psi, cfg_.em.sigma2);
  slot.windows.theta_carry = theta;
  slot.windows.eta_open = eta;

  for (std::size_t t = 1; t <= t_ro; ++t) {
    PolicyOutput po = head_.evaluate(store_, theta);
    int a = sample_action(po.logits, slot.policy_rng);
    StepResult sr = slot.env.step(static_cast<Action>(a));
    ++obs;
    if (reward_sum) *reward_sum += sr.reward;
    slot.windows.actions.push_back(a);
    slot.windows.frames.push_back(sr.frame);
    theta = forward_only_em_step(theta, eta, psi, sr.frame, &psi);
    eta = e_step(sr.frame.pixels, psi, cfg_.em.sigma2);
  }
  return obs;
}

void Trainer::init_fresh() {
  store_ = ParamStore{};
  std::mt19937_64 rng(cfg_.train.seed);
  net_.init_params(store_, rng);
  head_.init_params(store_, rng);
  slots_.clear();
  slots_.reserve(cfg_.train.n_envs);
  phi_accum_.clear();
  accum_count_ = 0;
  observations_ = 0;
  outer_step_ = 0;
  cumulative_reward_ = 0.0;
  window_reward_ = 0.0;
  window_index_ = 0;
  for (std::size_t i = 0; i < cfg_.train.n_envs; ++i) {
    slots_.emplace_back(cfg_.env, episode_seed(i, 0));
    slots_.back().policy_rng.seed(splitmix64(cfg_.train.seed ^ (0xabcdull + i)));
  }
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    double warm_reward = 0.0;
    observations_ += warmup_env(slots_[i], episode_seed(i, 0), &warm_reward);
    cumulative_reward_ += warm_reward;
    window_reward_ += warm_reward;
  }
  initialized_ = true;
}

void Trainer::flush_pending(EnvSlot& slot, double bootstrap_value, EnvStepResult& out) {
  if (slot.pending.empty()) return;
  std::vector<double> rewards, values;
  for (const auto& p : slot.pending) {
    rewards.push_back(p.reward);
    values.push_back(p.value);
  }
  values.push_back(bootstrap_value);
  const std::size_t n = std::min(cfg_.train.nstep, slot.pending.size());
  std::vector<double> ys = nstep_returns(rewards, values, cfg_.train.gamma, n);
  for (std::size_t j = 0; j < slot.pending.size(); ++j) {
    const PendingControl& p = slot.pending[j];
    const double adv = ys[j] - p.value;
    merge_grads(out.control, p.actor, adv);
    merge_grads(out.control, p.entropy);
    // d(y - v)^2 / dv = 2 (v - y), distributed over dV/d{zetav, phi}.
    const double cscale = 2.0 * (p.value - ys[j]);
    merge_grads(out.control, p.critic, cscale, "zetav/");
    merge_grads(out.phi, p.critic, cscale, "phi/");
    out.td_loss += (ys[j] - p.value) * (ys[j] - p.value);
  }
  slot.pending.clear();
}

Trainer::EnvStepResult Trainer::step_env(EnvSlot& slot) {
  const std::size_t t_ro = cfg_.em.rollout_len;
  EnvStepResult out;

  Tape tape;
  store_.register_on(tape);
  std::vector<const ObservationFrame*> frames;
  frames.reserve(t_ro + 1);
  for (const auto& f : slot.windows.frames) frames.push_back(&f);
  RolloutResult rr = rollout(tape, net_, frames, slot.windows.theta_carry,
                             slot.windows.eta_open, cfg_.em);
  const double loss_val = tape.value(rr.loss)[0];
  if (!std::isfinite(loss_val)) throw std::runtime_error("train step: non-finite perception loss");
  out.neg_lambda = loss_val / static_cast<double>(t_ro);

  auto po = head_.forward(tape, rr.theta_final);
  const std::vector<double> logits = tape.value(po.logits).values();
  const double v_cur = tape.value(po.value)[0];
  for (double l : logits) {
    if (!std::isfinite(l)) throw std::runtime_error("train step: non-finite policy logits");
  }
  if (!std::isfinite(v_cur)) throw std::runtime_error("train step: non-finite value estimate");
  out.entropy = entropy_of_logits(logits);

  const int a = sample_action(logits, slot.policy_rng);
  StepResult sr = slot.env.step(static_cast<Action>(a));
  out.obs = 1;
  out.reward += sr.reward;

  // Slide the window and advance the carried state by one EM iteration.
  slot.windows.actions.push_back(a);
  slot.windows.actions.pop_front();
  slot.windows.frames.push_back(sr.frame);
  slot.windows.frames.pop_front();
  slot.windows.theta_carry = rr.theta_first;
  slot.windows.eta_open = rr.steps[1].eta;

  const Tensor theta_fin = tape.value(rr.theta_final);
  const Tensor psi_fin = tape.value(rr.psi_final);
  const Tensor& eta_fin = rr.steps[t_ro].eta;

  if (cfg_.train.nstep == 1) {
    // Literal one-step form: a further EM iteration on the fresh frame gives
    // the bootstrap state for the TD target.
    Tensor theta_next = forward_only_em_step(theta_fin, eta_fin, psi_fin, sr.frame, nullptr);
    const double v_next = head_.evaluate(store_, theta_next).value;
    const double y = td_target(sr.reward, cfg_.train.gamma, v_next);
    // The perception loss and the critic loss share one backward sweep; both
    // phi contributions land in the same accumulator anyway.
    VarId closs = critic_loss(tape, po.value, y);
    GradMap joint = tape.backward(tape.add(rr.loss, closs));
    merge_grads(out.phi, joint, 1.0, "phi/");
    merge_grads(out.control, joint, 1.0, "zetav/");
    // Actor gradient on a detached copy of the final state: it only ever
    // updates zeta, and detaching keeps its backward off the rollout graph.
    auto po_det = head_.forward(tape, tape.constant(theta_fin));
    VarId aloss = actor_loss(tape, po_det.logits, a, y - v_cur, cfg_.train.entropy_beta);
    merge_grads(out.control, tape.backward(aloss), 1.0, "zeta/");
    out.td_loss = (y - v_cur) * (y - v_cur);
  } else {
    merge_grads(out.phi, tape.backward(rr.loss), 1.0, "phi/");
    if (slot.pending.size() + 1 >= cfg_.train.nstep) {
      // v_cur bootstraps the oldest pending step's full-horizon target before
      // the current step joins the buffer.
      flush_pending(slot, v_cur, out);
    }
    PendingControl p;
    p.reward = sr.reward;
    p.value = v_cur;
    auto po_det = head_.forward(tape, tape.constant(theta_fin));
    VarId unit = actor_loss(tape, po_det.logits, a, 1.0, 0.0);
    merge_grads(p.actor, tape.backward(unit), 1.0, "zeta/");
    if (cfg_.train.entropy_beta != 0.0) {
      VarId ent = actor_loss(tape, po_det.logits, a, 0.0, cfg_.train.entropy_beta);
      merge_grads(p.entropy, tape.backward(ent), 1.0, "zeta/");
    }
    GradMap vg = tape.backward(po.value);
    merge_grads(p.critic, vg, 1.0, "zetav/");
    merge_grads(p.critic, vg, 1.0, "phi/");
    slot.pending.push_back(std::move(p));
  }

  ++slot.episode_step;
  if (slot.env.episode_done()) {
    if (!slot.pending.empty()) {
      Tensor theta_next = forward_only_em_step(theta_fin, eta_fin, psi_fin, sr.frame, nullptr);
      flush_pending(slot, head_.evaluate(store_, theta_next).value, out);
    }
    ++slot.episode_index;
    const std::size_t env_index = static_cast<std::size_t>(&slot - slots_.data());
    out.obs += warmup_env(slot, episode_seed(env_index, slot.episode_index), &out.reward);
  }
  return out;
}

StepMetrics Trainer::train_step() {
  if (!initialized_) throw std::logic_error("train_step before init");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<EnvStepResult> results(slots_.size());

  if (slots_.size() > 1 && std::thread::hardware_concurrency() > 1) {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(slots_.size());
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      threads.emplace_back([this, i, &results, &errors] {
        try {
          results[i] = step_env(slots_[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::size_t i = 0; i < slots_.size(); ++i) results[i] = step_env(slots_[i]);
  }

  GradMap control;
  StepMetrics m;
  for (const auto& r : results) {
    merge_grads(phi_accum_, r.phi);
    merge_grads(control, r.control);
    m.reward += r.reward;
    m.neg_lambda += r.neg_lambda;
    m.td_loss += r.td_loss;
    m.entropy += r.entropy;
    observations_ += r.obs;
  }
  m.neg_lambda /= static_cast<double>(results.size());
  m.entropy /= static_cast<double>(results.size());
  for (const auto& [name, g] : phi_accum_) {
    if (!g.all_finite()) throw std::runtime_error("train step: non-finite gradient for " + name);
  }
  for (const auto& [name, g] : control) {
    if (!g.all_finite()) throw std::runtime_error("train step: non-finite gradient for " + name);
  }

  ++accum_count_;
  if (accum_count_ >= accum_span_) {
    adam_.step(store_, phi_accum_, "phi/");
    phi_accum_.clear();
    accum_count_ = 0;
  }
  if (!control.empty()) rmsprop_.step(store_, control);

  ++outer_step_;
  cumulative_reward_ += m.reward;
  if (observations_ / kPeriodWindow > window_index_) {
    window_index_ = observations_ / kPeriodWindow;
    window_reward_ = 0.0;
  }
  window_reward_ += m.reward;

  m.observations = observations_;
  m.episode = slots_[0].episode_index;
  m.step = slots_[0].episode_step;
  m.period_reward = window_reward_;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

GradMap Trainer::peek_phi_gradient() {
  GradMap total;
  for (auto& slot : slots_) {
    Tape tape;
    store_.register_on(tape, "phi/");
    std::vector<const ObservationFrame*> frames;
    for (const auto& f : slot.windows.frames) frames.push_back(&f);
    RolloutResult rr = rollout(tape, net_, frames, slot.windows.theta_carry,
                               slot.windows.eta_open, cfg_.em);
    merge_grads(total, tape.backward(rr.loss), 1.0, "phi/");
  }
  return total;
}

void Trainer::save_checkpoint_file(const std::string& path) const {
  if (!initialized_) throw std::logic_error("save before init");
  std::map<std::string, Tensor> t = store_.all();
  for (auto& [name, tens] : adam_.state_tensors("opt/adam")) t.emplace(name, tens);
  for (auto& [name, tens] : rmsprop_.state_tensors("opt/rmsprop")) t.emplace(name, tens);
  for (const auto& [name, g] : phi_accum_) t.emplace("accum/" + name, g);

  Tensor counters({8});
  counters[0] = static_cast<double>(observations_);
  counters[1] = static_cast<double>(outer_step_);
  counters[2] = cumulative_reward_;
  counters[3] = window_reward_;
  counters[4] = static_cast<double>(window_index_);
  counters[5] = static_cast<double>(accum_count_);
  counters[6] = static_cast<double>(slots_.size());
  counters[7] = static_cast<double>(cfg_.train.nstep);
  t.emplace("state/counters", counters);

  const std::size_t D = net_.pixel_count();
  const std::size_t t_ro = cfg_.em.rollout_len;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    const EnvSlot& s = slots_[i];
    const std::string p = "env/" + std::to_string(i) + "/";
    t.emplace(p + "blob", string_tensor(s.env.serialize_state()));
    t.emplace(p + "rng", string_tensor(rng_string(s.policy_rng)));
    Tensor frames({t_ro + 1, D}), labels({t_ro + 1, D});
    for (std::size_t j = 0; j < s.windows.frames.size(); ++j) {
      for (std::size_t d = 0; d < D; ++d) {
        frames[j * D + d] = s.windows.frames[j].pixels[d];
        labels[j * D + d] = s.windows.frames[j].labels[d];
      }
    }
    t.emplace(p + "frames", frames);
    t.emplace(p + "labels", labels);
    Tensor actions({t_ro});
    for (std::size_t j = 0; j < s.windows.actions.size(); ++j) actions[j] = s.windows.actions[j];
    t.emplace(p + "actions", actions);
    t.emplace(p + "eta_open", s.windows.eta_open);
    t.emplace(p + "theta_carry", s.windows.theta_carry);
    Tensor sc({3});
    sc[0] = static_cast<double>(s.episode_index);
    sc[1] = static_cast<double>(s.episode_step);
    sc[2] = static_cast<double>(s.pending.size());
    t.emplace(p + "counters", sc);
    for (std::size_t j = 0; j < s.pending.size(); ++j) {
      const std::string q = p + "pending/" + std::to_string(j) + "/";
      Tensor rv({2});
      rv[0] = s.pending[j].reward;
      rv[1] = s.pending[j].value;
      t.emplace(q + "rv", rv);
      for (const auto& [name, g] : s.pending[j].actor) t.emplace(q + "actor/" + name, g);
      for (const auto& [name, g] : s.pending[j].critic) t.emplace(q + "critic/" + name, g);
      for (const auto& [name, g] : s.pending[j].entropy) t.emplace(q + "entropy/" + name, g);
    }
  }
  save_checkpoint(path, t, snapshot_config(cfg_).serialized());
}

void Trainer::load_checkpoint_file(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  auto& t = ck.tensors;
  auto take = [&](const std::string& name) -> Tensor {
    auto it = t.find(name);
    if (it == t.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    return it->second;
  };

  store_ = ParamStore{};
  for (const auto& [name, tens] : t) {
    if (starts_with(name, "phi/") || starts_with(name, "zeta/") || starts_with(name, "zetav/")) {
      store_.add(name, tens);
    }
  }
  adam_ = AdamOptimizer(cfg_.train.adam_lr);
  adam_.load_state("opt/adam", t);
  rmsprop_ = RMSPropOptimizer(cfg_.train.rmsprop_lr, cfg_.train.rmsprop_decay);
  rmsprop_.load_state("opt/rmsprop", t);

  phi_accum_.clear();
  for (const auto& [name, tens] : t) {
    if (starts_with(name, "accum/")) phi_accum_.emplace(name.substr(6), tens);
  }

  Tensor counters = take("state/counters");
  observations_ = static_cast<std::uint64_t>(counters[0]);
  outer_step_ = static_cast<std::uint64_t>(counters[1]);
  cumulative_reward_ = counters[2];
  window_reward_ = counters[3];
  window_index_ = static_cast<std::uint64_t>(counters[4]);
  accum_count_ = static_cast<std::size_t>(counters[5]);
  const std::size_t n_envs = static_cast<std::size_t>(counters[6]);
  if (n_envs != cfg_.train.n_envs) throw std::runtime_error("checkpoint: environment count mismatch");

  const std::size_t D = net_.pixel_count();
  const std::size_t t_ro = cfg_.em.rollout_len;
  const std::size_t side = cfg_.env.image_side;
  slots_.clear();
  for (std::size_t i = 0; i < n_envs; ++i) {
    const std::string p = "env/" + std::to_string(i) + "/";
    slots_.emplace_back(cfg_.env, 0);
    EnvSlot& s = slots_.back();
    s.env.restore_state(tensor_string(take(p + "blob")));
    rng_restore(s.policy_rng, tensor_string(take(p + "rng")));
    Tensor frames = take(p + "frames"), labels = take(p + "labels");
    for (std::size_t j = 0; j <= t_ro; ++j) {
      ObservationFrame f;
      f.side = side;
      f.pixels.resize(D);
      f.labels.resize(D);
      for (std::size_t d = 0; d < D; ++d) {
        f.pixels[d] = frames[j * D + d];
        f.labels[d] = static_cast<int>(labels[j * D + d]);
      }
      s.windows.frames.push_back(std::move(f));
    }
    Tensor actions = take(p + "actions");
    for (std::size_t j = 0; j < t_ro; ++j) s.windows.actions.push_back(static_cast<int>(actions[j]));
    s.windows.eta_open = take(p + "eta_open");
    s.windows.theta_carry = take(p + "theta_carry");
    Tensor sc = take(p + "counters");
    s.episode_index = static_cast<std::size_t>(sc[0]);
    s.episode_step = static_cast<std::size_t>(sc[1]);
    const std::size_t n_pending = static_cast<std::size_t>(sc[2]);
    for (std::size_t j = 0; j < n_pending; ++j) {
      const std::string q = p + "pending/" + std::to_string(j) + "/";
      PendingControl pc;
      Tensor rv = take(q + "rv");
      pc.reward = rv[0];
      pc.value = rv[1];
      for (const auto& [name, tens] : t) {
        if (starts_with(name, q + "actor/")) pc.actor.emplace(name.substr(q.size() + 6), tens);
        else if (starts_with(name, q + "critic/")) pc.critic.emplace(name.substr(q.size() + 7), tens);
        else if (starts_with(name, q + "entropy/")) pc.entropy.emplace(name.substr(q.size() + 8), tens);
      }
      s.pending.push_back(std::move(pc));
    }
  }
  initialized_ = true;
}

std::uint64_t Trainer::train(const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string csv_path = out_dir + "/metrics.csv";
  const bool fresh_csv = !fs::exists(csv_path);
  std::ofstream csv(csv_path, std::ios::app);
  if (!csv) throw std::runtime_error("cannot open " + csv_path);
  if (fresh_csv) csv << StepMetrics::csv_header() << '\n';

  if (!initialized_) init_fresh();
  std::uint64_t steps = 0;
  while (observations_ < cfg_.train.obs_budget) {
    StepMetrics m = train_step();
    csv << m.csv_row() << '\n';
    csv.flush();
    ++steps;
    if (cfg_.train.checkpoint_interval && outer_step_ % cfg_.train.checkpoint_interval == 0) {
      save_checkpoint_file(out_dir + "/ckpt_" + std::to_string(outer_step_) + ".opc");
    }
  }
  save_checkpoint_file(out_dir + "/ckpt_final.opc");
  return steps;
}

}  // namespace opc
