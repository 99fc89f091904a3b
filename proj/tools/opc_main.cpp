#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "opc/checks.hpp"
#include "opc/config.hpp"
#include "opc/metrics.hpp"
#include "opc/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "opc 1.0";

// Resolves a config path: as given, or relative to $OPC_CONFIG_DIR.
std::string find_config(const std::string& path) {
  if (fs::exists(path)) return path;
  if (const char* dir = std::getenv("OPC_CONFIG_DIR")) {
    fs::path candidate = fs::path(dir) / path;
    if (fs::exists(candidate)) return candidate.string();
  }
  throw std::invalid_argument("config file not found: " + path);
}

opc::FullConfig load_config(const std::string& config_path, const std::vector<std::string>& sets) {
  opc::KeyValueConfig kv;
  if (!config_path.empty()) kv = opc::KeyValueConfig::from_file(find_config(config_path));
  for (const auto& s : sets) kv.apply_override(s);
  return opc::resolve_config(kv);
}

void write_manifest(const std::string& out_dir, const opc::FullConfig& cfg,
                    const std::vector<std::string>& artifacts) {
  fs::create_directories(out_dir);
  std::ofstream m(out_dir + "/manifest.txt");
  if (!m) throw std::runtime_error("cannot write manifest in " + out_dir);
  m << "version=" << kVersion << '\n';
  m << "seed=" << cfg.train.seed << '\n';
  for (const auto& a : artifacts) m << "artifact=" << a << '\n';
  m << "[config]\n" << opc::snapshot_config(cfg).serialized();
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out_dir, const std::string& resume) {
  opc::FullConfig cfg = load_config(config_path, sets);
  write_manifest(out_dir, cfg, {"metrics.csv", "ckpt_final.opc"});
  opc::Trainer trainer(cfg);
  if (!resume.empty()) {
    trainer.load_checkpoint_file(resume);
  } else {
    trainer.init_fresh();
  }
  const std::uint64_t steps = trainer.train(out_dir);
  std::cout << "trained " << steps << " steps, " << trainer.observations() << " observations -> "
            << out_dir << '\n';
  return 0;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& sets,
             const std::string& ckpt, const std::string& baseline, const std::string& out_dir,
             std::uint64_t seed, std::size_t frames, std::size_t panels) {
  opc::FullConfig cfg = load_config(config_path, sets);
  if (seed) cfg.train.seed = seed;
  fs::create_directories(out_dir);

  if (!baseline.empty()) {
    if (baseline == "random") {
      opc::run_random_baseline(cfg, cfg.train.seed, out_dir);
    } else if (baseline == "a2c") {
      opc::run_plain_actor_critic(cfg, cfg.train.seed, out_dir);
    } else {
      throw std::invalid_argument("unknown baseline: " + baseline);
    }
    std::cout << "baseline '" << baseline << "' logged to " << out_dir << "/metrics.csv\n";
    return 0;
  }

  if (ckpt.empty()) throw std::invalid_argument("eval needs --ckpt or --baseline");
  opc::Trainer trainer(cfg);
  trainer.load_checkpoint_file(ckpt);
  opc::GroupingReport report =
      opc::evaluate_grouping(trainer.net(), trainer.head(), trainer.params(), cfg, cfg.train.seed,
                             frames, panels, out_dir + "/panels");
  std::ofstream csv(out_dir + "/eval.csv");
  csv << "metric,index,value\n";
  for (std::size_t i = 0; i < report.per_frame.size(); ++i) {
    csv << "frame_ami," << i << ',' << report.per_frame[i] << '\n';
  }
  csv << "mean_ami,," << report.mean_ami << '\n';
  csv << "skipped_frames,," << report.skipped << '\n';
  std::cout << "mean foreground AMI over " << report.per_frame.size() << " frames: "
            << report.mean_ami << " (" << report.skipped << " skipped) -> " << out_dir << '\n';
  return 0;
}

int cmd_check(const std::string& scope) {
  std::vector<opc::CheckResult> results = opc::run_checks(scope);
  bool all_pass = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 2;
}

int cmd_render(const std::string& config_path, const std::vector<std::string>& sets,
               std::uint64_t seed, std::size_t frames, const std::string& out_dir) {
  opc::FullConfig cfg = load_config(config_path, sets);
  fs::create_directories(out_dir);
  opc::WaterworldEnv env(cfg.env, seed);
  opc::ObservationFrame frame = env.reset(seed);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, opc::kNumActions - 1);
  for (std::size_t i = 0; i < frames; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "frame_%05zu.pgm", i);
    opc::write_pgm(out_dir + "/" + name, frame);
    frame = env.step(static_cast<opc::Action>(pick(rng))).frame;
  }
  std::cout << "wrote " << frames << " frames to " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object-based perception and control on pixel Waterworld"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/run", resume, ckpt, baseline, scope = "all";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  std::size_t frames = 100, panels = 8;

  CLI::App* train = app.add_subcommand("train", "Run the joint perception/control training loop");
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--set", sets, "override, key=value")->take_all();
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--resume", resume, "checkpoint to resume from");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint or run a baseline");
  eval->add_option("--config", config_path, "key=value config file");
  eval->add_option("--set", sets, "override, key=value")->take_all();
  eval->add_option("--ckpt", ckpt, "checkpoint to evaluate");
  eval->add_option("--baseline", baseline, "random|a2c");
  eval->add_option("--out", out_dir, "output directory");
  eval->add_option("--seed", seed, "evaluation seed (0 keeps the config seed)");
  eval->add_option("--frames", frames, "frames to score");
  eval->add_option("--panels", panels, "segmentation panels to dump");

  CLI::App* check = app.add_subcommand("check", "Run the oracle check suites");
  check->add_option("scope", scope, "grad|estep|emtoy|all");

  CLI::App* render = app.add_subcommand("render", "Dump frames from a seeded environment");
  render->add_option("--config", config_path, "key=value config file");
  render->add_option("--set", sets, "override, key=value")->take_all();
  render->add_option("--seed", seed, "environment seed");
  render->add_option("--frames", frames, "frames to write");
  render->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, sets, out_dir, resume);
    if (eval->parsed()) return cmd_eval(config_path, sets, ckpt, baseline, out_dir, seed, frames, panels);
    if (check->parsed()) return cmd_check(scope);
    if (render->parsed()) return cmd_render(config_path, sets, seed, frames, out_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
