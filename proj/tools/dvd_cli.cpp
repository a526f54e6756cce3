// dvd_cli: single entry point for data generation, training stages, planning,
// and the benchmark suite, driven by a declarative JSON config.
//
// Exit codes: 0 success, 2 config error, 3 I/O or format error, 4 missing
// prerequisite. Logs are line-oriented JSON on stderr; human-readable
// summaries go to stdout. Every output directory gets a provenance.json with
// {tool_version, config_digest, seed}.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dvd/bench.hpp"
#include "dvd/data.hpp"
#include "dvd/dynamics.hpp"
#include "dvd/planner.hpp"
#include "dvd/reward.hpp"
#include "dvd/world.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using dvd::Rng;
using nlohmann::json;

constexpr const char* kToolVersion = "0.1.0";

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitPrereq = 4;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Missing prerequisite artifact; the message names the stage to run first.
struct PrereqError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_event(const json& fields) {
  std::fprintf(stderr, "%s\n", fields.dump().c_str());
}

// ---------------------------------------------------------------------------
// RunConfig: one JSON document with per-stage sections. Every field is
// optional; unknown keys are rejected. The resolved (defaults-applied)
// document is what gets digested into provenance.
// ---------------------------------------------------------------------------
struct RunConfig {
  std::uint64_t seed = 0;
  // world
  int frame_size = 32;
  double noise = 0.02;
  // data
  std::vector<int> human_tasks{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  int human_demos_per_task = 200;
  std::vector<int> robot_tasks{0, 1, 2};
  int robot_demos_per_task = 120;
  // stages
  dvd::reward::PretrainConfig pretrain;
  dvd::reward::TrainConfig train;
  dvd::dynamics::DynConfig dyn;
  int dyn_tier = 0;
  dvd::planner::PlannerConfig plan;
  dvd::bench::ExperimentSpec exp;
  std::vector<std::size_t> ablation_budgets{120, 40, 20};

  json resolved;  // defaults-applied document
  std::string digest() const { return dvd::sha256_hex(resolved.dump()); }
};

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown config key '" + section + "." + key + "'");
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for config key '" + key + "': " + e.what());
  }
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
}

RunConfig parse_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  const json doc = load_config_file(path);
  check_keys(doc, {"seed", "world", "data", "encoder_pretrain", "dvd_train", "dynamics",
                   "planner", "experiment"},
             "(top level)");
  RunConfig c;
  c.seed = get_or<std::uint64_t>(doc, "seed", 0);
  if (seed_override) c.seed = *seed_override;

  const json world = doc.value("world", json::object());
  check_keys(world, {"frame_size", "noise"}, "world");
  c.frame_size = get_or(world, "frame_size", c.frame_size);
  c.noise = get_or(world, "noise", c.noise);
  if (c.frame_size < 8) throw ConfigError("world.frame_size must be >= 8");
  if (c.noise < 0.0) throw ConfigError("world.noise must be >= 0");

  const json data = doc.value("data", json::object());
  check_keys(data,
             {"human_tasks", "human_demos_per_task", "robot_tasks", "robot_demos_per_task"},
             "data");
  c.human_tasks = get_or(data, "human_tasks", c.human_tasks);
  c.human_demos_per_task = get_or(data, "human_demos_per_task", c.human_demos_per_task);
  c.robot_tasks = get_or(data, "robot_tasks", c.robot_tasks);
  c.robot_demos_per_task = get_or(data, "robot_demos_per_task", c.robot_demos_per_task);

  const json pre = doc.value("encoder_pretrain", json::object());
  check_keys(pre, {"epochs", "steps_per_epoch", "batch", "lr"}, "encoder_pretrain");
  c.pretrain.epochs = get_or(pre, "epochs", c.pretrain.epochs);
  c.pretrain.steps_per_epoch = get_or(pre, "steps_per_epoch", c.pretrain.steps_per_epoch);
  c.pretrain.batch = get_or(pre, "batch", c.pretrain.batch);
  c.pretrain.lr = get_or(pre, "lr", c.pretrain.lr);

  const json tr = doc.value("dvd_train", json::object());
  check_keys(tr, {"epochs", "steps_per_epoch", "batch", "lr", "early_stop_acc", "eval_pairs"},
             "dvd_train");
  c.train.epochs = get_or(tr, "epochs", c.train.epochs);
  c.train.steps_per_epoch = get_or(tr, "steps_per_epoch", c.train.steps_per_epoch);
  c.train.batch = get_or(tr, "batch", c.train.batch);
  c.train.lr = get_or(tr, "lr", c.train.lr);
  c.train.early_stop_acc = get_or(tr, "early_stop_acc", c.train.early_stop_acc);
  c.train.eval_pairs = get_or(tr, "eval_pairs", c.train.eval_pairs);

  const json dy = doc.value("dynamics", json::object());
  check_keys(dy,
             {"context_frames", "predict_frames", "latent_dim", "n_episodes", "episode_len",
              "epochs", "steps_per_epoch", "batch", "lr", "tier"},
             "dynamics");
  c.dyn.context_frames = get_or(dy, "context_frames", c.dyn.context_frames);
  c.dyn.predict_frames = get_or(dy, "predict_frames", c.dyn.predict_frames);
  c.dyn.latent_dim = get_or(dy, "latent_dim", c.dyn.latent_dim);
  c.dyn.n_episodes = get_or(dy, "n_episodes", c.dyn.n_episodes);
  c.dyn.episode_len = get_or(dy, "episode_len", c.dyn.episode_len);
  c.dyn.epochs = get_or(dy, "epochs", c.dyn.epochs);
  c.dyn.steps_per_epoch = get_or(dy, "steps_per_epoch", c.dyn.steps_per_epoch);
  c.dyn.batch = get_or(dy, "batch", c.dyn.batch);
  c.dyn.lr = get_or(dy, "lr", c.dyn.lr);
  c.dyn_tier = get_or(dy, "tier", c.dyn_tier);
  if (c.dyn_tier < 0 || c.dyn_tier > 3) throw ConfigError("dynamics.tier must be in [0, 3]");

  const json pl = doc.value("planner", json::object());
  check_keys(pl, {"candidates", "horizon", "rounds", "top_k", "cem_iters", "elite_count"},
             "planner");
  c.plan.G = get_or(pl, "candidates", c.plan.G);
  c.plan.H = get_or(pl, "horizon", c.plan.H);
  c.plan.rounds = get_or(pl, "rounds", c.plan.rounds);
  c.plan.top_k = get_or(pl, "top_k", c.plan.top_k);
  c.plan.cem_iters = get_or(pl, "cem_iters", c.plan.cem_iters);
  c.plan.elite_count = get_or(pl, "elite_count", c.plan.elite_count);
  try {
    c.plan.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("planner: ") + e.what());
  }

  const json ex = doc.value("experiment", json::object());
  check_keys(ex,
             {"methods", "eval_tiers", "target_tasks", "train_tasks", "human_task_pool",
              "trials", "seeds", "dynamics", "human_demos_per_task", "budgets"},
             "experiment");
  c.exp.eval_tiers = get_or(ex, "eval_tiers", c.exp.eval_tiers);
  c.exp.target_tasks = get_or(ex, "target_tasks", c.exp.target_tasks);
  c.exp.train_tasks = get_or(ex, "train_tasks", c.exp.train_tasks);
  c.exp.human_task_pool = get_or(ex, "human_task_pool", c.exp.human_task_pool);
  c.exp.trials = get_or(ex, "trials", c.exp.trials);
  c.exp.seeds = get_or(ex, "seeds", c.exp.seeds);
  c.exp.dynamics = get_or(ex, "dynamics", c.exp.dynamics);
  c.exp.human_demos_per_task = get_or(ex, "human_demos_per_task", c.exp.human_demos_per_task);
  c.ablation_budgets = get_or(ex, "budgets", c.ablation_budgets);
  if (ex.contains("methods")) {
    if (!ex.at("methods").is_array()) throw ConfigError("experiment.methods must be an array");
    for (const json& m : ex.at("methods")) {
      check_keys(m, {"kind", "human_task_count", "robot_demos_per_task", "demo_source"},
                 "experiment.methods[]");
      dvd::bench::MethodSpec ms;
      ms.kind = get_or<std::string>(m, "kind", ms.kind);
      ms.human_task_count = get_or(m, "human_task_count", ms.human_task_count);
      ms.robot_demos_per_task = get_or(m, "robot_demos_per_task", ms.robot_demos_per_task);
      ms.demo_source = get_or<std::string>(m, "demo_source", ms.demo_source);
      c.exp.methods.push_back(std::move(ms));
    }
  }
  c.exp.pretrain = c.pretrain;
  c.exp.train = c.train;
  c.exp.plan = c.plan;
  c.exp.dyn = c.dyn;
  c.exp.base_seed = c.seed;

  json methods = json::array();
  for (const auto& m : c.exp.methods)
    methods.push_back({{"kind", m.kind},
                       {"human_task_count", m.human_task_count},
                       {"robot_demos_per_task", m.robot_demos_per_task},
                       {"demo_source", m.demo_source}});
  c.resolved = json{
      {"seed", c.seed},
      {"world", {{"frame_size", c.frame_size}, {"noise", c.noise}}},
      {"data",
       {{"human_tasks", c.human_tasks},
        {"human_demos_per_task", c.human_demos_per_task},
        {"robot_tasks", c.robot_tasks},
        {"robot_demos_per_task", c.robot_demos_per_task}}},
      {"encoder_pretrain",
       {{"epochs", c.pretrain.epochs},
        {"steps_per_epoch", c.pretrain.steps_per_epoch},
        {"batch", c.pretrain.batch},
        {"lr", c.pretrain.lr}}},
      {"dvd_train", dvd::reward::train_config_json(c.train)},
      {"dynamics",
       {{"context_frames", c.dyn.context_frames},
        {"predict_frames", c.dyn.predict_frames},
        {"latent_dim", c.dyn.latent_dim},
        {"n_episodes", c.dyn.n_episodes},
        {"episode_len", c.dyn.episode_len},
        {"epochs", c.dyn.epochs},
        {"steps_per_epoch", c.dyn.steps_per_epoch},
        {"batch", c.dyn.batch},
        {"lr", c.dyn.lr},
        {"tier", c.dyn_tier}}},
      {"planner",
       {{"candidates", c.plan.G},
        {"horizon", c.plan.H},
        {"rounds", c.plan.rounds},
        {"top_k", c.plan.top_k},
        {"cem_iters", c.plan.cem_iters},
        {"elite_count", c.plan.elite_count}}},
      {"experiment",
       {{"methods", std::move(methods)},
        {"eval_tiers", c.exp.eval_tiers},
        {"target_tasks", c.exp.target_tasks},
        {"train_tasks", c.exp.train_tasks},
        {"human_task_pool", c.exp.human_task_pool},
        {"trials", c.exp.trials},
        {"seeds", c.exp.seeds},
        {"dynamics", c.exp.dynamics},
        {"human_demos_per_task", c.exp.human_demos_per_task},
        {"budgets", c.ablation_budgets}}}};
  return c;
}

void write_provenance(const std::string& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / "provenance.json");
  if (!out) throw dvd::data::FormatError("cannot write provenance in " + dir);
  out << json{{"tool_version", kToolVersion},
              {"config_digest", cfg.digest()},
              {"seed", cfg.seed}}
             .dump(2)
      << "\n";
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw dvd::data::FormatError("cannot write " + path);
  out << j.dump(2) << "\n";
}

// Loads a manifest from a stage directory, translating "not there" into a
// build-order error that names the stage which produces it.
dvd::data::Manifest require_manifest(const std::string& dir, const std::string& stage) {
  const fs::path path = fs::path(dir) / "manifest.json";
  if (!fs::exists(path))
    throw PrereqError("missing " + path.string() + "; run " + stage + " first");
  return dvd::data::load_manifest(path.string());
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------
int cmd_gen_data(const RunConfig& cfg, const std::string& out) {
  if (cfg.human_tasks.empty() && cfg.robot_tasks.empty())
    throw ConfigError("gen-data: no tasks configured");
  if ((!cfg.human_tasks.empty() && cfg.human_demos_per_task < 1) ||
      (!cfg.robot_tasks.empty() && cfg.robot_demos_per_task < 1))
    throw ConfigError("gen-data: demos_per_task must be >= 1");
  write_provenance(out, cfg);

  std::size_t human_clips = 0, robot_clips = 0;
  if (!cfg.human_tasks.empty()) {
    dvd::data::GenSpec spec;
    spec.task_ids = cfg.human_tasks;
    spec.demos_per_task = cfg.human_demos_per_task;
    spec.domain = dvd::world::Embodiment::human;
    spec.noise = cfg.noise;
    spec.seed = dvd::world::hash_u64(cfg.seed ^ 0x481du);
    const auto m = dvd::data::generate_dataset((fs::path(out) / "human").string(), spec);
    human_clips = m.records.size();
    log_event({{"event", "dataset"}, {"domain", "human"}, {"clips", human_clips}});
  }
  if (!cfg.robot_tasks.empty()) {
    dvd::data::GenSpec spec;
    spec.task_ids = cfg.robot_tasks;
    spec.demos_per_task = cfg.robot_demos_per_task;
    spec.save_actions = true;  // sidecars for the BC baseline
    spec.noise = cfg.noise;
    spec.seed = dvd::world::hash_u64(cfg.seed ^ 0x4817u);
    const auto m = dvd::data::generate_dataset((fs::path(out) / "robot").string(), spec);
    robot_clips = m.records.size();
    log_event({{"event", "dataset"}, {"domain", "robot"}, {"clips", robot_clips}});
  }
  std::printf("gen-data: %zu human clips (%zu tasks), %zu robot demos (%zu tasks) -> %s\n",
              human_clips, cfg.human_tasks.size(), robot_clips, cfg.robot_tasks.size(),
              out.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// pretrain-encoder
// ---------------------------------------------------------------------------
int cmd_pretrain_encoder(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out) {
  if (!fs::exists(data_dir))
    throw PrereqError("data directory " + data_dir + " does not exist; run gen-data first");
  dvd::data::Manifest human, robot;
  const bool has_human = fs::exists(fs::path(data_dir) / "human" / "manifest.json");
  const bool has_robot = fs::exists(fs::path(data_dir) / "robot" / "manifest.json");
  if (!has_human && !has_robot)
    throw PrereqError("no manifests under " + data_dir + "; run gen-data first");
  std::vector<const dvd::data::Manifest*> parts;
  if (has_human) {
    human = require_manifest((fs::path(data_dir) / "human").string(), "gen-data");
    parts.push_back(&human);
  }
  if (has_robot) {
    robot = require_manifest((fs::path(data_dir) / "robot").string(), "gen-data");
    parts.push_back(&robot);
  }
  const dvd::data::Manifest pool = dvd::bench::merge_manifests(parts);

  dvd::reward::PretrainConfig pcfg = cfg.pretrain;
  pcfg.seed = dvd::world::hash_u64(cfg.seed ^ 0x93e7u);
  dvd::data::ClipStore store;
  const auto res = dvd::reward::pretrain_encoder(pool, pcfg, &store);

  write_provenance(out, cfg);
  dvd::nn::save_checkpoint((fs::path(out) / "encoder.dvdw").string(), res.encoder);
  dvd::nn::save_checkpoint((fs::path(out) / "classifier.dvdw").string(), res.classifier_head);
  write_json_file((fs::path(out) / "curves.json").string(),
                  {{"config_digest", cfg.digest()},
                   {"seed", cfg.seed},
                   {"val_acc_curve", res.val_acc_curve},
                   {"class_tasks", res.class_tasks}});
  log_event({{"event", "stage done"},
             {"stage", "pretrain-encoder"},
             {"val_acc", res.val_acc_curve.empty() ? 0.0 : res.val_acc_curve.back()}});
  std::printf("pretrain-encoder: %zu classes, final val accuracy %.3f -> %s\n",
              res.class_tasks.size(),
              res.val_acc_curve.empty() ? 0.0 : res.val_acc_curve.back(), out.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train-dvd
// ---------------------------------------------------------------------------
int cmd_train_dvd(const RunConfig& cfg, const std::string& data_dir,
                  const std::string& encoder_dir, const std::string& out) {
  const fs::path enc_path = fs::path(encoder_dir) / "encoder.dvdw";
  if (!fs::exists(enc_path))
    throw PrereqError("no pretrained encoder at " + enc_path.string() +
                      "; run pretrain-encoder first");
  const bool has_human = fs::exists(fs::path(data_dir) / "human" / "manifest.json");
  const dvd::data::Manifest robot =
      require_manifest((fs::path(data_dir) / "robot").string(), "gen-data");
  // human clips anchor the triplets when present; robot-only data anchors on itself
  const dvd::data::Manifest anchors =
      has_human ? require_manifest((fs::path(data_dir) / "human").string(), "gen-data")
                : robot;

  dvd::reward::DVDModel model = dvd::reward::make_model();
  dvd::nn::load_checkpoint(enc_path.string(), model.encoder);
  model.encoder.freeze_all(true);
  Rng hrng(dvd::world::hash_u64(cfg.seed ^ 0x6ea0u));
  model.head.init_params(hrng);

  dvd::reward::TrainConfig tcfg = cfg.train;
  tcfg.seed = dvd::world::hash_u64(cfg.seed ^ 0x7d7du);
  dvd::data::ClipStore store;
  const auto res = dvd::reward::train_dvd(model, anchors, robot, tcfg, &store);

  write_provenance(out, cfg);
  dvd::reward::save_model(model, (fs::path(out) / "encoder.dvdw").string(),
                          (fs::path(out) / "head.dvdw").string());
  write_json_file((fs::path(out) / "curves.json").string(),
                  dvd::reward::curves_to_json(cfg.digest(), cfg.seed, res.curve));
  log_event({{"event", "stage done"},
             {"stage", "train-dvd"},
             {"val_acc", res.final_val_acc},
             {"steps", res.steps_run}});
  std::printf("train-dvd: %zu steps, held-out pair accuracy %.3f -> %s\n", res.steps_run,
              res.final_val_acc, out.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train-dynamics
// ---------------------------------------------------------------------------
int cmd_train_dynamics(const RunConfig& cfg, const std::string& out) {
  dvd::dynamics::DynConfig dcfg = cfg.dyn;
  dcfg.seed = dvd::world::hash_u64(cfg.seed ^ 0xd1ecu);
  const dvd::world::DomainSpec domain =
      cfg.dyn_tier == 0 ? dvd::world::DomainSpec{}
                        : dvd::world::sample_env_variant(cfg.dyn_tier,
                                                         dvd::world::hash_u64(dcfg.seed));
  const auto ds = dvd::dynamics::collect_random_episodes(
      domain, dcfg.n_episodes, dcfg.episode_len, dvd::world::hash_u64(dcfg.seed ^ 0xc011u));
  dvd::dynamics::Predictor p = dvd::dynamics::make_predictor(dcfg);
  const auto res = dvd::dynamics::train_predictor(p, ds, dcfg);

  write_provenance(out, cfg);
  dvd::nn::save_checkpoint((fs::path(out) / "encoder.dvdw").string(), p.encoder);
  dvd::nn::save_checkpoint((fs::path(out) / "transition.dvdw").string(), p.transition);
  dvd::nn::save_checkpoint((fs::path(out) / "decoder.dvdw").string(), p.decoder);
  write_json_file((fs::path(out) / "curves.json").string(),
                  {{"config_digest", cfg.digest()},
                   {"seed", cfg.seed},
                   {"epoch_mse", res.epoch_mse},
                   {"held_out_mse", res.held_out_mse},
                   {"copy_baseline_mse", res.copy_baseline_mse}});
  // meta.json lets `plan` rebuild a predictor with matching shapes
  write_json_file((fs::path(out) / "meta.json").string(),
                  {{"context_frames", dcfg.context_frames},
                   {"predict_frames", dcfg.predict_frames},
                   {"latent_dim", dcfg.latent_dim},
                   {"frame_size", dcfg.frame_size},
                   {"tier", cfg.dyn_tier}});
  log_event({{"event", "stage done"},
             {"stage", "train-dynamics"},
             {"held_out_mse", res.held_out_mse},
             {"copy_baseline_mse", res.copy_baseline_mse}});
  std::printf("train-dynamics: held-out mse %.6f (copy baseline %.6f) -> %s\n",
              res.held_out_mse, res.copy_baseline_mse, out.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------
dvd::dynamics::Predictor load_predictor(const std::string& dir) {
  const fs::path meta_path = fs::path(dir) / "meta.json";
  if (!fs::exists(meta_path))
    throw PrereqError("no dynamics model at " + dir + "; run train-dynamics first");
  std::ifstream in(meta_path);
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw dvd::data::FormatError("bad dynamics meta.json: " + std::string(e.what()));
  }
  dvd::dynamics::DynConfig dcfg;
  dcfg.context_frames = meta.at("context_frames").get<std::size_t>();
  dcfg.predict_frames = meta.at("predict_frames").get<std::size_t>();
  dcfg.latent_dim = meta.at("latent_dim").get<std::size_t>();
  dcfg.frame_size = meta.at("frame_size").get<std::size_t>();
  dvd::dynamics::Predictor p = dvd::dynamics::make_predictor(dcfg);
  dvd::nn::load_checkpoint((fs::path(dir) / "encoder.dvdw").string(), p.encoder);
  dvd::nn::load_checkpoint((fs::path(dir) / "transition.dvdw").string(), p.transition);
  dvd::nn::load_checkpoint((fs::path(dir) / "decoder.dvdw").string(), p.decoder);
  return p;
}

int cmd_plan(const RunConfig& cfg, const std::string& demo_path, const std::string& model_dir,
             const std::string& dynamics_arg, int tier, int task_id, int trials,
             const std::string& out) {
  if (tier < 0 || tier > 3) throw ConfigError("plan: --tier must be in [0, 3]");
  if (trials < 1) throw ConfigError("plan: --trials must be >= 1");
  const dvd::world::TaskSpec& task = dvd::world::task_by_id(task_id);

  if (!fs::exists(fs::path(model_dir) / "head.dvdw"))
    throw PrereqError("no trained model at " + model_dir + "; run train-dvd first");
  dvd::reward::DVDModel model = dvd::reward::make_model();
  dvd::reward::load_model(model, (fs::path(model_dir) / "encoder.dvdw").string(),
                          (fs::path(model_dir) / "head.dvdw").string());
  const dvd::world::VideoClip demo = dvd::data::read_clip(demo_path);

  std::optional<dvd::dynamics::Predictor> learned;
  if (dynamics_arg != "oracle") learned = load_predictor(dynamics_arg);
  if (!out.empty()) write_provenance(out, cfg);

  const dvd::planner::ScoreFn score = dvd::planner::make_dvd_scorer(model, demo);
  int successes = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const std::uint64_t key =
        dvd::world::hash_u64(cfg.seed ^ (static_cast<std::uint64_t>(trial) << 20) ^ 0x97a2u);
    Rng trng(dvd::world::hash_u64(key ^ 0x101u));
    const dvd::world::WorldState init = dvd::world::initial_state(task, trng);
    const dvd::world::DomainSpec domain =
        tier == 0 ? dvd::world::DomainSpec{} : dvd::world::sample_env_variant(tier, key);
    const dvd::planner::DynamicsFn dyn = learned
                                             ? dvd::planner::make_learned_dynamics(*learned)
                                             : dvd::planner::make_oracle_dynamics(domain);
    dvd::planner::PlannerConfig pcfg = cfg.plan;
    pcfg.seed = key;
    const auto episode = dvd::planner::run_episode(init, task, domain, score, dyn, pcfg);
    successes += episode.success;
    log_event({{"event", "trial"},
               {"trial", trial},
               {"task", task.name},
               {"tier", tier},
               {"success", episode.success}});
    if (!out.empty())
      dvd::planner::save_episode_trace(
          episode, (fs::path(out) / ("trial" + std::to_string(trial))).string());
  }
  std::printf("plan: task %s tier %d -> %d/%d successes (rate %.3f)\n", task.name.c_str(),
              tier, successes, trials, static_cast<double>(successes) / trials);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench / report
// ---------------------------------------------------------------------------
int cmd_bench(const RunConfig& cfg, const std::string& experiment, const std::string& out,
              const std::string& cache) {
  dvd::bench::BenchContext ctx{cache.empty() ? (fs::path(out) / "cache").string() : cache,
                               {},
                               true};
  dvd::bench::ResultsTable table;
  if (experiment == "env-gen") {
    table = dvd::bench::run_env_generalization(ctx, cfg.exp);
  } else if (experiment == "task-gen") {
    table = dvd::bench::run_task_generalization(ctx, cfg.exp);
  } else if (experiment == "ablation") {
    table = dvd::bench::run_ablation_robot_demos(ctx, cfg.exp, cfg.ablation_budgets);
  } else if (experiment == "baselines") {
    table = dvd::bench::run_baselines(ctx, cfg.exp);
  } else {
    throw ConfigError("unknown experiment: " + experiment);
  }

  write_provenance(out, cfg);
  json results = dvd::bench::table_to_json(table);
  results["provenance"] = {{"tool_version", kToolVersion},
                           {"config_digest", cfg.digest()},
                           {"seed", cfg.seed}};
  write_json_file((fs::path(out) / "results.json").string(), results);
  dvd::bench::write_report({table}, out);
  log_event({{"event", "stage done"}, {"stage", "bench"}, {"experiment", experiment}});
  std::printf("bench %s: %zu cells -> %s\n", experiment.c_str(), table.cells.size(),
              out.c_str());
  for (const auto& a : dvd::bench::compute_aggregates(table))
    std::printf("  %s tier %d: %.3f +/- %.3f\n", a.method.c_str(), a.tier, a.mean,
                a.std_error);
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  if (inputs.empty()) throw ConfigError("report: no input files");
  std::vector<dvd::bench::ResultsTable> tables;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw dvd::data::FormatError("cannot open " + path);
    try {
      tables.push_back(dvd::bench::table_from_json(json::parse(in)));
    } catch (const json::exception& e) {
      throw dvd::data::FormatError("bad results file " + path + ": " + e.what());
    }
  }
  dvd::bench::write_report(tables, out);
  std::printf("report: %zu tables -> %s\n", tables.size(), out.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dvd: reward learning from cross-domain video and visual MPC"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string config_path, data_dir, encoder_dir, out_dir, demo_path, model_dir;
  std::string dynamics_arg = "oracle";
  std::string experiment, cache_dir;
  std::vector<std::string> report_inputs;
  int tier = 0, task_id = 0, trials = 1;
  std::optional<std::uint64_t> seed_override;

  auto add_common = [&](CLI::App* sub, bool need_out) {
    sub->add_option("--config", config_path, "run config JSON file");
    sub->add_option("--seed", seed_override, "override the config's global seed");
    auto* opt = sub->add_option("--out", out_dir, "output directory");
    if (need_out) opt->required();
  };

  auto* gen = app.add_subcommand("gen-data", "generate human/robot datasets");
  add_common(gen, true);

  auto* pre = app.add_subcommand("pretrain-encoder", "pretrain the video encoder");
  add_common(pre, true);
  pre->add_option("--data", data_dir, "gen-data output directory")->required();

  auto* tdvd = app.add_subcommand("train-dvd", "train the similarity head");
  add_common(tdvd, true);
  tdvd->add_option("--data", data_dir, "gen-data output directory")->required();
  tdvd->add_option("--encoder", encoder_dir,
                   "pretrain-encoder output directory (default: <data>/encoder)");

  auto* tdyn = app.add_subcommand("train-dynamics", "train the video predictor");
  add_common(tdyn, true);
  tdyn->add_option("--data", data_dir, "unused; accepted for pipeline symmetry");

  auto* plan = app.add_subcommand("plan", "run planning episodes against a demo");
  add_common(plan, false);
  plan->add_option("--demo", demo_path, "conditioning demo clip (.dvdc)")->required();
  plan->add_option("--model", model_dir, "train-dvd output directory")->required();
  plan->add_option("--dynamics", dynamics_arg,
                   "'oracle' or a train-dynamics output directory");
  plan->add_option("--tier", tier, "environment shift tier (0-3)");
  plan->add_option("--task", task_id, "task id for success scoring")->required();
  plan->add_option("--trials", trials, "number of episodes");

  auto* bench = app.add_subcommand("bench", "run a benchmark experiment");
  add_common(bench, true);
  bench->add_option("--experiment", experiment, "env-gen | task-gen | ablation | baselines")
      ->required();
  bench->add_option("--cache", cache_dir, "artifact cache directory (default: <out>/cache)");

  auto* report = app.add_subcommand("report", "render reports from results JSON");
  report->add_option("--in", report_inputs, "results.json files");
  report->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (report->parsed()) return cmd_report(report_inputs, out_dir);
    const RunConfig cfg = parse_config(config_path, seed_override);
    log_event({{"event", "start"},
               {"command", app.get_subcommands().front()->get_name()},
               {"tool_version", kToolVersion},
               {"config_digest", cfg.digest()},
               {"seed", cfg.seed}});
    if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
    if (pre->parsed()) return cmd_pretrain_encoder(cfg, data_dir, out_dir);
    if (tdvd->parsed()) {
      if (encoder_dir.empty()) encoder_dir = (fs::path(data_dir) / "encoder").string();
      return cmd_train_dvd(cfg, data_dir, encoder_dir, out_dir);
    }
    if (tdyn->parsed()) return cmd_train_dynamics(cfg, out_dir);
    if (plan->parsed())
      return cmd_plan(cfg, demo_path, model_dir, dynamics_arg, tier, task_id, trials, out_dir);
    if (bench->parsed()) return cmd_bench(cfg, experiment, out_dir, cache_dir);
    return kExitConfig;
  } catch (const ConfigError& e) {
    log_event({{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
    std::fprintf(stdout, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const dvd::bench::SpecError& e) {
    log_event({{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
    std::fprintf(stdout, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    log_event({{"event", "error"}, {"kind", "config"}, {"message", e.what()}});
    std::fprintf(stdout, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const PrereqError& e) {
    log_event({{"event", "error"}, {"kind", "missing prerequisite"}, {"message", e.what()}});
    std::fprintf(stdout, "missing prerequisite: %s\n", e.what());
    return kExitPrereq;
  } catch (const dvd::bench::MissingArtifact& e) {
    log_event({{"event", "error"}, {"kind", "missing prerequisite"}, {"message", e.what()}});
    std::fprintf(stdout, "missing prerequisite: %s\n", e.what());
    return kExitPrereq;
  } catch (const std::exception& e) {
    log_event({{"event", "error"}, {"kind", "io"}, {"message", e.what()}});
    std::fprintf(stdout, "error: %s\n", e.what());
    return kExitIo;
  }
}
