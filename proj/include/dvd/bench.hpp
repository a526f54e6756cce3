#pragma once

// Experiment harness: environment/task generalization, the robot-demo
// ablation, and the random / BC / classifier-reward baselines, with cached
// training artifacts and JSON/CSV/chart reports.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dvd/data.hpp"
#include "dvd/dynamics.hpp"
#include "dvd/planner.hpp"
#include "dvd/reward.hpp"
#include "dvd/world.hpp"
#include "json.hpp"

namespace dvd::bench {

using nlohmann::json;
using world::ActionVec;
using world::DomainSpec;
using world::VideoClip;
using world::WorldState;

struct SpecError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------
struct MethodSpec {
  std::string kind = "dvd";  // dvd | dvd_robot_only | random | bc | classifier_reward
  std::size_t human_task_count = 6;
  std::size_t robot_demos_per_task = 120;
  std::string demo_source = "human";  // embodiment of the conditioning demo
};

inline bool method_uses_planner(const std::string& kind) {
  return kind == "dvd" || kind == "dvd_robot_only" || kind == "classifier_reward";
}

struct ExperimentSpec {
  std::string name = "env-gen";
  std::vector<MethodSpec> methods;
  std::vector<int> eval_tiers{0, 1, 2, 3};
  std::vector<int> target_tasks{0, 1, 2};
  std::vector<int> train_tasks{0, 1, 2};  // robot demo tasks
  std::vector<int> human_task_pool{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  std::size_t trials = 50;
  std::size_t seeds = 3;
  std::string dynamics = "oracle";  // oracle | learned
  std::size_t human_demos_per_task = 24;
  reward::PretrainConfig pretrain;
  reward::TrainConfig train;
  planner::PlannerConfig plan;
  dynamics::DynConfig dyn;
  std::uint64_t base_seed = 0;

  void validate() const {
    if (methods.empty()) throw SpecError("spec has no methods");
    if (trials < 1 || seeds < 1) throw SpecError("trials and seeds must be >= 1");
    if (dynamics != "oracle" && dynamics != "learned")
      throw SpecError("dynamics must be 'oracle' or 'learned'");
    for (int t : eval_tiers)
      if (t < 0 || t > 3) throw SpecError("eval tier out of range");
    for (int t : target_tasks) world::task_by_id(t);  // throws on unknown task
    for (int t : train_tasks) world::task_by_id(t);
    for (int t : human_task_pool) world::task_by_id(t);
    for (const auto& m : methods) {
      if (m.kind != "dvd" && m.kind != "dvd_robot_only" && m.kind != "random" &&
          m.kind != "bc" && m.kind != "classifier_reward")
        throw SpecError("unknown method kind: " + m.kind);
      if (m.kind == "dvd" && m.human_task_count > human_task_pool.size())
        throw SpecError("human_task_count exceeds the task pool");
      if (m.demo_source != "human" && m.demo_source != "robot")
        throw SpecError("demo_source must be 'human' or 'robot'");
      if (method_uses_planner(m.kind) || m.kind == "bc")
        if (m.robot_demos_per_task < 2) throw SpecError("robot_demos_per_task must be >= 2");
    }
  }
};

inline json spec_to_json(const ExperimentSpec& s) {
  json methods = json::array();
  for (const auto& m : s.methods)
    methods.push_back({{"kind", m.kind},
                       {"human_task_count", m.human_task_count},
                       {"robot_demos_per_task", m.robot_demos_per_task},
                       {"demo_source", m.demo_source}});
  return json{{"name", s.name},
              {"methods", std::move(methods)},
              {"eval_tiers", s.eval_tiers},
              {"target_tasks", s.target_tasks},
              {"train_tasks", s.train_tasks},
              {"human_task_pool", s.human_task_pool},
              {"trials", s.trials},
              {"seeds", s.seeds},
              {"dynamics", s.dynamics},
              {"human_demos_per_task", s.human_demos_per_task},
              {"pretrain",
               {{"epochs", s.pretrain.epochs},
                {"steps_per_epoch", s.pretrain.steps_per_epoch},
                {"batch", s.pretrain.batch},
                {"lr", s.pretrain.lr}}},
              {"train", reward::train_config_json(s.train)},
              {"plan",
               {{"G", s.plan.G},
                {"H", s.plan.H},
                {"rounds", s.plan.rounds},
                {"top_k", s.plan.top_k},
                {"cem_iters", s.plan.cem_iters},
                {"elite_count", s.plan.elite_count}}},
              {"dyn",
               {{"n_episodes", s.dyn.n_episodes},
                {"epochs", s.dyn.epochs},
                {"steps_per_epoch", s.dyn.steps_per_epoch}}},
              {"base_seed", s.base_seed}};
}

inline std::string spec_digest(const ExperimentSpec& s) { return sha256_hex(spec_to_json(s).dump()); }

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------
struct Cell {
  std::string method;
  std::size_t human_task_count = 0;
  std::size_t robot_demos = 0;
  int tier = 0;
  int task = 0;
  std::uint64_t seed = 0;
  std::size_t trials = 0;
  std::size_t successes = 0;
  bool not_applicable = false;

  double rate() const {
    return trials ? static_cast<double>(successes) / static_cast<double>(trials) : 0.0;
  }
};

struct Aggregate {
  std::string method;
  int tier = 0;
  double mean = 0.0;
  double std_error = 0.0;
};

struct ResultsTable {
  std::string experiment;
  std::string spec_digest;
  std::vector<Cell> cells;
};

// Per (method, tier): seed-level rates pooled over tasks, mean over seeds,
// standard error = sample std / sqrt(seeds). n/a cells are excluded.
inline std::vector<Aggregate> compute_aggregates(const ResultsTable& t) {
  std::map<std::pair<std::string, int>, std::map<std::uint64_t, std::pair<std::size_t, std::size_t>>>
      pools;  // (method, tier) -> seed -> (successes, trials)
  for (const auto& c : t.cells) {
    if (c.not_applicable) continue;
    auto& p = pools[{c.method, c.tier}][c.seed];
    p.first += c.successes;
    p.second += c.trials;
  }
  std::vector<Aggregate> out;
  for (const auto& [key, by_seed] : pools) {
    std::vector<double> rates;
    for (const auto& [seed, p] : by_seed)
      rates.push_back(p.second ? static_cast<double>(p.first) / static_cast<double>(p.second)
                               : 0.0);
    Aggregate a;
    a.method = key.first;
    a.tier = key.second;
    for (double r : rates) a.mean += r / static_cast<double>(rates.size());
    if (rates.size() > 1) {
      double ss = 0.0;
      for (double r : rates) ss += (r - a.mean) * (r - a.mean);
      a.std_error = std::sqrt(ss / static_cast<double>(rates.size() - 1)) /
                    std::sqrt(static_cast<double>(rates.size()));
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline json table_to_json(const ResultsTable& t) {
  json cells = json::array();
  for (const auto& c : t.cells)
    cells.push_back({{"method", c.method},
                     {"human_task_count", c.human_task_count},
                     {"robot_demos", c.robot_demos},
                     {"tier", c.tier},
                     {"task", c.task},
                     {"seed", c.seed},
                     {"trials", c.trials},
                     {"successes", c.successes},
                     {"not_applicable", c.not_applicable}});
  json aggs = json::array();
  for (const auto& a : compute_aggregates(t))
    aggs.push_back(
        {{"method", a.method}, {"tier", a.tier}, {"mean", a.mean}, {"std_error", a.std_error}});
  return json{{"experiment", t.experiment},
              {"spec_digest", t.spec_digest},
              {"cells", std::move(cells)},
              {"aggregates", std::move(aggs)}};
}

inline ResultsTable table_from_json(const json& j) {
  ResultsTable t;
  t.experiment = j.at("experiment").get<std::string>();
  t.spec_digest = j.at("spec_digest").get<std::string>();
  for (const auto& c : j.at("cells")) {
    Cell cell;
    cell.method = c.at("method").get<std::string>();
    cell.human_task_count = c.at("human_task_count").get<std::size_t>();
    cell.robot_demos = c.at("robot_demos").get<std::size_t>();
    cell.tier = c.at("tier").get<int>();
    cell.task = c.at("task").get<int>();
    cell.seed = c.at("seed").get<std::uint64_t>();
    cell.trials = c.at("trials").get<std::size_t>();
    cell.successes = c.at("successes").get<std::size_t>();
    cell.not_applicable = c.at("not_applicable").get<bool>();
    t.cells.push_back(std::move(cell));
  }
  return t;
}

inline std::string table_to_csv(const ResultsTable& t) {
  std::string out =
      "method,human_task_count,robot_demos,tier,task,seed,trials,successes,not_applicable\n";
  for (const auto& c : t.cells) {
    out += c.method + "," + std::to_string(c.human_task_count) + "," +
           std::to_string(c.robot_demos) + "," + std::to_string(c.tier) + "," +
           std::to_string(c.task) + "," + std::to_string(c.seed) + "," +
           std::to_string(c.trials) + "," + std::to_string(c.successes) + "," +
           (c.not_applicable ? "1" : "0") + "\n";
  }
  return out;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace detail

// Grouped bar chart of mean +/- standard error per (method, tier).
inline std::string chart_svg(const ResultsTable& t) {
  const auto aggs = compute_aggregates(t);
  std::vector<std::string> methods;
  std::vector<int> tiers;
  for (const auto& a : aggs) {
    if (std::find(methods.begin(), methods.end(), a.method) == methods.end())
      methods.push_back(a.method);
    if (std::find(tiers.begin(), tiers.end(), a.tier) == tiers.end()) tiers.push_back(a.tier);
  }
  std::sort(tiers.begin(), tiers.end());
  const double plot_w = 640.0, plot_h = 320.0, margin = 60.0;
  const double group_w = plot_w / std::max<std::size_t>(1, tiers.size());
  const double bar_w = group_w / (methods.size() + 1.0);
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"};

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                    detail::fmt(plot_w + 2 * margin) + "\" height=\"" +
                    detail::fmt(plot_h + 2 * margin + 20.0 * methods.size()) + "\">\n";
  svg += "<text x=\"" + detail::fmt(margin) + "\" y=\"30\" font-size=\"16\">" + t.experiment +
         ": success rate by tier (mean +/- SE)</text>\n";
  // axes
  svg += "<line x1=\"" + detail::fmt(margin) + "\" y1=\"" + detail::fmt(margin) + "\" x2=\"" +
         detail::fmt(margin) + "\" y2=\"" + detail::fmt(margin + plot_h) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + detail::fmt(margin) + "\" y1=\"" + detail::fmt(margin + plot_h) +
         "\" x2=\"" + detail::fmt(margin + plot_w) + "\" y2=\"" + detail::fmt(margin + plot_h) +
         "\" stroke=\"black\"/>\n";
  for (int g = 0; g <= 4; ++g) {
    const double y = margin + plot_h * (1.0 - 0.25 * g);
    svg += "<text x=\"" + detail::fmt(margin - 35.0) + "\" y=\"" + detail::fmt(y + 4.0) +
           "\" font-size=\"11\">" + detail::fmt(0.25 * g) + "</text>\n";
  }
  for (std::size_t ti = 0; ti < tiers.size(); ++ti) {
    svg += "<text x=\"" + detail::fmt(margin + group_w * (ti + 0.4)) + "\" y=\"" +
           detail::fmt(margin + plot_h + 18.0) + "\" font-size=\"12\">tier " +
           std::to_string(tiers[ti]) + "</text>\n";
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const auto it = std::find_if(aggs.begin(), aggs.end(), [&](const Aggregate& a) {
        return a.method == methods[mi] && a.tier == tiers[ti];
      });
      if (it == aggs.end()) continue;
      const double x = margin + group_w * ti + bar_w * (mi + 0.5);
      const double h = plot_h * it->mean;
      svg += "<rect x=\"" + detail::fmt(x) + "\" y=\"" + detail::fmt(margin + plot_h - h) +
             "\" width=\"" + detail::fmt(bar_w * 0.9) + "\" height=\"" + detail::fmt(h) +
             "\" fill=\"" + palette[mi % 5] + "\"/>\n";
      const double cx = x + bar_w * 0.45;
      const double e = plot_h * it->std_error;
      svg += "<line x1=\"" + detail::fmt(cx) + "\" y1=\"" + detail::fmt(margin + plot_h - h - e) +
             "\" x2=\"" + detail::fmt(cx) + "\" y2=\"" + detail::fmt(margin + plot_h - h + e) +
             "\" stroke=\"black\"/>\n";
    }
  }
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const double y = margin + plot_h + 40.0 + 20.0 * mi;
    svg += "<rect x=\"" + detail::fmt(margin) + "\" y=\"" + detail::fmt(y - 10.0) +
           "\" width=\"12\" height=\"12\" fill=\"" + std::string(palette[mi % 5]) + "\"/>\n";
    svg += "<text x=\"" + detail::fmt(margin + 18.0) + "\" y=\"" + detail::fmt(y) +
           "\" font-size=\"12\">" + methods[mi] + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

inline void write_report(const std::vector<ResultsTable>& tables, const std::string& out_dir) {
  if (tables.empty()) throw SpecError("report: no tables");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::string md = "# Benchmark report\n\n";
  for (const auto& t : tables) {
    const std::string base = "results_" + t.experiment;
    {
      std::ofstream out(fs::path(out_dir) / (base + ".json"));
      if (!out) throw std::runtime_error("report: cannot write to " + out_dir);
      out << table_to_json(t).dump(2) << "\n";
    }
    {
      std::ofstream out(fs::path(out_dir) / (base + ".csv"));
      out << table_to_csv(t);
    }
    {
      std::ofstream out(fs::path(out_dir) / (base + ".svg"));
      out << chart_svg(t);
    }
    md += "## " + t.experiment + "\n\nspec digest: `" + t.spec_digest + "`\n\n";
    md += "| method | tier | mean success | std error |\n|---|---|---|---|\n";
    for (const auto& a : compute_aggregates(t))
      md += "| " + a.method + " | " + std::to_string(a.tier) + " | " + detail::fmt(a.mean) +
            " | " + detail::fmt(a.std_error) + " |\n";
    md += "\nartifacts: [" + base + ".json](" + base + ".json), [" + base + ".csv](" + base +
          ".csv), [" + base + ".svg](" + base + ".svg)\n\n";
  }
  std::ofstream out(fs::path(out_dir) / "report.md");
  out << md;
}

// ---------------------------------------------------------------------------
// Artifact cache: datasets and trained models keyed by descriptor digest.
// ---------------------------------------------------------------------------
struct BenchContext {
  std::string root;  // cache directory
  data::ClipStore store;
  bool log_cache = false;  // print "cache hit" lines (used by the CLI)
};

namespace detail {

inline std::string cache_dir(BenchContext& ctx, const std::string& kind, const json& desc) {
  const std::string key = sha256_hex(desc.dump()).substr(0, 16);
  return (std::filesystem::path(ctx.root) / kind / key).string();
}

inline void log_hit(const BenchContext& ctx, const std::string& kind, const std::string& dir) {
  if (ctx.log_cache)
    std::fprintf(stderr, "{\"event\":\"cache hit\",\"kind\":\"%s\",\"dir\":\"%s\"}\n",
                 kind.c_str(), dir.c_str());
}

}  // namespace detail

// Merge manifests into one with absolute clip paths (root-independent).
inline data::Manifest merge_manifests(const std::vector<const data::Manifest*>& parts) {
  data::Manifest out;
  std::set<int> seen;
  for (const auto* m : parts) {
    for (const auto& t : m->tasks)
      if (seen.insert(t.task_id).second) out.tasks.push_back(t);
    for (auto r : m->records) {
      r.clip_path = (std::filesystem::path(m->root) / r.clip_path).string();
      out.records.push_back(std::move(r));
    }
  }
  return out;
}

// Robot training demos: half canonical tier-0, half rearranged tier-0.
inline data::Manifest robot_training_data(BenchContext& ctx, const std::vector<int>& tasks,
                                          std::size_t demos_per_task, std::uint64_t seed,
                                          bool with_actions = false) {
  const json desc{{"kind", "robot"}, {"tasks", tasks},      {"demos", demos_per_task},
                  {"seed", seed},    {"actions", with_actions}};
  const std::string dir = detail::cache_dir(ctx, "data", desc);
  data::GenSpec a;
  a.task_ids = tasks;
  a.demos_per_task = static_cast<int>(demos_per_task - demos_per_task / 2);
  a.save_actions = with_actions;
  a.seed = world::hash_u64(seed ^ 0x70b0u);
  data::GenSpec b = a;
  b.demos_per_task = static_cast<int>(demos_per_task / 2);
  b.rearranged = true;
  b.seed = world::hash_u64(seed ^ 0x70b1u);
  data::Manifest ma, mb;
  if (std::filesystem::exists(std::filesystem::path(dir) / "canonical" / "manifest.json")) {
    detail::log_hit(ctx, "data", dir);
    ma = data::load_manifest(
        (std::filesystem::path(dir) / "canonical" / "manifest.json").string());
    mb = data::load_manifest(
        (std::filesystem::path(dir) / "rearranged" / "manifest.json").string());
  } else {
    ma = data::generate_dataset((std::filesystem::path(dir) / "canonical").string(), a);
    mb = data::generate_dataset((std::filesystem::path(dir) / "rearranged").string(), b);
  }
  return merge_manifests({&ma, &mb});
}

inline data::Manifest human_training_data(BenchContext& ctx, const std::vector<int>& tasks,
                                          std::size_t demos_per_task, std::uint64_t seed) {
  const json desc{
      {"kind", "human"}, {"tasks", tasks}, {"demos", demos_per_task}, {"seed", seed}};
  const std::string dir = detail::cache_dir(ctx, "data", desc);
  if (std::filesystem::exists(std::filesystem::path(dir) / "manifest.json")) {
    detail::log_hit(ctx, "data", dir);
    return data::load_manifest((std::filesystem::path(dir) / "manifest.json").string());
  }
  data::GenSpec spec;
  spec.task_ids = tasks;
  spec.demos_per_task = static_cast<int>(demos_per_task);
  spec.domain = world::Embodiment::human;
  spec.seed = world::hash_u64(seed ^ 0x4a4du);
  return data::generate_dataset(dir, spec);
}

// First n pool entries, with the robot train tasks forced to the front so
// small human budgets still cover the tasks being evaluated.
inline std::vector<int> human_task_subset(const ExperimentSpec& spec, std::size_t n) {
  std::vector<int> ordered;
  for (int t : spec.train_tasks)
    if (std::find(spec.human_task_pool.begin(), spec.human_task_pool.end(), t) !=
        spec.human_task_pool.end())
      ordered.push_back(t);
  for (int t : spec.human_task_pool)
    if (std::find(ordered.begin(), ordered.end(), t) == ordered.end()) ordered.push_back(t);
  if (n > ordered.size()) throw SpecError("human_task_count exceeds the task pool");
  ordered.resize(n);
  std::sort(ordered.begin(), ordered.end());
  return ordered;
}

// A trained DVD variant plus the pretraining classifier (for the
// classifier-reward baseline).
struct TrainedMethod {
  reward::DVDModel model;
  nn::Network classifier_head;
  std::vector<int> class_tasks;
  double pair_val_acc = 0.0;
  data::Manifest human, robot;  // training manifests, kept for audits
};

inline TrainedMethod train_dvd_method(BenchContext& ctx, const ExperimentSpec& spec,
                                      const MethodSpec& method, std::uint64_t seed) {
  const bool robot_only = method.kind == "dvd_robot_only" || method.human_task_count == 0;
  const std::vector<int> human_tasks =
      robot_only ? std::vector<int>{} : human_task_subset(spec, method.human_task_count);

  TrainedMethod out;
  out.model = reward::make_model();
  out.robot = robot_training_data(ctx, spec.train_tasks, method.robot_demos_per_task,
                                  world::hash_u64(spec.base_seed ^ (seed * 0x9e3779b9ULL)));
  if (!robot_only)
    out.human = human_training_data(ctx, human_tasks, spec.human_demos_per_task,
                                    world::hash_u64(spec.base_seed ^ (seed * 0x51eduLL) ^ 1));

  const json desc{{"kind", "model"},
                  {"robot_only", robot_only},
                  {"human_tasks", human_tasks},
                  {"human_demos", spec.human_demos_per_task},
                  {"train_tasks", spec.train_tasks},
                  {"robot_demos", method.robot_demos_per_task},
                  {"pretrain", spec_to_json(spec)["pretrain"]},
                  {"train", reward::train_config_json(spec.train)},
                  {"seed", seed},
                  {"base_seed", spec.base_seed}};
  const std::string dir = detail::cache_dir(ctx, "model", desc);
  namespace fs = std::filesystem;
  const std::string meta_path = (fs::path(dir) / "meta.json").string();
  if (fs::exists(meta_path)) {
    detail::log_hit(ctx, "model", dir);
    std::ifstream in(meta_path);
    const json meta = json::parse(in);
    out.class_tasks = meta.at("class_tasks").get<std::vector<int>>();
    out.pair_val_acc = meta.at("pair_val_acc").get<double>();
    reward::load_model(out.model, (fs::path(dir) / "encoder.dvdw").string(),
                       (fs::path(dir) / "head.dvdw").string());
    out.classifier_head = reward::make_classifier_head(out.class_tasks.size());
    nn::load_checkpoint((fs::path(dir) / "classifier.dvdw").string(), out.classifier_head);
    return out;
  }

  // pretraining sees the method's full training pool (human + robot)
  const data::Manifest pretrain_data =
      robot_only ? merge_manifests({&out.robot}) : merge_manifests({&out.human, &out.robot});
  reward::PretrainConfig pcfg = spec.pretrain;
  pcfg.seed = world::hash_u64(spec.base_seed ^ seed ^ 0x9e37u);
  auto pre = reward::pretrain_encoder(pretrain_data, pcfg, &ctx.store);
  out.model.encoder = std::move(pre.encoder);
  out.classifier_head = std::move(pre.classifier_head);
  out.class_tasks = std::move(pre.class_tasks);

  Rng hrng(world::hash_u64(spec.base_seed ^ seed ^ 0x4eadu));
  out.model.head.init_params(hrng);
  reward::TrainConfig tcfg = spec.train;
  tcfg.seed = world::hash_u64(spec.base_seed ^ seed ^ 0xd7d7u);
  const data::Manifest& anchors = robot_only ? out.robot : out.human;
  const auto res = reward::train_dvd(out.model, anchors, out.robot, tcfg, &ctx.store);
  out.pair_val_acc = res.final_val_acc;

  fs::create_directories(dir);
  reward::save_model(out.model, (fs::path(dir) / "encoder.dvdw").string(),
                     (fs::path(dir) / "head.dvdw").string());
  nn::save_checkpoint((fs::path(dir) / "classifier.dvdw").string(), out.classifier_head);
  std::ofstream meta(meta_path);
  meta << json{{"class_tasks", out.class_tasks}, {"pair_val_acc", out.pair_val_acc}}.dump(2)
       << "\n";
  return out;
}

// Per-tier learned dynamics, trained on random interaction in that tier.
inline dynamics::Predictor train_tier_dynamics(BenchContext& ctx, const ExperimentSpec& spec,
                                               int tier, std::uint64_t seed) {
  dynamics::DynConfig cfg = spec.dyn;
  cfg.seed = world::hash_u64(spec.base_seed ^ seed ^ (std::uint64_t(tier) << 8) ^ 0xd1ecu);
  const json desc{{"kind", "dyn"},
                  {"tier", tier},
                  {"seed", seed},
                  {"base_seed", spec.base_seed},
                  {"cfg", spec_to_json(spec)["dyn"]}};
  const std::string dir = detail::cache_dir(ctx, "dyn", desc);
  namespace fs = std::filesystem;
  dynamics::Predictor p = dynamics::make_predictor(cfg);
  if (fs::exists(fs::path(dir) / "encoder.dvdw")) {
    detail::log_hit(ctx, "dyn", dir);
    nn::load_checkpoint((fs::path(dir) / "encoder.dvdw").string(), p.encoder);
    nn::load_checkpoint((fs::path(dir) / "transition.dvdw").string(), p.transition);
    nn::load_checkpoint((fs::path(dir) / "decoder.dvdw").string(), p.decoder);
    return p;
  }
  const DomainSpec domain = world::sample_env_variant(tier, world::hash_u64(cfg.seed));
  const auto ds = dynamics::collect_random_episodes(domain, cfg.n_episodes, cfg.episode_len,
                                                    world::hash_u64(cfg.seed ^ 0xc011u));
  dynamics::train_predictor(p, ds, cfg);
  fs::create_directories(dir);
  nn::save_checkpoint((fs::path(dir) / "encoder.dvdw").string(), p.encoder);
  nn::save_checkpoint((fs::path(dir) / "transition.dvdw").string(), p.transition);
  nn::save_checkpoint((fs::path(dir) / "decoder.dvdw").string(), p.decoder);
  return p;
}

// ---------------------------------------------------------------------------
// Behavioral cloning baseline
// ---------------------------------------------------------------------------
struct BCConfig {
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 50;
  std::size_t batch = 16;
  double lr = 0.01;
  double lr_decay = 0.98;  // multiplicative per-epoch decay
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
};

// Demo-conditioned policy: concat(frozen demo embedding, frozen state-window
// embedding) -> action head with hidden widths [128, 64, 32].
struct BCPolicy {
  reward::DVDModel enc;  // frozen encoder (the head half is unused)
  nn::Network head;
  std::array<double, 3> lo{-world::kActionBound, -world::kActionBound, -1.0};
  std::array<double, 3> hi{world::kActionBound, world::kActionBound, 1.0};
};

inline nn::Network make_bc_head() {
  nn::Network net;
  net.input_shape = {2 * reward::kEmbedDim};
  net.add<nn::FullyConnected>(2 * reward::kEmbedDim, 128);
  net.add<nn::Relu>();
  net.add<nn::FullyConnected>(128, 64);
  net.add<nn::Relu>();
  net.add<nn::FullyConnected>(64, 32);
  net.add<nn::Relu>();
  net.add<nn::FullyConnected>(32, 3);
  return net;
}

namespace detail {

// Embedding of the trailing <= F frames ending at frame t (repeat-first pad).
inline VideoClip state_window(const VideoClip& clip, std::size_t t, std::size_t frames) {
  VideoClip w;
  w.height = clip.height;
  w.width = clip.width;
  for (std::size_t i = 0; i < frames; ++i) {
    const std::size_t back = frames - 1 - i;
    w.frames.push_back(clip.frames[t >= back ? t - back : 0]);
  }
  return w;
}

}  // namespace detail

struct BCTrainResult {
  std::vector<double> epoch_mse;
  double init_mse = 0.0;  // loss of the zero-output policy, for reference
};

inline BCTrainResult train_bc(BCPolicy& policy, const data::Manifest& robot,
                              const data::Manifest& human, const BCConfig& cfg,
                              data::ClipStore& store) {
  if (robot.records.empty()) throw SpecError("train_bc: empty robot manifest");
  const std::size_t F = data::kEncoderFrames;
  const reward::DVDModel& enc_model = policy.enc;

  // demo/state embeddings are frozen, so precompute them per record
  struct Sample {
    std::vector<double> state_emb;
    ActionVec action;
    int task_id;
  };
  std::vector<Sample> samples;
  std::map<int, std::vector<std::vector<double>>> demo_embs_robot, demo_embs_human;
  for (const auto& r : robot.records) {
    const VideoClip& clip = store.get(robot, r);
    const auto actions = data::load_actions(robot, r);
    std::vector<VideoClip> windows;
    std::vector<const VideoClip*> ptrs;
    for (std::size_t t = 0; t < actions.size(); ++t)
      windows.push_back(detail::state_window(clip, t, F));
    for (const auto& w : windows) ptrs.push_back(&w);
    const Tensor embs = reward::encode_batch(enc_model, ptrs);
    for (std::size_t t = 0; t < actions.size(); ++t) {
      Sample s;
      s.state_emb.assign(embs.data() + t * reward::kEmbedDim,
                         embs.data() + (t + 1) * reward::kEmbedDim);
      s.action = actions[t];
      s.task_id = r.task_id;
      samples.push_back(std::move(s));
    }
    const VideoClip proc = data::process_clip_eval(clip, data::BatchConfig{});
    demo_embs_robot[r.task_id].push_back(reward::encode(enc_model, proc));
  }
  for (const auto& r : human.records) {
    const VideoClip proc = data::process_clip_eval(store.get(human, r), data::BatchConfig{});
    demo_embs_human[r.task_id].push_back(reward::encode(enc_model, proc));
  }

  BCTrainResult res;
  for (const auto& s : samples)
    res.init_mse +=
        (s.action.dx * s.action.dx + s.action.dy * s.action.dy + s.action.grip * s.action.grip) /
        (3.0 * static_cast<double>(samples.size()));

  Rng rng(world::hash_u64(cfg.seed ^ 0xbc0u));
  nn::SgdMomentum opt;
  opt.lr = cfg.lr;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch));
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
      Tensor in({cfg.batch, 2 * reward::kEmbedDim});
      Tensor target({cfg.batch, 3});
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const Sample& s = samples[rng.uniform_int(samples.size())];
        // conditioning demo is a robot demonstration with probability 0.5
        const auto& human_pool = demo_embs_human[s.task_id];
        const auto& robot_pool = demo_embs_robot[s.task_id];
        const auto& pool = (human_pool.empty() || rng.coin(0.5)) ? robot_pool : human_pool;
        const auto& demo_emb = pool[rng.uniform_int(pool.size())];
        double* row = in.data() + b * 2 * reward::kEmbedDim;
        std::copy(demo_emb.begin(), demo_emb.end(), row);
        std::copy(s.state_emb.begin(), s.state_emb.end(), row + reward::kEmbedDim);
        target.v[b * 3] = s.action.dx;
        target.v[b * 3 + 1] = s.action.dy;
        target.v[b * 3 + 2] = s.action.grip;
      }
      nn::NetworkCache cache;
      const Tensor out = policy.head.forward(in, nn::Mode::train, &cache);
      Tensor grad(out.shape);
      double loss = 0.0;
      const double denom = static_cast<double>(cfg.batch * 3);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = out.v[i] - target.v[i];
        loss += d * d / denom;
        grad.v[i] = 2.0 * d / denom;
      }
      nn::GradMap grads;
      policy.head.backward(cache, grad, grads);
      auto params = policy.head.named_params(true);
      opt.step(params, grads);
      epoch_loss += loss;
    }
    res.epoch_mse.push_back(epoch_loss / static_cast<double>(cfg.steps_per_epoch));
  }
  return res;
}

inline ActionVec bc_action(const BCPolicy& policy, const std::vector<double>& demo_emb,
                           const std::vector<double>& state_emb) {
  Tensor in({1, 2 * reward::kEmbedDim});
  std::copy(demo_emb.begin(), demo_emb.end(), in.data());
  std::copy(state_emb.begin(), state_emb.end(), in.data() + reward::kEmbedDim);
  const Tensor out = policy.head.forward(in, nn::Mode::eval);
  return {clamp(out.v[0], policy.lo[0], policy.hi[0]), clamp(out.v[1], policy.lo[1], policy.hi[1]),
          clamp(out.v[2], policy.lo[2], policy.hi[2])};
}

// Closed-loop BC episode over the full horizon.
inline bool run_bc_episode(const BCPolicy& policy, const WorldState& init,
                           const world::TaskSpec& task, const DomainSpec& domain,
                           const VideoClip& demo) {
  const std::size_t F = data::kEncoderFrames;
  const reward::DVDModel& enc_model = policy.enc;
  const VideoClip demo_proc = data::process_clip_eval(demo, data::BatchConfig{});
  const auto demo_emb = reward::encode(enc_model, demo_proc);

  VideoClip history;
  history.height = history.width = world::kDefaultFrameSize;
  history.frames.push_back(world::render(init, domain));
  std::vector<WorldState> states{init};
  for (int t = 0; t < world::kHorizon; ++t) {
    const VideoClip window = detail::state_window(history, history.frames.size() - 1, F);
    const auto state_emb = reward::encode(enc_model, window);
    states.push_back(world::step(states.back(), bc_action(policy, demo_emb, state_emb)));
    history.frames.push_back(world::render(states.back(), domain));
  }
  return world::eval_success(task, states);
}

inline BCPolicy train_bc_method(BenchContext& ctx, const ExperimentSpec& spec,
                                const MethodSpec& method, std::uint64_t seed) {
  const json desc{{"kind", "bc"},
                  {"train_tasks", spec.train_tasks},
                  {"robot_demos", method.robot_demos_per_task},
                  {"human_tasks", method.human_task_count},
                  {"human_demos", spec.human_demos_per_task},
                  {"pretrain", spec_to_json(spec)["pretrain"]},
                  {"seed", seed},
                  {"base_seed", spec.base_seed}};
  const std::string dir = detail::cache_dir(ctx, "bc", desc);
  namespace fs = std::filesystem;

  const data::Manifest robot =
      robot_training_data(ctx, spec.train_tasks, method.robot_demos_per_task,
                          world::hash_u64(spec.base_seed ^ (seed * 0x9e3779b9ULL) ^ 0xacu),
                          /*with_actions=*/true);
  const std::vector<int> human_tasks =
      method.human_task_count ? human_task_subset(spec, method.human_task_count)
                              : std::vector<int>{};
  const data::Manifest human =
      human_tasks.empty()
          ? data::Manifest{}
          : human_training_data(ctx, human_tasks, spec.human_demos_per_task,
                                world::hash_u64(spec.base_seed ^ (seed * 0x51eduLL) ^ 1));

  BCPolicy policy;
  policy.head = make_bc_head();
  if (fs::exists(fs::path(dir) / "encoder.dvdw")) {
    detail::log_hit(ctx, "bc", dir);
    nn::load_checkpoint((fs::path(dir) / "encoder.dvdw").string(), policy.enc.encoder);
    nn::load_checkpoint((fs::path(dir) / "head.dvdw").string(), policy.head);
    return policy;
  }

  const data::Manifest pretrain_data =
      human.records.empty() ? merge_manifests({&robot}) : merge_manifests({&human, &robot});
  reward::PretrainConfig pcfg = spec.pretrain;
  pcfg.seed = world::hash_u64(spec.base_seed ^ seed ^ 0x9e37u);
  auto pre = reward::pretrain_encoder(pretrain_data, pcfg, &ctx.store);
  policy.enc.encoder = std::move(pre.encoder);

  Rng hrng(world::hash_u64(spec.base_seed ^ seed ^ 0xbc1u));
  policy.head.init_params(hrng);
  BCConfig bcfg;
  bcfg.seed = world::hash_u64(spec.base_seed ^ seed ^ 0xbc2u);
  train_bc(policy, robot, human, bcfg, ctx.store);

  fs::create_directories(dir);
  nn::save_checkpoint((fs::path(dir) / "encoder.dvdw").string(), policy.enc.encoder);
  nn::save_checkpoint((fs::path(dir) / "head.dvdw").string(), policy.head);
  return policy;
}

// ---------------------------------------------------------------------------
// Cell evaluation
// ---------------------------------------------------------------------------
namespace detail {

// Evaluation demo seeds live in the top half of the seed space; training
// generation seeds (hash_u64 of small mixes) land anywhere, so the explicit
// high bit keeps the two ranges disjoint by construction.
inline constexpr std::uint64_t kEvalSeedBit = 0x8000000000000000ULL;

inline std::uint64_t trial_key(const ExperimentSpec& spec, int tier, int task,
                               std::uint64_t seed, std::size_t trial) {
  std::uint64_t k = world::hash_u64(spec.base_seed ^ 0xe7a1u);
  k = world::hash_u64(k ^ (std::uint64_t(tier) << 40) ^ (std::uint64_t(task) << 32) ^
                      (seed << 16) ^ trial);
  return k;
}

// Classifier-reward scorer: class probability of the target task on the
// predicted clip (not demo-conditioned).
inline planner::ScoreFn make_classifier_scorer(const TrainedMethod& tm, std::size_t class_idx) {
  return [&tm, class_idx](const WorldState&, const std::vector<std::vector<ActionVec>>&,
                          const std::vector<VideoClip>& clips) {
    std::vector<VideoClip> proc(clips.size());
    std::vector<const VideoClip*> ptrs(clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) {
      proc[i] = data::temporal_resample(clips[i], tm.model.frames);
      ptrs[i] = &proc[i];
    }
    const Tensor emb = reward::encode_batch(tm.model, ptrs);
    const Tensor probs = tm.classifier_head.forward(emb, nn::Mode::eval);
    std::vector<double> scores(clips.size());
    const std::size_t k = tm.class_tasks.size();
    for (std::size_t i = 0; i < clips.size(); ++i) scores[i] = probs.v[i * k + class_idx];
    return scores;
  };
}

}  // namespace detail

// Runs every (method, seed, tier, task) cell of the spec. Trial seeds, initial
// states, domains, and conditioning demos are shared across methods (paired).
inline ResultsTable run_cells(BenchContext& ctx, const ExperimentSpec& spec) {
  spec.validate();
  ResultsTable table;
  table.experiment = spec.name;
  table.spec_digest = spec_digest(spec);

  for (const auto& method : spec.methods) {
    for (std::uint64_t seed = 0; seed < spec.seeds; ++seed) {
      TrainedMethod tm;
      BCPolicy bc;
      if (method_uses_planner(method.kind)) tm = train_dvd_method(ctx, spec, method, seed);
      if (method.kind == "bc") bc = train_bc_method(ctx, spec, method, seed);

      std::map<int, dynamics::Predictor> tier_dyn;
      if (spec.dynamics == "learned" && method_uses_planner(method.kind))
        for (int tier : spec.eval_tiers)
          tier_dyn.emplace(tier, train_tier_dynamics(ctx, spec, tier, seed));

      for (int tier : spec.eval_tiers) {
        for (int task_id : spec.target_tasks) {
          const world::TaskSpec& task = world::task_by_id(task_id);
          Cell cell;
          cell.method = method.kind;
          cell.human_task_count = method_uses_planner(method.kind) || method.kind == "bc"
                                      ? method.human_task_count
                                      : 0;
          cell.robot_demos = method.kind == "random" ? 0 : method.robot_demos_per_task;
          cell.tier = tier;
          cell.task = task_id;
          cell.seed = seed;
          cell.trials = spec.trials;

          std::size_t class_idx = 0;
          if (method.kind == "classifier_reward") {
            const auto it =
                std::find(tm.class_tasks.begin(), tm.class_tasks.end(), task_id);
            if (it == tm.class_tasks.end()) {
              cell.not_applicable = true;  // unseen task: n/a, as in the paper's Table I
              table.cells.push_back(std::move(cell));
              continue;
            }
            class_idx = static_cast<std::size_t>(it - tm.class_tasks.begin());
          }

          for (std::size_t trial = 0; trial < spec.trials; ++trial) {
            const std::uint64_t key = detail::trial_key(spec, tier, task_id, seed, trial);
            Rng trng(world::hash_u64(key ^ 0x101u));
            const WorldState init = world::initial_state(task, trng);
            const DomainSpec domain =
                tier == 0 ? DomainSpec{} : world::sample_env_variant(tier, key);

            bool success = false;
            if (method.kind == "random") {
              std::vector<WorldState> states{init};
              for (int t = 0; t < world::kHorizon; ++t)
                states.push_back(world::step(
                    states.back(),
                    {trng.uniform(spec.plan.lo[0], spec.plan.hi[0]),
                     trng.uniform(spec.plan.lo[1], spec.plan.hi[1]),
                     trng.uniform(spec.plan.lo[2], spec.plan.hi[2])}));
              success = world::eval_success(task, states);
            } else {
              // conditioning demo from the held-out evaluation seed range
              Rng drng(world::hash_u64(key ^ 0xde30u) | detail::kEvalSeedBit);
              DomainSpec demo_domain;
              if (method.demo_source == "human") demo_domain = world::sample_human_domain(drng);
              const VideoClip demo =
                  world::scripted_demo(task, demo_domain, 0.02,
                                       world::hash_u64(key ^ 0xde31u) | detail::kEvalSeedBit)
                      .clip;
              if (method.kind == "bc") {
                success = run_bc_episode(bc, init, task, domain, demo);
              } else {
                planner::PlannerConfig pcfg = spec.plan;
                pcfg.seed = key;
                const planner::ScoreFn score =
                    method.kind == "classifier_reward"
                        ? detail::make_classifier_scorer(tm, class_idx)
                        : planner::make_dvd_scorer(tm.model, demo);
                const planner::DynamicsFn dyn =
                    spec.dynamics == "learned"
                        ? planner::make_learned_dynamics(tier_dyn.at(tier))
                        : planner::make_oracle_dynamics(domain);
                success = planner::run_episode(init, task, domain, score, dyn, pcfg).success;
              }
            }
            cell.successes += success;
          }
          table.cells.push_back(std::move(cell));
        }
      }
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// The four experiments
// ---------------------------------------------------------------------------
inline ResultsTable run_env_generalization(BenchContext& ctx, ExperimentSpec spec) {
  spec.name = "env-gen";
  if (spec.methods.empty()) {
    MethodSpec robot_only;
    robot_only.kind = "dvd_robot_only";
    robot_only.human_task_count = 0;
    MethodSpec with_human;
    with_human.kind = "dvd";
    with_human.human_task_count = 6;
    spec.methods = {robot_only, with_human};
  }
  return run_cells(ctx, spec);
}

inline ResultsTable run_task_generalization(BenchContext& ctx, ExperimentSpec spec) {
  spec.name = "task-gen";
  if (spec.train_tasks == std::vector<int>{0, 1, 2})
    spec.train_tasks = {3, 5, 8};  // opener / mover / no-motion analogues
  if (spec.human_task_pool == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11})
    spec.human_task_pool = {3, 4, 5, 6, 7, 8, 9, 10, 11};
  for (int t : spec.train_tasks)
    if (std::find(spec.target_tasks.begin(), spec.target_tasks.end(), t) != spec.target_tasks.end())
      throw SpecError("task-gen: train task " + std::to_string(t) + " is a target task");
  for (int t : spec.human_task_pool)
    if (std::find(spec.target_tasks.begin(), spec.target_tasks.end(), t) != spec.target_tasks.end())
      throw SpecError("task-gen: human pool task " + std::to_string(t) + " is a target task");
  if (spec.methods.empty()) {
    MethodSpec robot_only;
    robot_only.kind = "dvd_robot_only";
    robot_only.human_task_count = 0;
    MethodSpec with_human;
    with_human.kind = "dvd";
    with_human.human_task_count = 9;
    spec.methods = {robot_only, with_human};
  }
  if (spec.eval_tiers.size() > 1) spec.eval_tiers = {0};
  return run_cells(ctx, spec);
}

inline ResultsTable run_ablation_robot_demos(BenchContext& ctx, ExperimentSpec spec,
                                             std::vector<std::size_t> budgets = {120, 40, 20}) {
  spec.name = "ablation";
  if (spec.methods.empty()) {
    for (std::size_t b : budgets) {
      MethodSpec m;
      m.kind = "dvd";
      m.human_task_count = 6;
      m.robot_demos_per_task = b;
      spec.methods.push_back(m);
    }
  }
  return run_cells(ctx, spec);
}

inline ResultsTable run_baselines(BenchContext& ctx, ExperimentSpec spec) {
  spec.name = "baselines";
  if (spec.methods.empty()) {
    MethodSpec dvd;
    dvd.kind = "dvd";
    dvd.human_task_count = 6;
    MethodSpec random;
    random.kind = "random";
    MethodSpec bc;
    bc.kind = "bc";
    bc.human_task_count = 6;
    MethodSpec cls;
    cls.kind = "classifier_reward";
    cls.human_task_count = 6;
    spec.methods = {dvd, random, bc, cls};
  }
  return run_cells(ctx, spec);
}

// Audit: no training record carries a target-task label (task-gen hygiene).
inline bool audit_no_target_leak(const data::Manifest& training,
                                 const std::vector<int>& target_tasks) {
  for (const auto& r : training.records)
    if (std::find(target_tasks.begin(), target_tasks.end(), r.task_id) != target_tasks.end())
      return false;
  return true;
}

}  // namespace dvd::bench
