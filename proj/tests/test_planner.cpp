#include "dvd/planner.hpp"

#include <algorithm>
#include <filesystem>

#include "doctest.h"

using namespace dvd;
using namespace dvd::planner;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "dvd_planner_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// 1D toy problem on the dx dimension; dy and grip are pinned to zero.
PlannerConfig toy_config() {
  PlannerConfig cfg;
  cfg.H = 1;
  cfg.lo = {-1.0, 0.0, 0.0};
  cfg.hi = {1.0, 0.0, 0.0};
  return cfg;
}

double toy_reward(const std::vector<ActionVec>& seq) {
  const double a = seq[0].dx;
  return -(a - 0.3) * (a - 0.3);
}

// DVD model trained on drawer_close vs no_motion, shared across cases.
struct TrainedFixture {
  data::Manifest human, robot;
  data::ClipStore store;
  reward::DVDModel model;

  TrainedFixture() : model(reward::make_model()) {
    data::GenSpec hs;
    hs.task_ids = {0, 8};  // drawer_close, no_motion
    hs.demos_per_task = 12;
    hs.domain = world::Embodiment::human;
    hs.seed = 21;
    human = data::generate_dataset((test_dir() / "human").string(), hs);
    data::GenSpec rs;
    rs.task_ids = {0, 8};
    rs.demos_per_task = 20;
    rs.domain = world::Embodiment::robot;
    rs.seed = 22;
    robot = data::generate_dataset((test_dir() / "robot").string(), rs);

    reward::PretrainConfig pc;
    pc.epochs = 6;
    pc.steps_per_epoch = 30;
    pc.batch = 8;
    pc.seed = 5;
    auto pre = reward::pretrain_encoder(robot, pc, &store);
    model.encoder = std::move(pre.encoder);
    Rng hr(99);
    model.head.init_params(hr);

    reward::TrainConfig tc;
    tc.epochs = 12;
    tc.steps_per_epoch = 25;
    tc.eval_pairs = 200;
    tc.seed = 7;
    tc.early_stop_acc = 0.95;
    reward::train_dvd(model, human, robot, tc, &store);
  }
};

const TrainedFixture& trained() {
  static TrainedFixture f;
  return f;
}

}  // namespace

TEST_CASE("sample_action_seqs stays within bounds and is seeded") {
  PlannerConfig cfg;
  Rng rng(3);
  const auto seqs = sample_action_seqs(ActionDist{}, 100, 20, cfg, rng);
  REQUIRE(seqs.size() == 100);
  for (const auto& seq : seqs) {
    REQUIRE(seq.size() == 20);
    for (const auto& a : seq) {
      CHECK(std::fabs(a.dx) <= world::kActionBound);
      CHECK(std::fabs(a.dy) <= world::kActionBound);
      CHECK(std::fabs(a.grip) <= 1.0);
    }
  }
  Rng rng2(3);
  const auto again = sample_action_seqs(ActionDist{}, 100, 20, cfg, rng2);
  CHECK(seqs[0][0].dx == again[0][0].dx);
  CHECK(seqs[99][19].grip == again[99][19].grip);
}

TEST_CASE("degenerate bounds pin every action to the bound") {
  PlannerConfig cfg;
  cfg.lo = {0.01, -0.02, 1.0};
  cfg.hi = {0.01, -0.02, 1.0};
  Rng rng(1);
  for (const auto& seq : sample_action_seqs(ActionDist{}, 5, 4, cfg, rng))
    for (const auto& a : seq) {
      CHECK(a.dx == 0.01);
      CHECK(a.dy == -0.02);
      CHECK(a.grip == 1.0);
    }
}

TEST_CASE("gaussian sampling clamps to bounds") {
  PlannerConfig cfg;
  ActionDist dist;
  dist.gaussian = true;
  dist.mean.assign(2 * kActionDims, 0.02);
  dist.stddev.assign(2 * kActionDims, 10.0);  // nearly every raw draw is out of range
  Rng rng(4);
  for (const auto& seq : sample_action_seqs(dist, 50, 2, cfg, rng))
    for (const auto& a : seq) {
      CHECK(std::fabs(a.dx) <= world::kActionBound);
      CHECK(std::fabs(a.dy) <= world::kActionBound);
      CHECK(std::fabs(a.grip) <= 1.0);
    }
}

TEST_CASE("select_action_seq picks the argmax when top_k is 1") {
  Rng rng(1);
  CHECK(select_action_seq({0.9, 0.1, 0.2}, 1, rng) == 0);
  CHECK_THROWS_AS(select_action_seq({}, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(select_action_seq({0.5}, 2, rng), std::invalid_argument);
}

TEST_CASE("selection always lands in the top-k set") {
  Rng rng(9);
  std::vector<double> scores(100);
  for (auto& s : scores) s = rng.uniform(0.0, 1.0);
  const auto order = rank_by_score(scores);
  const std::vector<std::size_t> top5(order.begin(), order.begin() + 5);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t idx = select_action_seq(scores, 5, rng);
    CHECK(std::count(top5.begin(), top5.end(), idx) == 1);
    // monotone selection: chosen score >= the top_k-th order statistic
    CHECK(scores[idx] >= scores[order[4]]);
  }
}

TEST_CASE("all-equal scores give a uniform draw over the first top_k indices") {
  Rng rng(13);
  const std::vector<double> scores(100, 0.5);
  std::array<int, 5> counts{};
  for (int i = 0; i < 10000; ++i) {
    const std::size_t idx = select_action_seq(scores, 5, rng);
    REQUIRE(idx < 5);  // ties break by ascending index before truncation
    ++counts[idx];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 2000.0) * (c - 2000.0) / 2000.0;
  CHECK(chi2 < 13.277);  // chi-square df=4 critical value at p=0.01
}

TEST_CASE("cem_refit on identical elites collapses to the floor std") {
  PlannerConfig cfg = toy_config();
  std::vector<std::vector<ActionVec>> samples(30, std::vector<ActionVec>{{0.4, 0.0, 0.0}});
  std::vector<double> scores(30, 1.0);
  const ActionDist dist = cem_refit(samples, scores, 20, cfg);
  REQUIRE(dist.gaussian);
  CHECK(dist.mean[0] == doctest::Approx(0.4));
  CHECK(dist.stddev[0] == doctest::Approx(1e-3 * 2.0));  // 1e-3 of the dx range
  CHECK(dist.stddev[2] == doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(cem_refit(samples, scores, 31, cfg), std::invalid_argument);
}

TEST_CASE("two CEM iterations localize the 1D toy optimum") {
  const PlannerConfig cfg = toy_config();
  Rng rng(17);
  ActionDist dist;
  double prev_elite_mean = -1e9;
  for (int iter = 0; iter < 2; ++iter) {
    const auto samples = sample_action_seqs(dist, 100, 1, cfg, rng);
    std::vector<double> scores(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) scores[i] = toy_reward(samples[i]);
    dist = cem_refit(samples, scores, 20, cfg);
    const auto order = rank_by_score(scores);
    double elite_mean = 0.0;
    for (int e = 0; e < 20; ++e) elite_mean += scores[order[e]] / 20.0;
    CHECK(elite_mean >= prev_elite_mean);  // CEM improvement
    prev_elite_mean = elite_mean;
  }
  CHECK(std::fabs(dist.mean[0] - 0.3) < 0.05);
}

TEST_CASE("score_candidates is independent per candidate and in (0,1)") {
  reward::DVDModel model = reward::make_model();
  Rng rng(2);
  model.encoder.init_params(rng);
  model.head.init_params(rng);

  const auto& task = world::task_by_id(0);
  const world::DomainSpec domain;
  const auto demo = world::scripted_demo(task, domain, 0.02, 31).clip;
  Rng irng(5);
  world::WorldState init = world::initial_state(task, irng);
  const auto clip_a = dynamics::oracle_predict(init, std::vector<ActionVec>(20), domain);
  const auto clip_b =
      dynamics::oracle_predict(init, std::vector<ActionVec>(20, {0.01, -0.01, 0.0}), domain);

  const auto scores = score_candidates(model, demo, {clip_a, clip_b, clip_a});
  REQUIRE(scores.size() == 3);
  for (double s : scores) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
  CHECK(scores[0] == doctest::Approx(scores[2]).epsilon(1e-9));  // identical candidates

  // permuting candidates permutes scores identically
  const auto permuted = score_candidates(model, demo, {clip_b, clip_a, clip_a});
  CHECK(permuted[0] == doctest::Approx(scores[1]).epsilon(1e-9));
  CHECK(permuted[1] == doctest::Approx(scores[0]).epsilon(1e-9));
}

TEST_CASE("trained DVD ranks a successful drawer-close above no motion") {
  const auto& f = trained();
  const auto& task = world::task_by_id(0);
  const world::DomainSpec robot_domain;

  std::vector<double> diffs;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng drng(world::hash_u64(1000 + seed));
    const auto demo =
        world::scripted_demo(task, world::sample_human_domain(drng), 0.02, 500 + seed).clip;
    Rng irng(world::hash_u64(seed));
    world::WorldState init = world::initial_state(task, irng);
    const auto success_clip = world::scripted_demo(task, robot_domain, 0.02, 700 + seed).clip;
    const auto still_clip =
        dynamics::oracle_predict(init, std::vector<ActionVec>(20), robot_domain);
    const auto scores = score_candidates(f.model, demo, {success_clip, still_clip});
    diffs.push_back(scores[0] - scores[1]);
  }
  std::sort(diffs.begin(), diffs.end());
  CHECK(diffs[diffs.size() / 2] > 0.0);  // median over 20 demo seeds
}

TEST_CASE("run_episode executes rounds*H actions and is seeded") {
  const auto& task = world::task_by_id(0);
  const world::DomainSpec domain;
  Rng irng(3);
  const world::WorldState init = world::initial_state(task, irng);
  PlannerConfig cfg;
  cfg.seed = 42;
  const auto score = make_progress_scorer(task);
  const auto dyn = make_null_dynamics();

  const auto ep = run_episode(init, task, domain, score, dyn, cfg);
  CHECK(ep.states.size() == cfg.rounds * cfg.H + 1);
  REQUIRE(ep.rounds.size() == cfg.rounds);
  for (const auto& r : ep.rounds) {
    CHECK(r.actions.size() == cfg.H);
    CHECK(r.scores.size() == cfg.G);
    // chosen index sits inside the top_k pool
    const auto order = rank_by_score(r.scores);
    CHECK(r.scores[r.chosen_index] >= r.scores[order[cfg.top_k - 1]]);
  }

  const auto again = run_episode(init, task, domain, score, dyn, cfg);
  CHECK(again.success == ep.success);
  for (std::size_t r = 0; r < cfg.rounds; ++r)
    CHECK(again.rounds[r].chosen_index == ep.rounds[r].chosen_index);
  CHECK(again.states.back().gripper.x == ep.states.back().gripper.x);

  PlannerConfig bad = cfg;
  bad.top_k = cfg.G + 1;
  CHECK_THROWS_AS(run_episode(init, task, domain, score, dyn, bad), std::invalid_argument);
}

TEST_CASE("oracle progress planner clears 0.9 success on drawer_close") {
  const auto& task = world::task_by_id(0);
  const world::DomainSpec domain;  // train domain, tier 0
  const auto score = make_progress_scorer(task);
  const auto dyn = make_null_dynamics();
  int successes = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(world::hash_u64(1000 + trial));
    const world::WorldState init = world::initial_state(task, rng);
    PlannerConfig cfg;
    cfg.seed = 1000 + trial;
    successes += run_episode(init, task, domain, score, dyn, cfg).success;
  }
  CHECK(successes >= 45);
}

TEST_CASE("episode traces round-trip through disk") {
  const auto& task = world::task_by_id(0);
  const world::DomainSpec domain;
  Rng irng(8);
  const world::WorldState init = world::initial_state(task, irng);
  PlannerConfig cfg;
  cfg.G = 10;
  cfg.top_k = 2;
  cfg.elite_count = 4;
  const auto ep =
      run_episode(init, task, domain, make_progress_scorer(task), make_oracle_dynamics(domain), cfg);

  const std::string dir = (test_dir() / "trace").string();
  save_episode_trace(ep, dir);
  std::ifstream in(fs::path(dir) / "trace.json");
  nlohmann::json trace = nlohmann::json::parse(in);
  REQUIRE(trace["rounds"].size() == cfg.rounds);
  CHECK(trace["success"].get<bool>() == ep.success);
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const auto& entry = trace["rounds"][r];
    CHECK(entry["chosen_index"].get<std::size_t>() == ep.rounds[r].chosen_index);
    const auto& summary = entry["candidate_scores_summary"];
    CHECK(summary["min"].get<double>() <= summary["median"].get<double>());
    CHECK(summary["median"].get<double>() <= summary["max"].get<double>());
    const auto clip =
        data::read_clip((fs::path(dir) / ("round" + std::to_string(r) + ".dvdc")).string());
    CHECK(clip.frames.size() == cfg.H + 1);  // context frame plus H predicted frames
  }
}
