#pragma once

// Visual MPC: sample candidate action sequences, roll them through a dynamics
// model, score the predicted clips against a human demo, execute the best.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dvd/data.hpp"
#include "dvd/dynamics.hpp"
#include "dvd/reward.hpp"
#include "dvd/world.hpp"
#include "json.hpp"

namespace dvd::planner {

using nlohmann::json;
using world::ActionVec;
using world::DomainSpec;
using world::VideoClip;
using world::WorldState;

inline constexpr std::size_t kActionDims = 3;  // dx, dy, grip

struct PlannerConfig {
  std::size_t G = 100;         // candidates per round
  std::size_t H = 20;          // planning horizon
  std::size_t rounds = 3;      // planning rounds per trial
  std::size_t top_k = 5;       // selection pool
  std::size_t cem_iters = 1;   // 1 = random shooting
  std::size_t elite_count = 20;
  std::array<double, kActionDims> lo{-world::kActionBound, -world::kActionBound, -1.0};
  std::array<double, kActionDims> hi{world::kActionBound, world::kActionBound, 1.0};
  std::uint64_t seed = 0;

  void validate() const {
    if (G == 0 || H == 0 || rounds == 0) throw std::invalid_argument("G, H, rounds must be > 0");
    if (top_k == 0 || top_k > G) throw std::invalid_argument("top_k must be in [1, G]");
    if (cem_iters == 0) throw std::invalid_argument("cem_iters must be >= 1");
    if (elite_count == 0 || elite_count > G)
      throw std::invalid_argument("elite_count must be in [1, G]");
    for (std::size_t d = 0; d < kActionDims; ++d)
      if (lo[d] > hi[d]) throw std::invalid_argument("action bounds inverted");
  }
};

struct PlanResult {
  std::vector<ActionVec> actions;  // the chosen H-step sequence
  std::size_t chosen_index = 0;
  std::vector<double> scores;      // all candidate scores, final iteration
  VideoClip predicted;             // predicted clip of the chosen candidate
};

// Per-dimension sampling distribution over H-step sequences. Uniform within
// bounds on the first iteration, a clamped diagonal Gaussian after refitting.
struct ActionDist {
  bool gaussian = false;
  std::vector<double> mean;    // H * kActionDims, [t * 3 + d]
  std::vector<double> stddev;  // same layout
};

inline std::vector<std::vector<ActionVec>> sample_action_seqs(const ActionDist& dist,
                                                              std::size_t G, std::size_t H,
                                                              const PlannerConfig& cfg,
                                                              Rng& rng) {
  if (dist.gaussian && (dist.mean.size() != H * kActionDims || dist.stddev.size() != H * kActionDims))
    throw std::invalid_argument("sample_action_seqs: distribution does not match horizon");
  std::vector<std::vector<ActionVec>> seqs(G);
  for (std::size_t g = 0; g < G; ++g) {
    seqs[g].resize(H);
    for (std::size_t t = 0; t < H; ++t) {
      double v[kActionDims];
      for (std::size_t d = 0; d < kActionDims; ++d) {
        if (dist.gaussian) {
          const double raw = dist.mean[t * kActionDims + d] +
                             dist.stddev[t * kActionDims + d] * rng.normal();
          v[d] = clamp(raw, cfg.lo[d], cfg.hi[d]);
        } else {
          v[d] = rng.uniform(cfg.lo[d], cfg.hi[d]);
        }
      }
      seqs[g][t] = {v[0], v[1], v[2]};
    }
  }
  return seqs;
}

// Indices sorted by descending score; ties broken by ascending index.
inline std::vector<std::size_t> rank_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Uniform draw over the top_k indices by score.
inline std::size_t select_action_seq(const std::vector<double>& scores, std::size_t top_k,
                                     Rng& rng) {
  if (scores.empty()) throw std::invalid_argument("select_action_seq: empty scores");
  if (top_k == 0 || top_k > scores.size())
    throw std::invalid_argument("select_action_seq: top_k out of range");
  const auto order = rank_by_score(scores);
  return order[rng.uniform_int(top_k)];
}

// Fit a per-dimension Gaussian to the elite_count highest-scoring samples.
// Stddev is floored at 1e-3 of the action range to prevent collapse.
inline ActionDist cem_refit(const std::vector<std::vector<ActionVec>>& samples,
                            const std::vector<double>& scores, std::size_t elite_count,
                            const PlannerConfig& cfg) {
  if (samples.empty() || samples.size() != scores.size())
    throw std::invalid_argument("cem_refit: samples/scores mismatch");
  if (elite_count == 0 || elite_count > samples.size())
    throw std::invalid_argument("cem_refit: elite_count out of range");
  const std::size_t H = samples[0].size();
  const auto order = rank_by_score(scores);

  ActionDist dist;
  dist.gaussian = true;
  dist.mean.assign(H * kActionDims, 0.0);
  dist.stddev.assign(H * kActionDims, 0.0);
  for (std::size_t e = 0; e < elite_count; ++e) {
    const auto& seq = samples[order[e]];
    for (std::size_t t = 0; t < H; ++t) {
      const double v[kActionDims] = {seq[t].dx, seq[t].dy, seq[t].grip};
      for (std::size_t d = 0; d < kActionDims; ++d) dist.mean[t * kActionDims + d] += v[d];
    }
  }
  for (double& m : dist.mean) m /= static_cast<double>(elite_count);
  for (std::size_t e = 0; e < elite_count; ++e) {
    const auto& seq = samples[order[e]];
    for (std::size_t t = 0; t < H; ++t) {
      const double v[kActionDims] = {seq[t].dx, seq[t].dy, seq[t].grip};
      for (std::size_t d = 0; d < kActionDims; ++d) {
        const double dev = v[d] - dist.mean[t * kActionDims + d];
        dist.stddev[t * kActionDims + d] += dev * dev;
      }
    }
  }
  for (std::size_t t = 0; t < H; ++t)
    for (std::size_t d = 0; d < kActionDims; ++d) {
      double& s = dist.stddev[t * kActionDims + d];
      s = std::sqrt(s / static_cast<double>(elite_count));
      s = std::max(s, 1e-3 * (cfg.hi[d] - cfg.lo[d]));
    }
  return dist;
}

// ---------------------------------------------------------------------------
// Candidate rollout and scoring hooks
// ---------------------------------------------------------------------------
// Dynamics hook: (round start state, executed frame history, candidate action
// sequence) -> predicted clip of 1 context frame + H predicted frames.
using DynamicsFn = std::function<VideoClip(
    const WorldState&, const std::vector<std::vector<double>>&, const std::vector<ActionVec>&)>;

// Scoring hook: (round start state, candidate sequences, predicted clips) ->
// one score per candidate, higher is better. The DVD scorer ignores the state
// and actions; oracle stubs used for ceiling measurements ignore the clips.
using ScoreFn = std::function<std::vector<double>(const WorldState&,
                                                  const std::vector<std::vector<ActionVec>>&,
                                                  const std::vector<VideoClip>&)>;

// Ground-truth dynamics: re-renders the simulator from the round start state.
inline DynamicsFn make_oracle_dynamics(const DomainSpec& domain) {
  return [domain](const WorldState& start, const std::vector<std::vector<double>>&,
                  const std::vector<ActionVec>& actions) {
    return dynamics::oracle_predict(start, actions, domain);
  };
}

// Learned dynamics: conditions on the trailing executed frames (repeating the
// earliest frame when history is shorter than the context window).
inline DynamicsFn make_learned_dynamics(const dynamics::Predictor& p) {
  return [&p](const WorldState&, const std::vector<std::vector<double>>& history,
              const std::vector<ActionVec>& actions) {
    if (history.empty()) throw std::invalid_argument("learned dynamics: empty frame history");
    const std::size_t C = p.cfg.context_frames;
    std::vector<std::vector<double>> ctx;
    for (std::size_t i = 0; i < C; ++i) {
      const std::size_t back = std::min(C - 1 - i, history.size() - 1);
      ctx.push_back(history[history.size() - 1 - back]);
    }
    VideoClip clip;
    clip.height = clip.width = p.cfg.frame_size;
    clip.frames.push_back(history.back());
    for (auto& f : dynamics::predict(p, ctx, actions)) clip.frames.push_back(std::move(f));
    return clip;
  };
}

// Candidate clips are temporally resampled to the model's frame count; the
// demo is center-cropped (no augmentation) and resampled once up front.
inline std::vector<double> score_candidates(const reward::DVDModel& model, const VideoClip& demo,
                                            const std::vector<VideoClip>& predicted) {
  const VideoClip demo_proc = data::temporal_resample(data::center_crop(demo), model.frames);
  const auto hd = reward::encode(model, demo_proc);
  std::vector<VideoClip> proc(predicted.size());
  std::vector<const VideoClip*> ptrs(predicted.size());
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    proc[i] = data::temporal_resample(predicted[i], model.frames);
    ptrs[i] = &proc[i];
  }
  std::vector<double> scores(predicted.size());
  const Tensor emb = reward::encode_batch(model, ptrs);
  for (std::size_t i = 0; i < predicted.size(); ++i)
    scores[i] = reward::score_embed(model, emb.data() + i * reward::kEmbedDim, hd.data());
  return scores;
}

inline ScoreFn make_dvd_scorer(const reward::DVDModel& model, VideoClip demo) {
  return [&model, demo = std::move(demo)](const WorldState&,
                                          const std::vector<std::vector<ActionVec>>&,
                                          const std::vector<VideoClip>& clips) {
    return score_candidates(model, demo, clips);
  };
}

// Ceiling stub: scores a candidate by simulating its latent rollout and
// reporting shaped task progress. Never touches pixels.
inline ScoreFn make_progress_scorer(const world::TaskSpec& task) {
  return [task](const WorldState& start, const std::vector<std::vector<ActionVec>>& cands,
                const std::vector<VideoClip>&) {
    std::vector<double> scores(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i) {
      WorldState s = start;
      for (const auto& a : cands[i]) s = world::step(s, a);
      scores[i] = world::task_progress(task, start, s);
    }
    return scores;
  };
}

// Companion to the progress scorer: emits only the context frame so planning
// rounds skip candidate rendering entirely.
inline DynamicsFn make_null_dynamics() {
  return [](const WorldState&, const std::vector<std::vector<double>>& history,
            const std::vector<ActionVec>&) {
    VideoClip clip;
    clip.frames.push_back(history.back());
    return clip;
  };
}

// One planning round: cem_iters sampling iterations (uniform first, refit
// Gaussians after), then a uniform draw over the top_k of the final scores.
inline PlanResult plan_round(const WorldState& start,
                             const std::vector<std::vector<double>>& history,
                             const ScoreFn& score, const DynamicsFn& dynamics,
                             const PlannerConfig& cfg, Rng& rng) {
  ActionDist dist;
  std::vector<std::vector<ActionVec>> samples;
  std::vector<VideoClip> clips;
  std::vector<double> scores;
  for (std::size_t iter = 0; iter < cfg.cem_iters; ++iter) {
    samples = sample_action_seqs(dist, cfg.G, cfg.H, cfg, rng);
    clips.clear();
    for (const auto& seq : samples) clips.push_back(dynamics(start, history, seq));
    scores = score(start, samples, clips);
    if (scores.size() != samples.size())
      throw std::runtime_error("plan_round: scorer returned wrong count");
    if (iter + 1 < cfg.cem_iters) dist = cem_refit(samples, scores, cfg.elite_count, cfg);
  }
  PlanResult res;
  res.chosen_index = select_action_seq(scores, cfg.top_k, rng);
  res.actions = samples[res.chosen_index];
  res.predicted = std::move(clips[res.chosen_index]);
  res.scores = std::move(scores);
  return res;
}

// ---------------------------------------------------------------------------
// Closed-loop episode: plan, execute H real steps, replan.
// ---------------------------------------------------------------------------
struct EpisodeResult {
  std::vector<WorldState> states;  // rounds * H + 1 entries
  bool success = false;
  std::vector<PlanResult> rounds;
};

inline EpisodeResult run_episode(const WorldState& init, const world::TaskSpec& task,
                                 const DomainSpec& domain, const ScoreFn& score,
                                 const DynamicsFn& dynamics, const PlannerConfig& cfg) {
  cfg.validate();
  Rng rng(world::hash_u64(cfg.seed ^ 0x9a11u));
  EpisodeResult res;
  res.states.push_back(init);
  std::vector<std::vector<double>> history{world::render(init, domain)};
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    PlanResult plan = plan_round(res.states.back(), history, score, dynamics, cfg, rng);
    for (const auto& a : plan.actions) {
      res.states.push_back(world::step(res.states.back(), a));
      history.push_back(world::render(res.states.back(), domain));
    }
    res.rounds.push_back(std::move(plan));
  }
  res.success = world::eval_success(task, res.states);
  return res;
}

// ---------------------------------------------------------------------------
// Trace persistence: predicted clips plus a JSON score summary.
// ---------------------------------------------------------------------------
inline void save_episode_trace(const EpisodeResult& episode, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json rounds = json::array();
  for (std::size_t r = 0; r < episode.rounds.size(); ++r) {
    const PlanResult& plan = episode.rounds[r];
    std::vector<double> sorted = plan.scores;
    std::sort(sorted.begin(), sorted.end());
    json entry;
    entry["round"] = r;
    entry["candidate_scores_summary"] = {{"min", sorted.front()},
                                         {"median", sorted[sorted.size() / 2]},
                                         {"max", sorted.back()}};
    entry["chosen_index"] = plan.chosen_index;
    entry["chosen_score"] = plan.scores[plan.chosen_index];
    rounds.push_back(std::move(entry));
    data::write_clip(plan.predicted,
                     (fs::path(dir) / ("round" + std::to_string(r) + ".dvdc")).string());
  }
  json trace;
  trace["rounds"] = std::move(rounds);
  trace["success"] = episode.success;
  std::ofstream out(fs::path(dir) / "trace.json");
  out << trace.dump(2) << "\n";
}

}  // namespace dvd::planner
