#pragma once

// Deterministic 2D tabletop simulator: two embodiments (robot gripper /
// human hand), parameterized visual domain shift, scripted demonstrations
// and ground-truth task predicates on the latent state.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvd/common.hpp"

namespace dvd::world {

inline constexpr int kHorizon = 60;          // episode horizon T
inline constexpr double kActionBound = 0.02; // per-axis action magnitude
inline constexpr double kHandleRadius = 0.06;
inline constexpr std::size_t kDefaultFrameSize = 32;
inline constexpr std::size_t kNumDistractorSlots = 4;
inline constexpr std::size_t kNumDistractors = 3;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::sqrt(x * x + y * y); }
};

inline double dist(Vec2 a, Vec2 b) { return (a - b).norm(); }

enum class Embodiment { robot, human };

enum class PredicateKind {
  drawer_close,
  drawer_open,
  faucet_right,
  faucet_left,
  cup_away,
  cup_toward,
  push_left,
  push_right,
  no_motion,
  lift_up,
  move_down,
  poke,
};

inline const char* predicate_name(PredicateKind k) {
  switch (k) {
    case PredicateKind::drawer_close: return "drawer_close";
    case PredicateKind::drawer_open: return "drawer_open";
    case PredicateKind::faucet_right: return "faucet_right";
    case PredicateKind::faucet_left: return "faucet_left";
    case PredicateKind::cup_away: return "cup_away";
    case PredicateKind::cup_toward: return "cup_toward";
    case PredicateKind::push_left: return "push_left";
    case PredicateKind::push_right: return "push_right";
    case PredicateKind::no_motion: return "no_motion";
    case PredicateKind::lift_up: return "lift_up";
    case PredicateKind::move_down: return "move_down";
    case PredicateKind::poke: return "poke";
  }
  return "?";
}

inline PredicateKind predicate_from_name(const std::string& s) {
  for (int i = 0; i < 12; ++i) {
    auto k = static_cast<PredicateKind>(i);
    if (s == predicate_name(k)) return k;
  }
  throw std::invalid_argument("unknown predicate kind: " + s);
}

struct TaskSpec {
  int task_id = 0;
  std::string name;
  PredicateKind predicate_kind = PredicateKind::no_motion;
  double threshold = 0.0;
};

// Canonical scene geometry. Dynamics always use these latent positions;
// DomainSpec affects rendering only.
inline constexpr Vec2 kDrawerBase{0.30, 0.26};      // cabinet center
inline constexpr double kDrawerDepth = 0.07;        // base-to-front offset
inline constexpr double kDrawerHalfWidth = 0.08;
inline constexpr Vec2 kFaucetBase{0.70, 0.28};
inline constexpr Vec2 kMachinePos{0.70, 0.72};
inline constexpr Vec2 kCupHome{0.58, 0.72};
inline constexpr Vec2 kGripperHome{0.50, 0.50};
inline constexpr double kDrawerMax = 0.10;
inline constexpr double kFaucetMax = 0.05;

inline constexpr std::array<Vec2, kNumDistractorSlots> kDistractorSlots{
    Vec2{0.12, 0.50}, Vec2{0.50, 0.12}, Vec2{0.88, 0.50}, Vec2{0.14, 0.86}};

struct WorldState {
  Vec2 gripper = kGripperHome;
  bool grip_closed = false;
  double drawer_openness = 0.07;  // [0, 0.10]
  double faucet_angle = 0.0;      // [-0.05, 0.05], horizontal handle offset
  Vec2 cup = kCupHome;
  Vec2 machine = kMachinePos;     // static
  std::vector<Vec2> distractors{kDistractorSlots[0], kDistractorSlots[1], kDistractorSlots[2]};
  int time = 0;
};

struct ActionVec {
  double dx = 0.0;
  double dy = 0.0;
  double grip = 0.0;  // >0 closes, <0 opens, 0 keeps
};

struct ViewTransform {
  double rotation = 0.0;  // radians, [-0.35, 0.35]
  Vec2 translation{0.0, 0.0};
  double scale = 1.0;     // [0.8, 1.2]
  bool identity() const {
    return rotation == 0.0 && translation.x == 0.0 && translation.y == 0.0 && scale == 1.0;
  }
};

struct DomainSpec {
  Embodiment embodiment = Embodiment::robot;
  std::uint32_t palette_id = 0;
  ViewTransform view;
  std::array<std::size_t, kNumDistractorSlots> arrangement{0, 1, 2, 3};
  std::uint32_t texture_seed = 0;

  bool arrangement_identity() const {
    for (std::size_t i = 0; i < kNumDistractorSlots; ++i)
      if (arrangement[i] != i) return false;
    return true;
  }
};

struct VideoClip {
  std::size_t height = kDefaultFrameSize;
  std::size_t width = kDefaultFrameSize;
  std::vector<std::vector<double>> frames;  // HWC interleaved, values in [0,1]
  int task_id = -1;                         // -1 = absent
  Embodiment domain = Embodiment::robot;
  int env_tier = 0;
};

struct HorizonExceeded : std::runtime_error {
  HorizonExceeded() : std::runtime_error("step past episode horizon") {}
};
struct UnsupportedTask : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Vec2 drawer_handle(const WorldState& s) {
  return {kDrawerBase.x, kDrawerBase.y + kDrawerDepth + s.drawer_openness};
}

inline Vec2 faucet_handle(const WorldState& s) {
  return {kFaucetBase.x + s.faucet_angle, kFaucetBase.y};
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------
inline WorldState step(const WorldState& state, const ActionVec& action) {
  if (state.time >= kHorizon) throw HorizonExceeded();
  const double dx = clamp(action.dx, -kActionBound, kActionBound);
  const double dy = clamp(action.dy, -kActionBound, kActionBound);
  WorldState s = state;
  // contact is evaluated at the pre-move gripper position
  if (dist(state.gripper, drawer_handle(state)) <= kHandleRadius)
    s.drawer_openness = clamp(state.drawer_openness + dy, 0.0, kDrawerMax);
  if (dist(state.gripper, faucet_handle(state)) <= kHandleRadius)
    s.faucet_angle = clamp(state.faucet_angle + dx, -kFaucetMax, kFaucetMax);
  const double cup_d = dist(state.gripper, state.cup);
  if (cup_d <= kHandleRadius && cup_d > 1e-9) {
    // the cup is pushed, never pulled: it moves radially away from the
    // gripper by the motion component directed at it
    const Vec2 u = (state.cup - state.gripper) * (1.0 / cup_d);
    const double push = std::max(0.0, dx * u.x + dy * u.y);
    s.cup.x = clamp(state.cup.x + u.x * push, 0.0, 1.0);
    s.cup.y = clamp(state.cup.y + u.y * push, 0.0, 1.0);
  }
  s.gripper.x = clamp(state.gripper.x + dx, 0.0, 1.0);
  s.gripper.y = clamp(state.gripper.y + dy, 0.0, 1.0);
  if (action.grip > 0.0)
    s.grip_closed = true;
  else if (action.grip < 0.0)
    s.grip_closed = false;
  s.time = state.time + 1;
  return s;
}

// ---------------------------------------------------------------------------
// Palettes & rendering
// ---------------------------------------------------------------------------
struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};

struct Palette {
  Rgb background, drawer_body, drawer_front, handle, faucet, machine, cup, distractor, sprite;
};

inline std::uint64_t hash_u64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double hash01(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  const std::uint64_t h = hash_u64(a * 0x100000001b3ULL ^ hash_u64(b) ^ hash_u64(c) * 31);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline Palette make_palette(std::uint32_t palette_id, Embodiment emb) {
  Palette p;
  if (palette_id == 0) {
    p.background = {0.09, 0.10, 0.12};
    p.drawer_body = {0.42, 0.26, 0.14};
    p.drawer_front = {0.62, 0.40, 0.20};
    p.handle = {0.92, 0.82, 0.30};
    p.faucet = {0.55, 0.60, 0.90};
    p.machine = {0.80, 0.18, 0.18};
    p.cup = {0.20, 0.72, 0.88};
    p.distractor = {0.45, 0.48, 0.50};
  } else {
    Rng rng(0xD1D0'0000ULL + palette_id);
    auto bright = [&rng]() -> Rgb {
      return {rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)};
    };
    p.background = {rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.3)};
    p.drawer_body = bright();
    p.drawer_front = bright();
    p.handle = bright();
    p.faucet = bright();
    p.machine = bright();
    p.cup = bright();
    p.distractor = bright();
  }
  if (emb == Embodiment::robot) {
    p.sprite = {0.78, 0.80, 0.85};  // the robot always looks the same
  } else if (palette_id == 0) {
    p.sprite = {0.85, 0.62, 0.45};
  } else {
    Rng rng(0x5C1B'0000ULL + palette_id);
    const double r = rng.uniform(0.5, 0.95);
    p.sprite = {r, r * rng.uniform(0.55, 0.8), r * rng.uniform(0.3, 0.6)};
  }
  return p;
}

namespace detail {

inline double coverage(double signed_inside, double edge) {
  // signed_inside > 0 means inside the shape; linear anti-aliasing ramp
  return clamp(signed_inside / edge + 0.5, 0.0, 1.0);
}

inline double rect_cov(Vec2 p, Vec2 center, double hw, double hh, double edge) {
  const double ix = hw - std::fabs(p.x - center.x);
  const double iy = hh - std::fabs(p.y - center.y);
  return coverage(ix, edge) * coverage(iy, edge);
}

inline double disk_cov(Vec2 p, Vec2 center, double radius, double edge) {
  return coverage(radius - dist(p, center), edge);
}

inline void blend(Rgb& dst, const Rgb& src, double a) {
  dst.r += (src.r - dst.r) * a;
  dst.g += (src.g - dst.g) * a;
  dst.b += (src.b - dst.b) * a;
}

inline Rgb scene_color(Vec2 p, const WorldState& s, const DomainSpec& d, const Palette& pal,
                       double edge) {
  Rgb c = pal.background;
  // background texture: coarse per-cell brightness noise
  {
    const auto cx = static_cast<std::int64_t>(std::floor(p.x * 8.0));
    const auto cy = static_cast<std::int64_t>(std::floor(p.y * 8.0));
    const double n = (hash01(d.texture_seed, static_cast<std::uint64_t>(cx + 64),
                             static_cast<std::uint64_t>(cy + 64)) -
                      0.5) *
                     0.08;
    c.r = clamp(c.r + n, 0.0, 1.0);
    c.g = clamp(c.g + n, 0.0, 1.0);
    c.b = clamp(c.b + n, 0.0, 1.0);
  }
  // distractors at arranged slots
  for (std::size_t i = 0; i < kNumDistractors; ++i) {
    const Vec2 slot = kDistractorSlots[d.arrangement[i]];
    blend(c, pal.distractor, disk_cov(p, slot, 0.030, edge));
  }
  // coffee machine
  blend(c, pal.machine, rect_cov(p, s.machine, 0.055, 0.055, edge));
  blend(c, pal.handle, rect_cov(p, {s.machine.x, s.machine.y - 0.035}, 0.035, 0.012, edge));
  // drawer: cabinet body, dark cavity sized by openness, sliding front + knob
  blend(c, pal.drawer_body, rect_cov(p, kDrawerBase, kDrawerHalfWidth, 0.050, edge));
  const double front_y = kDrawerBase.y + kDrawerDepth + s.drawer_openness;
  blend(c, {0.02, 0.02, 0.02},
        rect_cov(p, {kDrawerBase.x, (kDrawerBase.y + 0.05 + front_y - 0.018) * 0.5},
                 kDrawerHalfWidth - 0.01, (front_y - 0.018 - kDrawerBase.y - 0.05) * 0.5 + 0.002,
                 edge));
  blend(c, pal.drawer_front, rect_cov(p, {kDrawerBase.x, front_y}, kDrawerHalfWidth, 0.018, edge));
  blend(c, pal.handle, rect_cov(p, {kDrawerBase.x, front_y}, 0.028, 0.008, edge));
  // faucet: base post + spout + handle (horizontal offset amplified x3)
  blend(c, pal.faucet, rect_cov(p, {kFaucetBase.x, kFaucetBase.y + 0.035}, 0.016, 0.045, edge));
  blend(c, pal.faucet, rect_cov(p, {kFaucetBase.x, kFaucetBase.y - 0.005}, 0.050, 0.012, edge));
  blend(c, pal.handle,
        disk_cov(p, {kFaucetBase.x + s.faucet_angle * 3.0, kFaucetBase.y - 0.03}, 0.022, edge));
  // cup
  blend(c, pal.cup, disk_cov(p, s.cup, 0.034, edge));
  blend(c, pal.background, disk_cov(p, {s.cup.x, s.cup.y - 0.012}, 0.014, edge));
  // embodiment sprite on top, confined to a 0.08 radius around the gripper
  const Vec2 g = s.gripper;
  if (d.embodiment == Embodiment::robot) {
    blend(c, pal.sprite, rect_cov(p, {g.x, g.y - 0.015}, 0.035, 0.025, edge));
    const double gap = s.grip_closed ? 0.012 : 0.026;
    const Rgb finger{pal.sprite.r * 0.55, pal.sprite.g * 0.55, pal.sprite.b * 0.6};
    blend(c, finger, rect_cov(p, {g.x - gap, g.y + 0.022}, 0.008, 0.022, edge));
    blend(c, finger, rect_cov(p, {g.x + gap, g.y + 0.022}, 0.008, 0.022, edge));
  } else {
    // hand: palm blob + four fingers fanned downward
    blend(c, pal.sprite, disk_cov(p, {g.x, g.y - 0.010}, 0.033, edge));
    const double curl = s.grip_closed ? 0.016 : 0.030;
    for (int f = 0; f < 4; ++f) {
      const double fx = g.x - 0.024 + 0.016 * f;
      blend(c, pal.sprite, disk_cov(p, {fx, g.y + curl}, 0.011, edge));
    }
    blend(c, pal.sprite, disk_cov(p, {g.x - 0.034, g.y + 0.002}, 0.012, edge));  // thumb
  }
  return c;
}

}  // namespace detail

inline std::vector<double> render(const WorldState& state, const DomainSpec& domain,
                                  std::size_t h_px = kDefaultFrameSize,
                                  std::size_t w_px = kDefaultFrameSize) {
  if (h_px < 16 || w_px < 16) throw std::invalid_argument("render: frame size must be >= 16");
  const Palette pal = make_palette(domain.palette_id, domain.embodiment);
  const ViewTransform& v = domain.view;
  const double cosr = std::cos(-v.rotation), sinr = std::sin(-v.rotation);
  const double edge = 1.0 / (static_cast<double>(std::min(h_px, w_px)) * v.scale);
  std::vector<double> frame(h_px * w_px * 3);
  for (std::size_t i = 0; i < h_px; ++i) {
    for (std::size_t j = 0; j < w_px; ++j) {
      const Vec2 q{(static_cast<double>(j) + 0.5) / static_cast<double>(w_px),
                   (static_cast<double>(i) + 0.5) / static_cast<double>(h_px)};
      // invert the scene->image view transform
      const Vec2 rel{(q.x - 0.5 - v.translation.x) / v.scale,
                     (q.y - 0.5 - v.translation.y) / v.scale};
      const Vec2 p{0.5 + cosr * rel.x - sinr * rel.y, 0.5 + sinr * rel.x + cosr * rel.y};
      const Rgb c = detail::scene_color(p, state, domain, pal, edge);
      // 8-bit quantization so stored clips round-trip bit-exactly
      double* px = frame.data() + (i * w_px + j) * 3;
      px[0] = std::round(clamp(c.r, 0.0, 1.0) * 255.0) / 255.0;
      px[1] = std::round(clamp(c.g, 0.0, 1.0) * 255.0) / 255.0;
      px[2] = std::round(clamp(c.b, 0.0, 1.0) * 255.0) / 255.0;
    }
  }
  return frame;
}

inline std::pair<VideoClip, std::vector<WorldState>> rollout(
    const WorldState& init, const std::vector<ActionVec>& actions, const DomainSpec& domain,
    std::size_t frame_size = kDefaultFrameSize) {
  if (actions.size() > static_cast<std::size_t>(kHorizon))
    throw std::invalid_argument("rollout: more actions than the episode horizon");
  VideoClip clip;
  clip.height = clip.width = frame_size;
  clip.domain = domain.embodiment;
  std::vector<WorldState> states{init};
  clip.frames.push_back(render(init, domain, frame_size, frame_size));
  for (const auto& a : actions) {
    states.push_back(step(states.back(), a));
    clip.frames.push_back(render(states.back(), domain, frame_size, frame_size));
  }
  return {std::move(clip), std::move(states)};
}

// ---------------------------------------------------------------------------
// Task registry
// ---------------------------------------------------------------------------
inline const std::vector<TaskSpec>& task_registry() {
  static const std::vector<TaskSpec> reg = [] {
    std::vector<TaskSpec> t;
    auto add = [&t](PredicateKind k, double thr) {
      t.push_back({static_cast<int>(t.size()), predicate_name(k), k, thr});
    };
    add(PredicateKind::drawer_close, 0.05);
    add(PredicateKind::faucet_right, 0.01);
    add(PredicateKind::cup_away, 0.07);
    add(PredicateKind::drawer_open, 0.05);
    add(PredicateKind::faucet_left, 0.01);
    add(PredicateKind::cup_toward, 0.10);
    add(PredicateKind::push_left, 0.05);
    add(PredicateKind::push_right, 0.05);
    add(PredicateKind::no_motion, 0.005);
    add(PredicateKind::lift_up, 0.15);
    add(PredicateKind::move_down, 0.15);
    add(PredicateKind::poke, 0.015);
    return t;
  }();
  return reg;
}

inline const TaskSpec& task_by_id(int id) {
  const auto& reg = task_registry();
  if (id < 0 || static_cast<std::size_t>(id) >= reg.size())
    throw std::invalid_argument("unknown task id " + std::to_string(id));
  return reg[static_cast<std::size_t>(id)];
}

// The three target tasks (drawer close / faucet right / cup toward machine).
inline std::vector<int> target_task_ids() { return {0, 1, 2}; }

// Task-conditioned initial state with a small seeded jitter.
inline WorldState initial_state(const TaskSpec& task, Rng& rng) {
  WorldState s;
  s.gripper.x = kGripperHome.x + rng.uniform(-0.02, 0.02);
  s.gripper.y = kGripperHome.y + rng.uniform(-0.02, 0.02);
  s.cup.y = kCupHome.y + rng.uniform(-0.015, 0.015);
  switch (task.predicate_kind) {
    case PredicateKind::drawer_open:
      s.drawer_openness = 0.03;
      break;
    case PredicateKind::cup_toward:
      s.cup.x = s.machine.x - 0.06;  // starts close to the machine
      break;
    default:
      break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Success predicates (pure function of first and last latent states)
// ---------------------------------------------------------------------------
inline bool eval_success(const TaskSpec& task, const std::vector<WorldState>& states) {
  if (states.empty()) throw std::invalid_argument("eval_success: empty state sequence");
  const WorldState& a = states.front();
  const WorldState& z = states.back();
  switch (task.predicate_kind) {
    case PredicateKind::drawer_close:
      return z.drawer_openness < task.threshold;
    case PredicateKind::drawer_open:
      return z.drawer_openness > task.threshold;
    case PredicateKind::faucet_right:
      return z.faucet_angle - a.faucet_angle > task.threshold;
    case PredicateKind::faucet_left:
      return a.faucet_angle - z.faucet_angle > task.threshold;
    case PredicateKind::cup_away:
      return dist(z.cup, z.machine) < task.threshold;
    case PredicateKind::cup_toward:
      return dist(z.cup, z.machine) > task.threshold;
    case PredicateKind::push_left:
      return a.cup.x - z.cup.x > task.threshold;
    case PredicateKind::push_right:
      return z.cup.x - a.cup.x > task.threshold;
    case PredicateKind::no_motion:
      return std::fabs(z.drawer_openness - a.drawer_openness) < task.threshold &&
             std::fabs(z.faucet_angle - a.faucet_angle) < task.threshold &&
             dist(z.cup, a.cup) < task.threshold;
    case PredicateKind::lift_up:
      return a.gripper.y - z.gripper.y > task.threshold;
    case PredicateKind::move_down:
      return z.gripper.y - a.gripper.y > task.threshold;
    case PredicateKind::poke: {
      const double d = dist(z.cup, a.cup);
      return d > task.threshold && d < 0.05;
    }
  }
  return false;
}

// Shaped scalar progress measure used by the planner-ceiling oracle: larger is
// better, combines proximity to the relevant handle with task progress.
inline double task_progress(const TaskSpec& task, const WorldState& init, const WorldState& cur) {
  auto approach = [&cur](Vec2 target) { return -dist(cur.gripper, target); };
  switch (task.predicate_kind) {
    case PredicateKind::drawer_close:
      return 10.0 * (init.drawer_openness - cur.drawer_openness) + approach(drawer_handle(cur));
    case PredicateKind::drawer_open:
      return 10.0 * (cur.drawer_openness - init.drawer_openness) + approach(drawer_handle(cur));
    case PredicateKind::faucet_right:
      return 10.0 * (cur.faucet_angle - init.faucet_angle) + approach(faucet_handle(cur));
    case PredicateKind::faucet_left:
      return 10.0 * (init.faucet_angle - cur.faucet_angle) + approach(faucet_handle(cur));
    case PredicateKind::cup_away:
      return 10.0 * (dist(init.cup, init.machine) - dist(cur.cup, cur.machine)) +
             approach(cur.cup);
    case PredicateKind::cup_toward:
      return 10.0 * (dist(cur.cup, cur.machine) - dist(init.cup, init.machine)) +
             approach(cur.cup);
    case PredicateKind::push_left:
      return 10.0 * (init.cup.x - cur.cup.x) + approach(cur.cup);
    case PredicateKind::push_right:
      return 10.0 * (cur.cup.x - init.cup.x) + approach(cur.cup);
    case PredicateKind::no_motion:
      return -10.0 * (std::fabs(cur.drawer_openness - init.drawer_openness) +
                      std::fabs(cur.faucet_angle - init.faucet_angle) + dist(cur.cup, init.cup));
    case PredicateKind::lift_up:
      return init.gripper.y - cur.gripper.y;
    case PredicateKind::move_down:
      return cur.gripper.y - init.gripper.y;
    case PredicateKind::poke: {
      const double d = dist(cur.cup, init.cup);
      return (d < 0.05 ? 10.0 * d : 10.0 * (0.1 - d)) + approach(cur.cup);
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Scripted demonstrations
// ---------------------------------------------------------------------------
namespace detail {

// Steers the gripper behind the cup relative to push_dir, then drives through
// it. The push-only contact rule moves the cup cleanly only when the gripper
// attacks from the opposite side, so misaligned approaches orbit first.
template <typename TowardFn>
inline ActionVec detail_cup_drive(const WorldState& s, Vec2 push_dir, TowardFn&& toward) {
  const double d = dist(s.gripper, s.cup);
  if (d < 1e-9) return {push_dir.x * kActionBound, push_dir.y * kActionBound, 1.0};
  const Vec2 a = (s.gripper - s.cup) * (1.0 / d);
  const double align = -(a.x * push_dir.x + a.y * push_dir.y);
  if (align > 0.92) {
    const Vec2 at_cup = (s.cup - s.gripper) * (1.0 / d);
    return {at_cup.x * kActionBound, at_cup.y * kActionBound, 1.0};
  }
  const Vec2 behind = s.cup - push_dir * 0.08;
  if (d < 0.11) {
    // orbit at a safe radius toward the behind point
    const Vec2 t1{-a.y, a.x};
    const Vec2 want = behind - s.gripper;
    const double s1 = t1.x * want.x + t1.y * want.y;
    const Vec2 tang = s1 >= 0.0 ? t1 : Vec2{a.y, -a.x};
    const Vec2 dir{tang.x * 0.02 + a.x * (0.08 - d), tang.y * 0.02 + a.y * (0.08 - d)};
    return {clamp(dir.x, -kActionBound, kActionBound), clamp(dir.y, -kActionBound, kActionBound),
            0.0};
  }
  return toward(behind);
}

// One hand-coded control step for the given task. Returns the noiseless
// action. Policies finish with margin and then hold a parked position so that
// per-step noise cannot undo the completed task.
inline ActionVec scripted_policy(const TaskSpec& task, const WorldState& s,
                                 const WorldState& init) {
  auto toward = [&s](Vec2 target, double gain = 1.0) -> ActionVec {
    const Vec2 d = (target - s.gripper) * gain;
    return {clamp(d.x, -kActionBound, kActionBound), clamp(d.y, -kActionBound, kActionBound), 0.0};
  };
  auto park = [&toward](Vec2 target) { return toward(target, 0.5); };
  const double close_enough = kHandleRadius * 0.5;
  switch (task.predicate_kind) {
    case PredicateKind::drawer_close: {
      // parked spot is straight above the cabinet: the retreat keeps dy <= 0,
      // which can only close the drawer further
      if (s.drawer_openness <= 0.02) return park({kDrawerBase.x, 0.14});
      const Vec2 h = drawer_handle(s);
      if (dist(s.gripper, h) > close_enough) return toward(h);
      return {clamp(h.x - s.gripper.x, -kActionBound, kActionBound), -kActionBound, 1.0};
    }
    case PredicateKind::drawer_open: {
      // retreating downward drags the drawer fully open before the handle
      // stops at its limit and releases the gripper
      if (s.drawer_openness >= 0.08) return park({0.5, 0.60});
      const Vec2 h = drawer_handle(s);
      if (dist(s.gripper, h) > close_enough) return toward(h);
      return {clamp(h.x - s.gripper.x, -kActionBound, kActionBound), kActionBound, 1.0};
    }
    case PredicateKind::faucet_right: {
      // parked spot is to the upper-right: the retreat keeps dx >= 0 while the
      // gripper is still near the handle, which can only push the angle further
      if (s.faucet_angle >= 0.035) return park({kFaucetBase.x + 0.15, 0.55});
      const Vec2 h = faucet_handle(s);
      if (dist(s.gripper, h) > close_enough) return toward(h);
      return {kActionBound, clamp(h.y - s.gripper.y, -kActionBound, kActionBound), 1.0};
    }
    case PredicateKind::faucet_left: {
      // mirror of faucet_right: retreat keeps dx <= 0 near the handle
      if (s.faucet_angle <= -0.035) return park({kFaucetBase.x - 0.15, 0.55});
      const Vec2 h = faucet_handle(s);
      if (dist(s.gripper, h) > close_enough) return toward(h);
      return {-kActionBound, clamp(h.y - s.gripper.y, -kActionBound, kActionBound), 1.0};
    }
    case PredicateKind::cup_away:
    case PredicateKind::cup_toward:
    case PredicateKind::push_left:
    case PredicateKind::push_right: {
      Vec2 push_dir;
      Vec2 parked;
      bool done = false;
      const double d_machine = dist(s.cup, s.machine);
      switch (task.predicate_kind) {
        case PredicateKind::cup_away:
          push_dir = (s.machine - s.cup) * (1.0 / std::max(1e-9, d_machine));
          done = d_machine < 0.055;
          parked = {0.35, 0.52};
          break;
        case PredicateKind::cup_toward:
          push_dir = (s.cup - s.machine) * (1.0 / std::max(1e-9, d_machine));
          done = d_machine > 0.125;
          parked = {0.80, 0.52};
          break;
        case PredicateKind::push_left:
          push_dir = {-1.0, 0.0};
          done = init.cup.x - s.cup.x > 0.07;
          parked = {0.82, 0.55};
          break;
        default:  // push_right
          push_dir = {1.0, 0.0};
          done = s.cup.x - init.cup.x > 0.07;
          parked = {0.30, 0.55};
          break;
      }
      if (done) return park(parked);
      return detail_cup_drive(s, push_dir, toward);
    }
    case PredicateKind::no_motion:
      return park(init.gripper);
    case PredicateKind::lift_up:
      return (init.gripper.y - s.gripper.y > 0.18)
                 ? park({init.gripper.x, init.gripper.y - 0.19})
                 : ActionVec{0.0, -kActionBound, 0.0};
    case PredicateKind::move_down:
      return (s.gripper.y - init.gripper.y > 0.18)
                 ? park({init.gripper.x, init.gripper.y + 0.19})
                 : ActionVec{0.0, kActionBound, 0.0};
    case PredicateKind::poke: {
      const double moved = dist(s.cup, init.cup);
      if (moved > 0.026) {
        // back off radially; the push-only contact rule frees the cup
        const double d = dist(s.gripper, s.cup);
        if (d < 0.12 && d > 1e-9) {
          const Vec2 away = (s.gripper - s.cup) * (1.0 / d);
          return {away.x * kActionBound, away.y * kActionBound, -1.0};
        }
        return park(init.gripper);
      }
      return detail_cup_drive(s, {0.0, -1.0}, toward);  // nudge the cup upward
    }
  }
  return {0.0, 0.0, 0.0};
}

}  // namespace detail

struct Demo {
  VideoClip clip;
  std::vector<ActionVec> actions;
  std::vector<WorldState> states;
};

struct DemoAttempt {
  std::vector<ActionVec> actions;
  std::vector<WorldState> states;  // kHorizon + 1 entries
  bool success = false;
};

// Single render-free scripted rollout attempt.
inline DemoAttempt simulate_scripted(const TaskSpec& task, double noise, std::uint64_t seed) {
  if (noise < 0.0) throw std::invalid_argument("scripted demo: noise must be >= 0");
  Rng rng(hash_u64(seed));
  DemoAttempt at;
  const WorldState init = initial_state(task, rng);
  at.states.push_back(init);
  for (int t = 0; t < kHorizon; ++t) {
    ActionVec a = detail::scripted_policy(task, at.states.back(), init);
    if (noise > 0.0) {
      a.dx += rng.uniform(-noise, noise);
      a.dy += rng.uniform(-noise, noise);
    }
    at.actions.push_back(a);
    at.states.push_back(step(at.states.back(), a));
  }
  at.success = eval_success(task, at.states);
  return at;
}

inline Demo scripted_demo(const TaskSpec& task, const DomainSpec& domain, double noise,
                          std::uint64_t seed, std::size_t frame_size = kDefaultFrameSize,
                          int max_tries = 50) {
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    DemoAttempt at = simulate_scripted(task, noise, seed + static_cast<std::uint64_t>(attempt) * 0x9e37ULL);
    if (at.success) {
      auto [clip, st] = rollout(at.states.front(), at.actions, domain, frame_size);
      clip.task_id = task.task_id;
      return {std::move(clip), std::move(at.actions), std::move(st)};
    }
    if (noise == 0.0) break;  // deterministic policy will not improve by retrying
  }
  throw UnsupportedTask("scripted_demo: policy for task '" + task.name +
                        "' failed to satisfy its predicate");
}

// ---------------------------------------------------------------------------
// Environment variants (tiers 0-3) and the human training domain
// ---------------------------------------------------------------------------
inline DomainSpec sample_env_variant(int tier, std::uint64_t seed) {
  if (tier < 0 || tier > 3) throw std::invalid_argument("env tier must be in [0,3]");
  DomainSpec d;
  d.embodiment = Embodiment::robot;
  if (tier >= 1) {
    Rng rng(hash_u64(0xE17'0000ULL ^ seed));
    d.palette_id = 0x40000000u + static_cast<std::uint32_t>(rng.uniform_int(1u << 30));
    d.texture_seed = static_cast<std::uint32_t>(rng.uniform_int(1u << 30));
  }
  if (tier >= 2) {
    Rng rng(hash_u64(0xE27'0000ULL ^ seed));
    d.view.rotation = rng.uniform(-0.35, 0.35);
    d.view.scale = rng.uniform(0.8, 1.2);
    d.view.translation = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
  }
  if (tier >= 3) {
    Rng rng(hash_u64(0xE37'0000ULL ^ seed));
    do {
      for (std::size_t i = kNumDistractorSlots - 1; i > 0; --i) {
        const std::size_t j = rng.uniform_int(i + 1);
        std::swap(d.arrangement[i], d.arrangement[j]);
      }
    } while (d.arrangement_identity());
  }
  return d;
}

// Per-clip human domain: the "in-the-wild" axis of variability.
inline DomainSpec sample_human_domain(Rng& rng) {
  DomainSpec d;
  d.embodiment = Embodiment::human;
  d.palette_id = 1u + static_cast<std::uint32_t>(rng.uniform_int((1u << 30) - 1));
  d.texture_seed = static_cast<std::uint32_t>(rng.uniform_int(1u << 30));
  d.view.rotation = rng.uniform(-0.35, 0.35);
  d.view.scale = rng.uniform(0.8, 1.2);
  d.view.translation = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
  for (std::size_t i = kNumDistractorSlots - 1; i > 0; --i) {
    const std::size_t j = rng.uniform_int(i + 1);
    std::swap(d.arrangement[i], d.arrangement[j]);
  }
  return d;
}

}  // namespace dvd::world
