#pragma once

// Dataset persistence (clip files + JSON manifests), clip windowing and
// augmentation, and the balanced triplet batch sampler.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dvd/common.hpp"
#include "dvd/nn.hpp"
#include "dvd/world.hpp"
#include "json.hpp"

namespace dvd::data {

using nlohmann::json;
using world::Embodiment;
using world::TaskSpec;
using world::VideoClip;

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InsufficientData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Fixed encoder input length: every training/eval clip is temporally
// resampled to this many frames after windowing.
inline constexpr std::size_t kEncoderFrames = 8;

// ---------------------------------------------------------------------------
// Clip file format: magic "DVDC", version u16=1, n_frames u32, height u16,
// width u16, channels u8=3, dtype u8=0 (u8 pixels), then frame-major
// row-major HWC bytes. All integers little-endian. Pixels are stored as
// round(v*255) and decode to byte/255, which is exact for rendered frames.
// ---------------------------------------------------------------------------
inline void write_clip(const VideoClip& clip, const std::string& path) {
  if (clip.frames.empty()) throw FormatError("write_clip: empty clip");
  if (clip.height > 0xFFFF || clip.width > 0xFFFF)
    throw FormatError("write_clip: dimension overflow");
  const std::size_t px = clip.height * clip.width * 3;
  std::string out;
  out += "DVDC";
  io::put_le(out, static_cast<std::uint16_t>(1));
  io::put_le(out, static_cast<std::uint32_t>(clip.frames.size()));
  io::put_le(out, static_cast<std::uint16_t>(clip.height));
  io::put_le(out, static_cast<std::uint16_t>(clip.width));
  out.push_back(static_cast<char>(3));
  out.push_back(static_cast<char>(0));
  for (const auto& f : clip.frames) {
    if (f.size() != px) throw FormatError("write_clip: frame size mismatch");
    for (double v : f)
      out.push_back(static_cast<char>(
          static_cast<unsigned char>(std::lround(clamp(v, 0.0, 1.0) * 255.0))));
  }
  nn::write_file(path, out);
}

inline VideoClip read_clip(const std::string& path) {
  const std::string buf = nn::read_file(path);
  if (buf.size() < 16 || buf.compare(0, 4, "DVDC") != 0)
    throw FormatError("read_clip: bad magic in " + path);
  std::size_t off = 4;
  const auto version = io::get_le<std::uint16_t>(buf, off);
  if (version != 1) throw FormatError("read_clip: unsupported version");
  const auto n_frames = io::get_le<std::uint32_t>(buf, off);
  const auto height = io::get_le<std::uint16_t>(buf, off);
  const auto width = io::get_le<std::uint16_t>(buf, off);
  const auto channels = static_cast<unsigned char>(buf[off++]);
  const auto dtype = static_cast<unsigned char>(buf[off++]);
  if (channels != 3 || dtype != 0) throw FormatError("read_clip: unsupported layout");
  if (n_frames == 0 || height == 0 || width == 0) throw FormatError("read_clip: empty clip");
  const std::size_t px = std::size_t(height) * width * 3;
  if (buf.size() != off + std::size_t(n_frames) * px)
    throw FormatError("read_clip: truncated file " + path);
  VideoClip clip;
  clip.height = height;
  clip.width = width;
  clip.frames.assign(n_frames, std::vector<double>(px));
  for (std::uint32_t i = 0; i < n_frames; ++i)
    for (std::size_t j = 0; j < px; ++j)
      clip.frames[i][j] = static_cast<unsigned char>(buf[off + i * px + j]) / 255.0;
  return clip;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------
struct ClipRecord {
  std::string clip_path;  // relative to the manifest's directory
  int task_id = 0;
  Embodiment domain = Embodiment::robot;
  int env_tier = 0;
  std::size_t n_frames = 0;
};

struct Manifest {
  std::vector<ClipRecord> records;
  std::vector<TaskSpec> tasks;
  std::string split = "train";
  std::uint64_t generation_seed = 0;
  std::string root;  // directory clip paths resolve against (not serialized)

  std::vector<int> task_ids() const {
    std::vector<int> ids;
    for (const auto& r : records)
      if (std::find(ids.begin(), ids.end(), r.task_id) == ids.end()) ids.push_back(r.task_id);
    return ids;
  }
};

inline json manifest_to_json(const Manifest& m) {
  json tasks = json::array();
  for (const auto& t : m.tasks)
    tasks.push_back({{"task_id", t.task_id},
                     {"name", t.name},
                     {"predicate_kind", world::predicate_name(t.predicate_kind)},
                     {"threshold", t.threshold}});
  json records = json::array();
  for (const auto& r : m.records)
    records.push_back({{"clip_path", r.clip_path},
                       {"task_id", r.task_id},
                       {"domain", r.domain == Embodiment::robot ? "robot" : "human"},
                       {"env_tier", r.env_tier},
                       {"n_frames", r.n_frames}});
  return json{{"version", 1},
              {"split", m.split},
              {"generation_seed", m.generation_seed},
              {"tasks", tasks},
              {"records", records}};
}

inline world::PredicateKind predicate_from_name(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(world::PredicateKind::poke); ++k) {
    const auto kind = static_cast<world::PredicateKind>(k);
    if (name == world::predicate_name(kind)) return kind;
  }
  throw FormatError("unknown predicate kind: " + name);
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  nn::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

inline Manifest load_manifest(const std::string& path, bool validate = true) {
  json j;
  try {
    j = json::parse(nn::read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(std::string("load_manifest: ") + e.what());
  }
  Manifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  try {
    m.split = j.at("split").get<std::string>();
    m.generation_seed = j.at("generation_seed").get<std::uint64_t>();
    for (const auto& t : j.at("tasks")) {
      TaskSpec ts;
      ts.task_id = t.at("task_id").get<int>();
      ts.name = t.at("name").get<std::string>();
      ts.predicate_kind = predicate_from_name(t.at("predicate_kind").get<std::string>());
      ts.threshold = t.at("threshold").get<double>();
      m.tasks.push_back(ts);
    }
    for (const auto& r : j.at("records")) {
      ClipRecord cr;
      cr.clip_path = r.at("clip_path").get<std::string>();
      const std::string dom = r.at("domain").get<std::string>();
      if (dom != "robot" && dom != "human") throw FormatError("bad domain: " + dom);
      cr.domain = dom == "robot" ? Embodiment::robot : Embodiment::human;
      cr.task_id = r.at("task_id").get<int>();
      cr.env_tier = r.at("env_tier").get<int>();
      cr.n_frames = r.at("n_frames").get<std::size_t>();
      m.records.push_back(cr);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("load_manifest: ") + e.what());
  }
  if (validate) {
    std::unordered_map<std::string, int> seen;
    for (const auto& r : m.records) {
      if (++seen[r.clip_path] > 1) throw FormatError("duplicate clip path: " + r.clip_path);
      if (r.n_frames < 1) throw FormatError("record with zero frames: " + r.clip_path);
      bool known = false;
      for (const auto& t : m.tasks) known = known || t.task_id == r.task_id;
      if (!known) throw FormatError("record task not in registry: " + r.clip_path);
      const std::string full = (std::filesystem::path(m.root) / r.clip_path).string();
      const VideoClip clip = read_clip(full);
      if (clip.frames.size() != r.n_frames)
        throw FormatError("frame count mismatch for " + r.clip_path);
    }
  }
  return m;
}

// Loads a record's clip, filling in the manifest-side metadata.
inline VideoClip load_record(const Manifest& m, const ClipRecord& r) {
  VideoClip clip = read_clip((std::filesystem::path(m.root) / r.clip_path).string());
  clip.task_id = r.task_id;
  clip.domain = r.domain;
  clip.env_tier = r.env_tier;
  return clip;
}

// Loads the .actions.json sidecar written by generate_dataset(save_actions).
inline std::vector<world::ActionVec> load_actions(const Manifest& m, const ClipRecord& r) {
  const auto path = std::filesystem::path(m.root) / (r.clip_path + ".actions.json");
  std::ifstream in(path);
  if (!in) throw FormatError("missing action sidecar: " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("actions"))
    throw FormatError("bad action sidecar: " + path.string());
  std::vector<world::ActionVec> actions;
  for (const auto& a : j["actions"]) {
    if (!a.is_array() || a.size() != 3)
      throw FormatError("bad action sidecar: " + path.string());
    actions.push_back({a[0].get<double>(), a[1].get<double>(), a[2].get<double>()});
  }
  return actions;
}

// In-memory cache keyed by absolute path; manifests are immutable after load
// so cached clips never go stale.
class ClipStore {
 public:
  const VideoClip& get(const Manifest& m, const ClipRecord& r) {
    const std::string key = (std::filesystem::path(m.root) / r.clip_path).string();
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, load_record(m, r)).first;
    return it->second;
  }

 private:
  std::unordered_map<std::string, VideoClip> cache_;
};

// ---------------------------------------------------------------------------
// Windowing / resampling / augmentation
// ---------------------------------------------------------------------------
inline VideoClip sample_clip_window(const VideoClip& clip, std::size_t min_len,
                                    std::size_t max_len, Rng& rng) {
  if (clip.frames.empty()) throw std::invalid_argument("sample_clip_window: empty clip");
  if (min_len > max_len || min_len == 0)
    throw std::invalid_argument("sample_clip_window: bad length range");
  const std::size_t L = min_len + rng.uniform_int(max_len - min_len + 1);
  VideoClip out = clip;
  out.frames.clear();
  const std::size_t n = clip.frames.size();
  if (n >= L) {
    const std::size_t start = rng.uniform_int(n - L + 1);
    out.frames.assign(clip.frames.begin() + start, clip.frames.begin() + start + L);
  } else {
    out.frames = clip.frames;
    while (out.frames.size() < L) out.frames.push_back(clip.frames.back());
  }
  return out;
}

inline VideoClip temporal_resample(const VideoClip& clip, std::size_t F) {
  if (F < 1) throw std::invalid_argument("temporal_resample: F must be >= 1");
  if (clip.frames.empty()) throw std::invalid_argument("temporal_resample: empty clip");
  const std::size_t n = clip.frames.size();
  VideoClip out = clip;
  out.frames.clear();
  out.frames.reserve(F);
  for (std::size_t i = 0; i < F; ++i) {
    const std::size_t idx =
        (F == 1) ? 0
                 : static_cast<std::size_t>(
                       std::llround(double(i) * double(n - 1) / double(F - 1)));
    out.frames.push_back(clip.frames[idx]);
  }
  return out;
}

struct AugmentSpec {
  double rotation_range_deg = 15.0;
  double crop_frac = 0.9;
  bool enabled = true;
};

namespace detail {

// Bilinear sample with clamp-to-edge coordinates; (y, x) in pixel units.
inline void bilinear(const std::vector<double>& src, std::size_t h, std::size_t w, double y,
                     double x, double* out3) {
  y = clamp(y, 0.0, double(h - 1));
  x = clamp(x, 0.0, double(w - 1));
  const std::size_t y0 = static_cast<std::size_t>(y);
  const std::size_t x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - double(y0);
  const double fx = x - double(x0);
  for (int c = 0; c < 3; ++c) {
    const double v00 = src[(y0 * w + x0) * 3 + c];
    const double v01 = src[(y0 * w + x1) * 3 + c];
    const double v10 = src[(y1 * w + x0) * 3 + c];
    const double v11 = src[(y1 * w + x1) * 3 + c];
    out3[c] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
  }
}

// One shared geometric transform (rotate about the center, crop, resize back)
// applied to every frame of a clip.
inline VideoClip transform_clip(const VideoClip& clip, double angle_rad, double crop_y0,
                                double crop_x0, std::size_t crop_h, std::size_t crop_w) {
  const std::size_t h = clip.height, w = clip.width;
  const double cy = (double(h) - 1.0) / 2.0, cx = (double(w) - 1.0) / 2.0;
  const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
  VideoClip out = clip;
  for (auto& frame : out.frames) {
    std::vector<double> dst(h * w * 3);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        // output pixel -> crop-window coordinates -> rotated source position
        const double yc =
            crop_h == h ? double(i) : crop_y0 + double(i) * double(crop_h - 1) / double(h - 1);
        const double xc =
            crop_w == w ? double(j) : crop_x0 + double(j) * double(crop_w - 1) / double(w - 1);
        const double ry = yc - cy, rx = xc - cx;
        const double sy = cy + ca * ry - sa * rx;
        const double sx = cx + sa * ry + ca * rx;
        bilinear(frame, h, w, sy, sx, &dst[(i * w + j) * 3]);
      }
    frame = std::move(dst);
  }
  return out;
}

}  // namespace detail

inline VideoClip augment(const VideoClip& clip, const AugmentSpec& spec, Rng& rng) {
  if (!spec.enabled) throw std::invalid_argument("augment: spec not enabled");
  if (spec.rotation_range_deg < 0.0) throw std::invalid_argument("augment: negative rotation");
  if (spec.crop_frac <= 0.0 || spec.crop_frac > 1.0)
    throw std::invalid_argument("augment: crop_frac out of (0,1]");
  if (clip.frames.empty()) throw std::invalid_argument("augment: empty clip");
  const double angle =
      rng.uniform(-spec.rotation_range_deg, spec.rotation_range_deg) * std::numbers::pi / 180.0;
  const auto crop_h = static_cast<std::size_t>(std::floor(spec.crop_frac * double(clip.height)));
  const auto crop_w = static_cast<std::size_t>(std::floor(spec.crop_frac * double(clip.width)));
  const double y0 = rng.uniform(0.0, double(clip.height - crop_h));
  const double x0 = rng.uniform(0.0, double(clip.width - crop_w));
  return detail::transform_clip(clip, angle, y0, x0, crop_h, crop_w);
}

// Deterministic evaluation-time counterpart: center crop, no rotation.
inline VideoClip center_crop(const VideoClip& clip, double crop_frac = 0.9) {
  if (clip.frames.empty()) throw std::invalid_argument("center_crop: empty clip");
  const auto crop_h = static_cast<std::size_t>(std::floor(crop_frac * double(clip.height)));
  const auto crop_w = static_cast<std::size_t>(std::floor(crop_frac * double(clip.width)));
  return detail::transform_clip(clip, 0.0, (double(clip.height) - double(crop_h)) / 2.0,
                                (double(clip.width) - double(crop_w)) / 2.0, crop_h, crop_w);
}

// ---------------------------------------------------------------------------
// Triplet sampling
// ---------------------------------------------------------------------------
struct Triplet {
  VideoClip anchor;
  VideoClip positive;
  VideoClip negative;
};

namespace detail {

struct RecordRef {
  const Manifest* manifest = nullptr;
  const ClipRecord* record = nullptr;
};

// View over both manifests indexed by domain and by task.
struct SamplerIndex {
  std::vector<RecordRef> robot, human;
  std::unordered_map<int, std::vector<RecordRef>> by_task;
  std::unordered_map<int, bool> task_has_robot;

  SamplerIndex(const Manifest& h, const Manifest& r) {
    for (const Manifest* m : {&h, &r})
      for (const auto& rec : m->records) {
        RecordRef ref{m, &rec};
        (rec.domain == Embodiment::robot ? robot : human).push_back(ref);
        by_task[rec.task_id].push_back(ref);
        if (rec.domain == Embodiment::robot) task_has_robot[rec.task_id] = true;
      }
    if (by_task.size() < 2) throw InsufficientData("triplet sampler: need >= 2 tasks");
    for (const auto& [task, refs] : by_task)
      if (refs.size() < 2)
        throw InsufficientData("triplet sampler: task " + std::to_string(task) +
                               " has < 2 clips");
  }

  RecordRef pick_domain(Rng& rng) const {
    const bool want_robot = rng.coin(0.5);
    const auto& pool = want_robot ? (robot.empty() ? human : robot)
                                  : (human.empty() ? robot : human);
    return pool[rng.uniform_int(pool.size())];
  }
};

}  // namespace detail

inline Triplet sample_triplet(const Manifest& human, const Manifest& robot, Rng& rng,
                              ClipStore* store = nullptr) {
  const detail::SamplerIndex index(human, robot);
  ClipStore local;
  ClipStore& clips = store ? *store : local;

  const detail::RecordRef anchor = index.pick_domain(rng);
  const int task = anchor.record->task_id;

  // positive: robot with probability 0.5 when the task has robot clips,
  // otherwise always human; distinct record from the anchor
  const bool pos_robot = index.task_has_robot.count(task) && rng.coin(0.5);
  std::vector<detail::RecordRef> pool;
  for (const auto& ref : index.by_task.at(task)) {
    if (ref.record == anchor.record) continue;
    if ((ref.record->domain == Embodiment::robot) == pos_robot) pool.push_back(ref);
  }
  if (pool.empty())  // fall back to any distinct same-task clip
    for (const auto& ref : index.by_task.at(task))
      if (ref.record != anchor.record) pool.push_back(ref);
  if (pool.empty()) throw InsufficientData("triplet sampler: no positive for task");
  const detail::RecordRef positive = pool[rng.uniform_int(pool.size())];

  detail::RecordRef negative = index.pick_domain(rng);
  while (negative.record->task_id == task) negative = index.pick_domain(rng);

  Triplet t;
  t.anchor = clips.get(*anchor.manifest, *anchor.record);
  t.positive = clips.get(*positive.manifest, *positive.record);
  t.negative = clips.get(*negative.manifest, *negative.record);
  return t;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------
struct BatchConfig {
  std::size_t batch_size = 24;
  std::size_t min_len = 20;
  std::size_t max_len = 40;
  std::size_t frames = kEncoderFrames;
  AugmentSpec augment;
};

inline VideoClip process_clip(const VideoClip& clip, const BatchConfig& cfg, Rng& rng) {
  VideoClip c = sample_clip_window(clip, cfg.min_len, cfg.max_len, rng);
  if (cfg.augment.enabled) c = augment(c, cfg.augment, rng);
  return temporal_resample(c, cfg.frames);
}

// Evaluation-time pipeline: full clip, center crop, fixed-length resample.
inline VideoClip process_clip_eval(const VideoClip& clip, const BatchConfig& cfg) {
  return temporal_resample(center_crop(clip, cfg.augment.crop_frac), cfg.frames);
}

// ---------------------------------------------------------------------------
// Dataset generation: scripted demos rendered into clip files + a manifest.
// ---------------------------------------------------------------------------
struct GenSpec {
  std::vector<int> task_ids;
  int demos_per_task = 10;
  Embodiment domain = Embodiment::robot;
  int env_tier = 0;  // rendering-shift tier for robot clips (0 = canonical)
  bool rearranged = false;  // shuffle distractor slots on top of the tier
  bool save_actions = false;  // write a .actions.json sidecar per clip
  double noise = 0.02;
  std::uint64_t seed = 0;
};

// Writes one clip file per demo under `dir` and returns the manifest
// (also saved as manifest.json in `dir`). Human clips draw a fresh random
// human domain per demo; robot clips use the spec's env tier.
inline Manifest generate_dataset(const std::string& dir, const GenSpec& spec) {
  if (spec.demos_per_task < 1) throw std::invalid_argument("generate_dataset: demos_per_task");
  std::filesystem::create_directories(dir);
  Manifest m;
  m.root = dir;
  m.generation_seed = spec.seed;
  Rng rng(world::hash_u64(spec.seed ^ 0x6e6eu));
  const char* prefix = spec.domain == Embodiment::robot ? "robot" : "human";
  for (int task_id : spec.task_ids) {
    const world::TaskSpec& task = world::task_by_id(task_id);
    m.tasks.push_back(task);
    for (int i = 0; i < spec.demos_per_task; ++i) {
      world::DomainSpec domain;
      if (spec.domain == Embodiment::human) {
        domain = world::sample_human_domain(rng);
      } else {
        domain = world::sample_env_variant(spec.env_tier, rng.next_u64());
        if (spec.rearranged) {
          do {
            for (std::size_t s = world::kNumDistractorSlots - 1; s > 0; --s)
              std::swap(domain.arrangement[s], domain.arrangement[rng.uniform_int(s + 1)]);
          } while (domain.arrangement_identity());
        }
      }
      const world::Demo demo = world::scripted_demo(task, domain, spec.noise, rng.next_u64());
      ClipRecord r;
      r.clip_path = std::string(prefix) + "_t" + std::to_string(task_id) + "_" +
                    std::to_string(i) + ".dvdc";
      r.task_id = task_id;
      r.domain = spec.domain;
      r.env_tier = spec.env_tier;
      r.n_frames = demo.clip.frames.size();
      write_clip(demo.clip, (std::filesystem::path(dir) / r.clip_path).string());
      if (spec.save_actions) {
        json acts = json::array();
        for (const auto& a : demo.actions) acts.push_back({a.dx, a.dy, a.grip});
        std::ofstream out(std::filesystem::path(dir) / (r.clip_path + ".actions.json"));
        out << json{{"task_id", task_id}, {"actions", std::move(acts)}}.dump() << "\n";
      }
      m.records.push_back(r);
    }
  }
  save_manifest(m, (std::filesystem::path(dir) / "manifest.json").string());
  return m;
}

inline std::vector<Triplet> make_batch(const Manifest& human, const Manifest& robot,
                                       const BatchConfig& cfg, Rng& rng,
                                       ClipStore* store = nullptr) {
  if (cfg.batch_size < 1) throw std::invalid_argument("make_batch: batch_size must be >= 1");
  std::vector<Triplet> batch;
  batch.reserve(cfg.batch_size);
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    Triplet t = sample_triplet(human, robot, rng, store);
    t.anchor = process_clip(t.anchor, cfg, rng);
    t.positive = process_clip(t.positive, cfg, rng);
    t.negative = process_clip(t.negative, cfg, rng);
    batch.push_back(std::move(t));
  }
  return batch;
}

}  // namespace dvd::data
