#pragma once

// Video-discriminator reward model: pretrained (then frozen) clip encoder, a
// similarity head trained on triplet pair losses, and pair-accuracy
// evaluation.

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvd/common.hpp"
#include "dvd/data.hpp"
#include "dvd/nn.hpp"
#include "dvd/world.hpp"
#include "json.hpp"

namespace dvd::reward {

using data::ClipStore;
using data::Manifest;
using nlohmann::json;
using nn::Network;
using dvd::Tensor;
using world::VideoClip;

inline constexpr std::size_t kEmbedDim = 64;

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

// Clip encoder: first kernel 3x5x5, the rest 3x3x3; spatial downsampling by
// stride-2 convs, batchnorm+relu throughout, global average pool, FC
// embedding.
inline Network make_encoder(std::size_t frames = data::kEncoderFrames, std::size_t height = 32,
                            std::size_t width = 32) {
  Network net;
  net.input_shape = {3, frames, height, width};
  net.add<nn::Conv3d>(3, 8, std::array<std::size_t, 3>{3, 5, 5},
                      std::array<std::size_t, 3>{1, 2, 2});
  net.add<nn::BatchNorm3d>(8);
  net.add<nn::Relu>();
  net.add<nn::Conv3d>(8, 16, std::array<std::size_t, 3>{3, 3, 3},
                      std::array<std::size_t, 3>{2, 2, 2});
  net.add<nn::BatchNorm3d>(16);
  net.add<nn::Relu>();
  net.add<nn::Conv3d>(16, 32, std::array<std::size_t, 3>{3, 3, 3},
                      std::array<std::size_t, 3>{2, 2, 2});
  net.add<nn::BatchNorm3d>(32);
  net.add<nn::Relu>();
  net.add<nn::GlobalAvgPool>();
  net.add<nn::FullyConnected>(32, kEmbedDim);
  return net;
}

// Similarity head: concat(2E) -> 64 -> 32 -> 1 -> sigmoid.
inline Network make_sim_head() {
  Network net;
  net.input_shape = {2 * kEmbedDim};
  net.add<nn::FullyConnected>(2 * kEmbedDim, 64);
  net.add<nn::Relu>();
  net.add<nn::FullyConnected>(64, 32);
  net.add<nn::Relu>();
  net.add<nn::FullyConnected>(32, 1);
  net.add<nn::Sigmoid>();
  return net;
}

// K-way classifier head over the embedding, used for encoder pretraining and
// retained for the classifier-reward baseline.
inline Network make_classifier_head(std::size_t k) {
  Network net;
  net.input_shape = {kEmbedDim};
  net.add<nn::FullyConnected>(kEmbedDim, k);
  net.add<nn::Softmax>();
  return net;
}

struct DVDModel {
  Network encoder;
  Network head;
  std::size_t frames = data::kEncoderFrames;
  std::size_t height = 32;
  std::size_t width = 32;
};

inline DVDModel make_model(std::size_t frames = data::kEncoderFrames, std::size_t height = 32,
                           std::size_t width = 32) {
  DVDModel m;
  m.frames = frames;
  m.height = height;
  m.width = width;
  m.encoder = make_encoder(frames, height, width);
  m.head = make_sim_head();
  return m;
}

// ---------------------------------------------------------------------------
// Clip <-> tensor plumbing
// ---------------------------------------------------------------------------
inline Tensor clips_to_tensor(const std::vector<const VideoClip*>& clips, std::size_t frames,
                              std::size_t height, std::size_t width) {
  Tensor t({clips.size(), 3, frames, height, width});
  for (std::size_t b = 0; b < clips.size(); ++b) {
    const VideoClip& c = *clips[b];
    if (c.frames.size() != frames || c.height != height || c.width != width)
      throw nn::ShapeError("clip does not match the model input spec");
    double* base = t.data() + b * 3 * frames * height * width;
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            base[((ch * frames + f) * height + y) * width + x] =
                c.frames[f][(y * width + x) * 3 + ch];
  }
  return t;
}

// Batched embeddings, eval-mode (running batchnorm statistics).
inline Tensor encode_batch(const DVDModel& model, const std::vector<const VideoClip*>& clips) {
  return model.encoder.forward(clips_to_tensor(clips, model.frames, model.height, model.width),
                               nn::Mode::eval);
}

inline std::vector<double> encode(const DVDModel& model, const VideoClip& clip) {
  const Tensor e = encode_batch(model, {&clip});
  return e.v;
}

inline double score_embed(const DVDModel& model, const double* ha, const double* hb) {
  Tensor in({1, 2 * kEmbedDim});
  std::copy(ha, ha + kEmbedDim, in.data());
  std::copy(hb, hb + kEmbedDim, in.data() + kEmbedDim);
  return model.head.forward(in, nn::Mode::eval).v[0];
}

// R(candidate, demo): fixed argument order, no symmetrization.
inline double score(const DVDModel& model, const VideoClip& candidate, const VideoClip& demo) {
  const auto ha = encode(model, candidate);
  const auto hb = encode(model, demo);
  return score_embed(model, ha.data(), hb.data());
}

// ---------------------------------------------------------------------------
// Manifest splitting: deterministic 85/15 by record index within each task.
// ---------------------------------------------------------------------------
inline std::pair<Manifest, Manifest> split_manifest(const Manifest& m, double val_frac = 0.15) {
  Manifest train = m, val = m;
  train.records.clear();
  val.records.clear();
  train.split = "train";
  val.split = "val";
  std::map<int, std::size_t> total, seen;
  for (const auto& r : m.records) total[r.task_id]++;
  for (const auto& r : m.records) {
    const std::size_t i = seen[r.task_id]++;
    const auto cut = static_cast<std::size_t>(
        std::ceil((1.0 - val_frac) * static_cast<double>(total[r.task_id])));
    (i < cut ? train : val).records.push_back(r);
  }
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Pair-accuracy evaluation: balanced same-task / different-task pairs,
// decision threshold 0.5, eval preprocessing (center crop, fixed length).
// ---------------------------------------------------------------------------
inline double evaluate_pair_accuracy(const DVDModel& model, const Manifest& human,
                                     const Manifest& robot, std::size_t n_pairs,
                                     std::uint64_t seed, ClipStore* store = nullptr,
                                     const data::BatchConfig& cfg = {}) {
  struct Ref {
    const Manifest* m;
    const data::ClipRecord* r;
  };
  std::map<int, std::vector<Ref>> by_task;
  for (const Manifest* m : {&human, &robot})
    for (const auto& r : m->records) by_task[r.task_id].push_back(Ref{m, &r});
  std::vector<int> tasks;
  for (const auto& [t, refs] : by_task) tasks.push_back(t);
  if (tasks.size() < 2) throw std::invalid_argument("evaluate_pair_accuracy: need >= 2 tasks");
  std::vector<int> pair_tasks;  // tasks usable for same-task pairs
  for (const auto& [t, refs] : by_task)
    if (refs.size() >= 2) pair_tasks.push_back(t);
  if (pair_tasks.empty())
    throw std::invalid_argument("evaluate_pair_accuracy: no task has 2 clips");

  ClipStore local;
  ClipStore& clips = store ? *store : local;
  std::map<const data::ClipRecord*, std::vector<double>> emb_cache;
  auto embed = [&](const Ref& ref) -> const std::vector<double>& {
    auto it = emb_cache.find(ref.r);
    if (it == emb_cache.end()) {
      const VideoClip processed = data::process_clip_eval(clips.get(*ref.m, *ref.r), cfg);
      it = emb_cache.emplace(ref.r, encode(model, processed)).first;
    }
    return it->second;
  };

  Rng rng(world::hash_u64(seed ^ 0x9a1ce5u));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const bool same = i % 2 == 0;
    Ref a{}, b{};
    if (same) {
      const int t = pair_tasks[rng.uniform_int(pair_tasks.size())];
      const auto& pool = by_task[t];
      const std::size_t ia = rng.uniform_int(pool.size());
      std::size_t ib = rng.uniform_int(pool.size() - 1);
      if (ib >= ia) ++ib;
      a = pool[ia];
      b = pool[ib];
    } else {
      const std::size_t ta = rng.uniform_int(tasks.size());
      std::size_t tb = rng.uniform_int(tasks.size() - 1);
      if (tb >= ta) ++tb;
      const auto& pa = by_task[tasks[ta]];
      const auto& pb = by_task[tasks[tb]];
      a = pa[rng.uniform_int(pa.size())];
      b = pb[rng.uniform_int(pb.size())];
    }
    const double s = score_embed(model, embed(a).data(), embed(b).data());
    if (same == (s > 0.5)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_pairs);
}

// ---------------------------------------------------------------------------
// Encoder pretraining: K-way task classification on human clips.
// ---------------------------------------------------------------------------
struct PretrainConfig {
  std::size_t epochs = 6;
  std::size_t steps_per_epoch = 50;
  std::size_t batch = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
  data::BatchConfig clip_cfg;
};

struct PretrainResult {
  Network encoder;               // trained and frozen
  Network classifier_head;       // retained for the classifier-reward baseline
  std::vector<int> class_tasks;  // class index -> task id
  std::vector<double> val_acc_curve;
  double val_acc = 0.0;
};

namespace detail {

struct LabeledRef {
  const data::ClipRecord* record = nullptr;
  std::size_t label = 0;
};

inline std::vector<detail::LabeledRef> label_records(const Manifest& m,
                                                     const std::vector<int>& class_tasks) {
  std::vector<LabeledRef> out;
  for (const auto& r : m.records) {
    const auto it = std::find(class_tasks.begin(), class_tasks.end(), r.task_id);
    if (it != class_tasks.end())
      out.push_back({&r, static_cast<std::size_t>(it - class_tasks.begin())});
  }
  return out;
}

}  // namespace detail

// Validation top-1 accuracy of encoder+head over labeled refs.
inline double classifier_accuracy(const Network& encoder, const Network& head,
                                  const Manifest& manifest,
                                  const std::vector<detail::LabeledRef>& refs,
                                  const data::BatchConfig& cfg, ClipStore& clips) {
  if (refs.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ref : refs) {
    const VideoClip processed = data::process_clip_eval(clips.get(manifest, *ref.record), cfg);
    const Tensor emb = encoder.forward(
        clips_to_tensor({&processed}, cfg.frames, processed.height, processed.width),
        nn::Mode::eval);
    const Tensor probs = head.forward(emb, nn::Mode::eval);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < probs.v.size(); ++k)
      if (probs.v[k] > probs.v[arg]) arg = k;
    if (arg == ref.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(refs.size());
}

inline PretrainResult pretrain_encoder(const Manifest& human, const PretrainConfig& cfg,
                                       ClipStore* store = nullptr) {
  std::vector<int> class_tasks = human.task_ids();
  std::sort(class_tasks.begin(), class_tasks.end());
  if (class_tasks.size() < 2)
    throw std::invalid_argument("pretrain_encoder: need >= 2 classes in the human manifest");
  for (const auto c : {cfg.epochs, cfg.steps_per_epoch, cfg.batch})
    if (c == 0) throw std::invalid_argument("pretrain_encoder: counts must be positive");

  const auto [train_m, val_m] = split_manifest(human);
  const auto train_refs = detail::label_records(train_m, class_tasks);
  const auto val_refs = detail::label_records(val_m, class_tasks);
  if (train_refs.empty()) throw std::invalid_argument("pretrain_encoder: empty training set");

  ClipStore local;
  ClipStore& clips = store ? *store : local;
  Rng rng(world::hash_u64(cfg.seed ^ 0xe11cu));

  PretrainResult res;
  res.class_tasks = class_tasks;
  res.encoder = make_encoder(cfg.clip_cfg.frames);
  res.classifier_head = make_classifier_head(class_tasks.size());
  res.encoder.init_params(rng);
  res.classifier_head.init_params(rng);

  nn::SgdMomentum opt;
  opt.lr = cfg.lr;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
      std::vector<VideoClip> batch_clips;
      std::vector<std::size_t> labels;
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const auto& ref = train_refs[rng.uniform_int(train_refs.size())];
        batch_clips.push_back(
            data::process_clip(clips.get(train_m, *ref.record), cfg.clip_cfg, rng));
        labels.push_back(ref.label);
      }
      std::vector<const VideoClip*> ptrs;
      for (const auto& c : batch_clips) ptrs.push_back(&c);

      nn::NetworkCache enc_cache, head_cache;
      const Tensor emb = res.encoder.forward(
          clips_to_tensor(ptrs, cfg.clip_cfg.frames, 32, 32), nn::Mode::train, &enc_cache);
      const Tensor probs = res.classifier_head.forward(emb, nn::Mode::train, &head_cache);

      const std::size_t k = class_tasks.size();
      Tensor grad_probs(probs.shape);
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        std::vector<double> g(k);
        nn::ce_loss(probs.data() + b * k, k, labels[b], g.data());
        for (std::size_t j = 0; j < k; ++j)
          grad_probs.v[b * k + j] = g[j] / static_cast<double>(cfg.batch);
      }
      nn::GradMap grads_head, grads_enc;
      const Tensor grad_emb = res.classifier_head.backward(head_cache, grad_probs, grads_head);
      res.encoder.backward(enc_cache, grad_emb, grads_enc);
      // the two networks share the optimizer; prefix names to keep them apart
      nn::GradMap merged;
      for (auto& [n, g] : grads_enc) merged.emplace("enc." + n, std::move(g));
      for (auto& [n, g] : grads_head) merged.emplace("cls." + n, std::move(g));
      std::vector<std::pair<std::string, Tensor*>> params;
      for (auto& [n, p] : res.encoder.named_params(true)) params.emplace_back("enc." + n, p);
      for (auto& [n, p] : res.classifier_head.named_params(true))
        params.emplace_back("cls." + n, p);
      opt.step(params, merged);
    }
    const auto& acc_refs = val_refs.empty() ? train_refs : val_refs;
    const auto& acc_m = val_refs.empty() ? train_m : val_m;
    res.val_acc_curve.push_back(classifier_accuracy(res.encoder, res.classifier_head, acc_m,
                                                    acc_refs, cfg.clip_cfg, clips));
  }
  res.val_acc = res.val_acc_curve.empty() ? 0.0 : res.val_acc_curve.back();
  res.encoder.freeze_all(true);
  return res;
}

// ---------------------------------------------------------------------------
// Head training on the triplet pair objective.
// ---------------------------------------------------------------------------
struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 200;
  std::size_t batch = 24;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
  double early_stop_acc = -1.0;  // stop once val accuracy reaches this (if > 0)
  std::size_t eval_pairs = 400;
  data::BatchConfig clip_cfg;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  double final_val_acc = 0.0;
  std::size_t steps_run = 0;
};

inline json curves_to_json(const std::string& config_digest, std::uint64_t seed,
                           const std::vector<EpochStats>& curve) {
  json epochs = json::array();
  for (const auto& e : curve)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"val_acc", e.val_acc}});
  return json{{"config_digest", config_digest}, {"seed", seed}, {"epochs", epochs}};
}

inline json train_config_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"steps_per_epoch", c.steps_per_epoch},
              {"batch", c.batch},
              {"lr", c.lr},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed},
              {"early_stop_acc", c.early_stop_acc},
              {"frames", c.clip_cfg.frames},
              {"min_len", c.clip_cfg.min_len},
              {"max_len", c.clip_cfg.max_len}};
}

inline TrainResult train_dvd(DVDModel& model, const Manifest& human, const Manifest& robot,
                             const TrainConfig& cfg, ClipStore* store = nullptr) {
  for (const auto c : {cfg.epochs, cfg.steps_per_epoch, cfg.batch})
    if (c == 0) throw std::invalid_argument("train_dvd: counts must be positive");
  bool any_frozen = true;
  for (auto& [n, p] : model.encoder.named_params(true)) {
    (void)n;
    (void)p;
    any_frozen = false;
  }
  if (!any_frozen) throw std::invalid_argument("train_dvd: encoder must be frozen");
  const std::string frozen_digest = model.encoder.param_digest();

  const auto [human_train, human_val] = split_manifest(human);
  const auto [robot_train, robot_val] = split_manifest(robot);

  ClipStore local;
  ClipStore& clips = store ? *store : local;
  Rng rng(world::hash_u64(cfg.seed ^ 0xd5du));

  nn::SgdMomentum opt;
  opt.lr = cfg.lr;
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;

  data::BatchConfig bc = cfg.clip_cfg;
  bc.batch_size = cfg.batch;

  TrainResult res;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    double loss_sum = 0.0;
    std::size_t acc_hits = 0, acc_total = 0;
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
      const auto batch = data::make_batch(human_train, robot_train, bc, rng, &clips);
      // one eval-mode encoder pass over all 3B clips (the encoder is frozen)
      std::vector<const VideoClip*> ptrs;
      for (const auto& t : batch) {
        ptrs.push_back(&t.anchor);
        ptrs.push_back(&t.positive);
        ptrs.push_back(&t.negative);
      }
      const Tensor emb = encode_batch(model, ptrs);
      const std::size_t B = batch.size();
      Tensor head_in({2 * B, 2 * kEmbedDim});
      for (std::size_t b = 0; b < B; ++b) {
        const double* ha = emb.data() + (3 * b + 0) * kEmbedDim;
        const double* hp = emb.data() + (3 * b + 1) * kEmbedDim;
        const double* hn = emb.data() + (3 * b + 2) * kEmbedDim;
        double* pos_row = head_in.data() + (2 * b) * 2 * kEmbedDim;
        double* neg_row = head_in.data() + (2 * b + 1) * 2 * kEmbedDim;
        std::copy(ha, ha + kEmbedDim, pos_row);
        std::copy(hp, hp + kEmbedDim, pos_row + kEmbedDim);
        std::copy(ha, ha + kEmbedDim, neg_row);
        std::copy(hn, hn + kEmbedDim, neg_row + kEmbedDim);
      }
      nn::NetworkCache cache;
      const Tensor scores = model.head.forward(head_in, nn::Mode::train, &cache);
      Tensor grad_scores(scores.shape);
      double loss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        double gp = 0.0, gn = 0.0;
        loss += nn::bce_pair_loss(scores.v[2 * b], scores.v[2 * b + 1], &gp, &gn);
        grad_scores.v[2 * b] = gp / static_cast<double>(B);
        grad_scores.v[2 * b + 1] = gn / static_cast<double>(B);
        if (scores.v[2 * b] > 0.5) ++acc_hits;
        if (scores.v[2 * b + 1] < 0.5) ++acc_hits;
        acc_total += 2;
      }
      loss /= static_cast<double>(B);
      loss_sum += loss;
      nn::GradMap grads;
      model.head.backward(cache, grad_scores, grads);
      opt.step(model.head.named_params(true), grads);
      ++res.steps_run;
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(cfg.steps_per_epoch);
    st.train_acc = static_cast<double>(acc_hits) / static_cast<double>(acc_total);
    const Manifest& hv = human_val.records.empty() ? human_train : human_val;
    const Manifest& rv = robot_val.records.empty() ? robot_train : robot_val;
    st.val_acc = evaluate_pair_accuracy(model, hv, rv, cfg.eval_pairs,
                                        cfg.seed + 1000 + epoch, &clips, cfg.clip_cfg);
    res.curve.push_back(st);
    if (cfg.early_stop_acc > 0.0 && st.val_acc >= cfg.early_stop_acc) stop = true;
  }
  if (model.encoder.param_digest() != frozen_digest)
    throw std::logic_error("train_dvd: frozen encoder parameters changed");
  res.final_val_acc = res.curve.empty() ? 0.0 : res.curve.back().val_acc;
  return res;
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------
inline void save_model(const DVDModel& model, const std::string& encoder_path,
                       const std::string& head_path) {
  nn::save_checkpoint(encoder_path, model.encoder);
  nn::save_checkpoint(head_path, model.head);
}

inline void load_model(DVDModel& model, const std::string& encoder_path,
                       const std::string& head_path) {
  nn::load_checkpoint(encoder_path, model.encoder);
  nn::load_checkpoint(head_path, model.head);
  model.encoder.freeze_all(true);
}

}  // namespace dvd::reward
