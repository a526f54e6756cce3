#pragma once

// Minimal feed-forward kernel: conv3d / batchnorm3d / relu / pooling /
// fully-connected layers with exact backprop, SGD with momentum,
// finite-difference gradient checking and binary checkpoint IO.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "dvd/common.hpp"
#include "dvd/tensor.hpp"

namespace dvd::nn {

enum class Mode { train, eval };

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CompatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using GradMap = std::map<std::string, Tensor>;

struct LayerCache {
  Tensor in;
  Tensor out;
  std::vector<Tensor> aux;
  bool valid = false;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual std::string spec() const = 0;
  virtual std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const = 0;
  // in/out carry a leading batch dimension
  virtual void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode mode) = 0;
  virtual void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in,
                        GradMap& grads, const std::string& prefix) = 0;
  virtual std::vector<std::pair<std::string, Tensor*>> params() { return {}; }
  // non-trainable state that still belongs in checkpoints (batchnorm running stats)
  virtual std::vector<std::pair<std::string, Tensor*>> buffers() { return {}; }
  virtual void init(Rng&) {}

  bool frozen = false;
};

// ---------------------------------------------------------------------------
// Conv3d: input (N, Cin, T, H, W), zero padding k/2, configurable stride.
// ---------------------------------------------------------------------------
class Conv3d : public Layer {
 public:
  Conv3d(std::size_t in_ch, std::size_t out_ch, std::array<std::size_t, 3> kernel,
         std::array<std::size_t, 3> stride)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), s_(stride) {
    weight_ = Tensor({out_ch_, in_ch_, k_[0], k_[1], k_[2]});
    bias_ = Tensor({out_ch_});
  }

  std::string kind() const override { return "conv3d"; }
  std::string spec() const override {
    std::ostringstream os;
    os << "conv3d(" << in_ch_ << "->" << out_ch_ << ",k=" << k_[0] << "x" << k_[1] << "x" << k_[2]
       << ",s=" << s_[0] << "x" << s_[1] << "x" << s_[2] << ")";
    return os.str();
  }

  void init(Rng& rng) override {
    const std::size_t fan_in = in_ch_ * k_[0] * k_[1] * k_[2];
    const double lim = std::sqrt(3.0 / static_cast<double>(fan_in));
    for (auto& w : weight_.v) w = rng.uniform(-lim, lim);
    bias_.fill(0.0);
  }

  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    if (in.size() != 4 || in[0] != in_ch_)
      throw ShapeError("conv3d: expected (C=" + std::to_string(in_ch_) + ",T,H,W), got " +
                       shape_str(in));
    return {out_ch_, out_dim(in[1], 0), out_dim(in[2], 1), out_dim(in[3], 2)};
  }

  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode) override {
    const auto& sh = in.shape;  // (N, C, T, H, W)
    const std::size_t n = sh[0], T = sh[2], H = sh[3], W = sh[4];
    const std::size_t To = out_dim(T, 0), Ho = out_dim(H, 1), Wo = out_dim(W, 2);
    const std::size_t patch = in_ch_ * k_[0] * k_[1] * k_[2];
    const std::size_t npos = To * Ho * Wo;
    out = Tensor({n, out_ch_, To, Ho, Wo});
    Tensor col({n, npos, patch});
    for (std::size_t b = 0; b < n; ++b) {
      im2col(in.data() + b * in_ch_ * T * H * W, T, H, W, To, Ho, Wo,
             col.data() + b * npos * patch);
      // out[b] (out_ch x npos) = weight (out_ch x patch) * col[b]^T
      const double* cb = col.data() + b * npos * patch;
      double* ob = out.data() + b * out_ch_ * npos;
      for (std::size_t oc = 0; oc < out_ch_; ++oc) {
        const double* wrow = weight_.data() + oc * patch;
        const double bv = bias_.v[oc];
        double* orow = ob + oc * npos;
        for (std::size_t p = 0; p < npos; ++p) {
          const double* crow = cb + p * patch;
          double acc = bv;
          for (std::size_t q = 0; q < patch; ++q) acc += wrow[q] * crow[q];
          orow[p] = acc;
        }
      }
    }
    cache.in = in;
    cache.aux.clear();
    cache.aux.push_back(std::move(col));
    cache.valid = true;
  }

  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap& grads,
                const std::string& prefix) override {
    if (!cache.valid) throw std::logic_error("conv3d: backward without forward cache");
    const auto& sh = cache.in.shape;
    const std::size_t n = sh[0], T = sh[2], H = sh[3], W = sh[4];
    const std::size_t To = out_dim(T, 0), Ho = out_dim(H, 1), Wo = out_dim(W, 2);
    const std::size_t patch = in_ch_ * k_[0] * k_[1] * k_[2];
    const std::size_t npos = To * Ho * Wo;
    const Tensor& col = cache.aux[0];

    Tensor gw({out_ch_, in_ch_, k_[0], k_[1], k_[2]});
    Tensor gb({out_ch_});
    grad_in = Tensor(cache.in.shape);
    Tensor gcol({npos, patch});
    for (std::size_t b = 0; b < n; ++b) {
      const double* cb = col.data() + b * npos * patch;
      const double* gob = grad_out.data() + b * out_ch_ * npos;
      gcol.fill(0.0);
      for (std::size_t oc = 0; oc < out_ch_; ++oc) {
        const double* gorow = gob + oc * npos;
        double* gwrow = gw.data() + oc * patch;
        const double* wrow = weight_.data() + oc * patch;
        double gbacc = 0.0;
        for (std::size_t p = 0; p < npos; ++p) {
          const double g = gorow[p];
          gbacc += g;
          const double* crow = cb + p * patch;
          double* gcrow = gcol.data() + p * patch;
          for (std::size_t q = 0; q < patch; ++q) {
            gwrow[q] += g * crow[q];
            gcrow[q] += g * wrow[q];
          }
        }
        gb.v[oc] += gbacc;
      }
      col2im(gcol.data(), T, H, W, To, Ho, Wo, grad_in.data() + b * in_ch_ * T * H * W);
    }
    if (!frozen) {
      grads.emplace(prefix + ".weight", std::move(gw));
      grads.emplace(prefix + ".bias", std::move(gb));
    }
  }

  std::vector<std::pair<std::string, Tensor*>> params() override {
    return {{"weight", &weight_}, {"bias", &bias_}};
  }

 private:
  std::size_t out_dim(std::size_t d, int axis) const {
    // zero padding k/2 on both sides
    const std::size_t pad = k_[axis] / 2;
    return (d + 2 * pad - k_[axis]) / s_[axis] + 1;
  }

  void im2col(const double* in, std::size_t T, std::size_t H, std::size_t W, std::size_t To,
              std::size_t Ho, std::size_t Wo, double* col) const {
    const std::ptrdiff_t pt = static_cast<std::ptrdiff_t>(k_[0] / 2);
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(k_[1] / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(k_[2] / 2);
    std::size_t idx = 0;
    for (std::size_t to = 0; to < To; ++to) {
      for (std::size_t ho = 0; ho < Ho; ++ho) {
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          for (std::size_t c = 0; c < in_ch_; ++c) {
            const double* cin = in + c * T * H * W;
            for (std::size_t kt = 0; kt < k_[0]; ++kt) {
              const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(to * s_[0] + kt) - pt;
              for (std::size_t kh = 0; kh < k_[1]; ++kh) {
                const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(ho * s_[1] + kh) - ph;
                for (std::size_t kw = 0; kw < k_[2]; ++kw) {
                  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(wo * s_[2] + kw) - pw;
                  double val = 0.0;
                  if (t >= 0 && t < static_cast<std::ptrdiff_t>(T) && h >= 0 &&
                      h < static_cast<std::ptrdiff_t>(H) && w >= 0 &&
                      w < static_cast<std::ptrdiff_t>(W))
                    val = cin[(static_cast<std::size_t>(t) * H + static_cast<std::size_t>(h)) * W +
                              static_cast<std::size_t>(w)];
                  col[idx++] = val;
                }
              }
            }
          }
        }
      }
    }
  }

  void col2im(const double* gcol, std::size_t T, std::size_t H, std::size_t W, std::size_t To,
              std::size_t Ho, std::size_t Wo, double* gin) const {
    const std::ptrdiff_t pt = static_cast<std::ptrdiff_t>(k_[0] / 2);
    const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(k_[1] / 2);
    const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(k_[2] / 2);
    std::size_t idx = 0;
    for (std::size_t to = 0; to < To; ++to) {
      for (std::size_t ho = 0; ho < Ho; ++ho) {
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          for (std::size_t c = 0; c < in_ch_; ++c) {
            double* cin = gin + c * T * H * W;
            for (std::size_t kt = 0; kt < k_[0]; ++kt) {
              const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(to * s_[0] + kt) - pt;
              for (std::size_t kh = 0; kh < k_[1]; ++kh) {
                const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(ho * s_[1] + kh) - ph;
                for (std::size_t kw = 0; kw < k_[2]; ++kw) {
                  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(wo * s_[2] + kw) - pw;
                  if (t >= 0 && t < static_cast<std::ptrdiff_t>(T) && h >= 0 &&
                      h < static_cast<std::ptrdiff_t>(H) && w >= 0 &&
                      w < static_cast<std::ptrdiff_t>(W))
                    cin[(static_cast<std::size_t>(t) * H + static_cast<std::size_t>(h)) * W +
                        static_cast<std::size_t>(w)] += gcol[idx];
                  ++idx;
                }
              }
            }
          }
        }
      }
    }
  }

  std::size_t in_ch_, out_ch_;
  std::array<std::size_t, 3> k_, s_;
  Tensor weight_, bias_;
};

// ---------------------------------------------------------------------------
// BatchNorm3d over (N, C, T, H, W); running stats updated with momentum 0.1.
// ---------------------------------------------------------------------------
class BatchNorm3d : public Layer {
 public:
  explicit BatchNorm3d(std::size_t channels, double eps = 1e-5, double momentum = 0.1)
      : ch_(channels), eps_(eps), momentum_(momentum) {
    gamma_ = Tensor({ch_});
    beta_ = Tensor({ch_});
    running_mean_ = Tensor({ch_});
    running_var_ = Tensor({ch_});
    gamma_.fill(1.0);
    running_var_.fill(1.0);
  }

  std::string kind() const override { return "batchnorm3d"; }
  std::string spec() const override { return "batchnorm3d(" + std::to_string(ch_) + ")"; }

  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    if (in.size() != 4 || in[0] != ch_)
      throw ShapeError("batchnorm3d: expected C=" + std::to_string(ch_) + ", got " + shape_str(in));
    return in;
  }

  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode mode) override {
    const std::size_t n = in.shape[0];
    const std::size_t spatial = in.size() / (n * ch_);
    out = Tensor(in.shape);
    Tensor mean({ch_}), var({ch_});
    if (mode == Mode::train) {
      const double cnt = static_cast<double>(n * spatial);
      for (std::size_t c = 0; c < ch_; ++c) {
        double m = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const double* p = in.data() + (b * ch_ + c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) m += p[i];
        }
        m /= cnt;
        double s = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const double* p = in.data() + (b * ch_ + c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            const double d = p[i] - m;
            s += d * d;
          }
        }
        mean.v[c] = m;
        var.v[c] = s / cnt;
        running_mean_.v[c] = (1.0 - momentum_) * running_mean_.v[c] + momentum_ * mean.v[c];
        running_var_.v[c] = (1.0 - momentum_) * running_var_.v[c] + momentum_ * var.v[c];
      }
    } else {
      mean = running_mean_;
      var = running_var_;
    }
    Tensor xhat(in.shape);
    for (std::size_t c = 0; c < ch_; ++c) {
      const double inv = 1.0 / std::sqrt(var.v[c] + eps_);
      const double g = gamma_.v[c], bt = beta_.v[c], m = mean.v[c];
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = in.data() + (b * ch_ + c) * spatial;
        double* xh = xhat.data() + (b * ch_ + c) * spatial;
        double* o = out.data() + (b * ch_ + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          xh[i] = (p[i] - m) * inv;
          o[i] = g * xh[i] + bt;
        }
      }
    }
    cache.in = in;
    cache.aux.clear();
    cache.aux.push_back(std::move(xhat));
    cache.aux.push_back(std::move(var));
    cache.aux.push_back(Tensor({1}, {mode == Mode::train ? 1.0 : 0.0}));
    cache.valid = true;
  }

  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap& grads,
                const std::string& prefix) override {
    if (!cache.valid) throw std::logic_error("batchnorm3d: backward without forward cache");
    const std::size_t n = cache.in.shape[0];
    const std::size_t spatial = cache.in.size() / (n * ch_);
    const Tensor& xhat = cache.aux[0];
    const Tensor& var = cache.aux[1];
    const bool train_stats = cache.aux[2].v[0] != 0.0;
    const double cnt = static_cast<double>(n * spatial);

    Tensor gg({ch_}), gb({ch_});
    grad_in = Tensor(cache.in.shape);
    for (std::size_t c = 0; c < ch_; ++c) {
      const double inv = 1.0 / std::sqrt(var.v[c] + eps_);
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* go = grad_out.data() + (b * ch_ + c) * spatial;
        const double* xh = xhat.data() + (b * ch_ + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          sum_g += go[i];
          sum_gx += go[i] * xh[i];
        }
      }
      gb.v[c] = sum_g;
      gg.v[c] = sum_gx;
      const double g = gamma_.v[c];
      for (std::size_t b = 0; b < n; ++b) {
        const double* go = grad_out.data() + (b * ch_ + c) * spatial;
        const double* xh = xhat.data() + (b * ch_ + c) * spatial;
        double* gi = grad_in.data() + (b * ch_ + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          if (train_stats) {
            gi[i] = g * inv * (go[i] - sum_g / cnt - xh[i] * sum_gx / cnt);
          } else {
            gi[i] = g * inv * go[i];
          }
        }
      }
    }
    if (!frozen) {
      grads.emplace(prefix + ".gamma", std::move(gg));
      grads.emplace(prefix + ".beta", std::move(gb));
    }
  }

  std::vector<std::pair<std::string, Tensor*>> params() override {
    return {{"gamma", &gamma_}, {"beta", &beta_}};
  }
  std::vector<std::pair<std::string, Tensor*>> buffers() override {
    return {{"running_mean", &running_mean_}, {"running_var", &running_var_}};
  }

 private:
  std::size_t ch_;
  double eps_, momentum_;
  Tensor gamma_, beta_, running_mean_, running_var_;
};

class Relu : public Layer {
 public:
  std::string kind() const override { return "relu"; }
  std::string spec() const override { return "relu"; }
  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    return in;
  }
  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode) override {
    out = in;
    for (auto& x : out.v) x = x > 0.0 ? x : 0.0;
    cache.in = in;
    cache.valid = true;
  }
  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap&,
                const std::string&) override {
    grad_in = grad_out;
    for (std::size_t i = 0; i < grad_in.size(); ++i)
      if (cache.in.v[i] <= 0.0) grad_in.v[i] = 0.0;
  }
};

// Global average pool (N, C, T, H, W) -> (N, C).
class GlobalAvgPool : public Layer {
 public:
  std::string kind() const override { return "spatial_pool"; }
  std::string spec() const override { return "spatial_pool"; }
  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    if (in.size() != 4) throw ShapeError("spatial_pool: expected (C,T,H,W), got " + shape_str(in));
    return {in[0]};
  }
  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode) override {
    const std::size_t n = in.shape[0], c = in.shape[1];
    const std::size_t spatial = in.size() / (n * c);
    out = Tensor({n, c});
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = in.data() + (b * c + ch) * spatial;
        double acc = 0.0;
        for (std::size_t i = 0; i < spatial; ++i) acc += p[i];
        out.v[b * c + ch] = acc / static_cast<double>(spatial);
      }
    cache.in = in;
    cache.valid = true;
  }
  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap&,
                const std::string&) override {
    const std::size_t n = cache.in.shape[0], c = cache.in.shape[1];
    const std::size_t spatial = cache.in.size() / (n * c);
    grad_in = Tensor(cache.in.shape);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = grad_out.v[b * c + ch] / static_cast<double>(spatial);
        double* p = grad_in.data() + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) p[i] = g;
      }
  }
};

class Flatten : public Layer {
 public:
  std::string kind() const override { return "flatten"; }
  std::string spec() const override { return "flatten"; }
  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    return {Tensor::count(in)};
  }
  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode) override {
    out = in;
    out.shape = {in.shape[0], in.size() / in.shape[0]};
    cache.in.shape = in.shape;
    cache.valid = true;
  }
  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap&,
                const std::string&) override {
    grad_in = grad_out;
    grad_in.shape = cache.in.shape;
  }
};

class FullyConnected : public Layer {
 public:
  FullyConnected(std::size_t in_dim, std::size_t out_dim) : in_(in_dim), out_(out_dim) {
    weight_ = Tensor({out_, in_});
    bias_ = Tensor({out_});
  }
  std::string kind() const override { return "fully_connected"; }
  std::string spec() const override {
    return "fc(" + std::to_string(in_) + "->" + std::to_string(out_) + ")";
  }
  void init(Rng& rng) override {
    const double lim = std::sqrt(3.0 / static_cast<double>(in_));
    for (auto& w : weight_.v) w = rng.uniform(-lim, lim);
    bias_.fill(0.0);
  }
  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    if (in.size() != 1 || in[0] != in_)
      throw ShapeError("fc: expected dim " + std::to_string(in_) + ", got " + shape_str(in));
    return {out_};
  }
  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode) override {
    const std::size_t n = in.shape[0];
    out = Tensor({n, out_});
    for (std::size_t b = 0; b < n; ++b) {
      const double* x = in.data() + b * in_;
      for (std::size_t o = 0; o < out_; ++o) {
        const double* w = weight_.data() + o * in_;
        double acc = bias_.v[o];
        for (std::size_t i = 0; i < in_; ++i) acc += w[i] * x[i];
        out.v[b * out_ + o] = acc;
      }
    }
    cache.in = in;
    cache.valid = true;
  }
  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap& grads,
                const std::string& prefix) override {
    const std::size_t n = cache.in.shape[0];
    Tensor gw({out_, in_}), gb({out_});
    grad_in = Tensor(cache.in.shape);
    for (std::size_t b = 0; b < n; ++b) {
      const double* x = cache.in.data() + b * in_;
      const double* go = grad_out.data() + b * out_;
      double* gi = grad_in.data() + b * in_;
      for (std::size_t o = 0; o < out_; ++o) {
        const double g = go[o];
        gb.v[o] += g;
        const double* w = weight_.data() + o * in_;
        double* gwr = gw.data() + o * in_;
        for (std::size_t i = 0; i < in_; ++i) {
          gwr[i] += g * x[i];
          gi[i] += g * w[i];
        }
      }
    }
    if (!frozen) {
      grads.emplace(prefix + ".weight", std::move(gw));
      grads.emplace(prefix + ".bias", std::move(gb));
    }
  }
  std::vector<std::pair<std::string, Tensor*>> params() override {
    return {{"weight", &weight_}, {"bias", &bias_}};
  }

 private:
  std::size_t in_, out_;
  Tensor weight_, bias_;
};

class Sigmoid : public Layer {
 public:
  std::string kind() const override { return "sigmoid"; }
  std::string spec() const override { return "sigmoid"; }
  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    return in;
  }
  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode) override {
    out = in;
    for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    cache.out = out;
    cache.valid = true;
  }
  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap&,
                const std::string&) override {
    grad_in = grad_out;
    for (std::size_t i = 0; i < grad_in.size(); ++i) {
      const double y = cache.out.v[i];
      grad_in.v[i] *= y * (1.0 - y);
    }
  }
};

// Softmax over the trailing dimension of (N, K).
class Softmax : public Layer {
 public:
  std::string kind() const override { return "softmax"; }
  std::string spec() const override { return "softmax"; }
  std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
    return in;
  }
  void forward(const Tensor& in, Tensor& out, LayerCache& cache, Mode) override {
    const std::size_t n = in.shape[0], k = in.size() / n;
    out = Tensor(in.shape);
    for (std::size_t b = 0; b < n; ++b) {
      const double* x = in.data() + b * k;
      double* y = out.data() + b * k;
      double mx = x[0];
      for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, x[i]);
      double z = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        y[i] = std::exp(x[i] - mx);
        z += y[i];
      }
      for (std::size_t i = 0; i < k; ++i) y[i] /= z;
    }
    cache.out = out;
    cache.valid = true;
  }
  void backward(const LayerCache& cache, const Tensor& grad_out, Tensor& grad_in, GradMap&,
                const std::string&) override {
    const std::size_t n = cache.out.shape[0], k = cache.out.size() / n;
    grad_in = Tensor(cache.out.shape);
    for (std::size_t b = 0; b < n; ++b) {
      const double* y = cache.out.data() + b * k;
      const double* go = grad_out.data() + b * k;
      double* gi = grad_in.data() + b * k;
      double dot = 0.0;
      for (std::size_t i = 0; i < k; ++i) dot += y[i] * go[i];
      for (std::size_t i = 0; i < k; ++i) gi[i] = y[i] * (go[i] - dot);
    }
  }
};

// ---------------------------------------------------------------------------
// Network: an ordered layer stack with shape checking and named parameters.
// ---------------------------------------------------------------------------
struct NetworkCache {
  std::vector<LayerCache> layers;
};

class Network {
 public:
  std::vector<std::size_t> input_shape;  // without batch dim

  Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  std::size_t num_layers() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

  void init_params(Rng& rng) {
    for (auto& l : layers_) l->init(rng);
  }

  void freeze_all(bool on = true) {
    for (auto& l : layers_) l->frozen = on;
  }

  std::vector<std::size_t> output_shape() const {
    auto s = input_shape;
    for (const auto& l : layers_) s = l->out_shape(s);
    return s;
  }

  Tensor forward(const Tensor& in, Mode mode, NetworkCache* cache = nullptr) const {
    if (in.shape.size() != input_shape.size() + 1 ||
        !std::equal(input_shape.begin(), input_shape.end(), in.shape.begin() + 1))
      throw ShapeError("network input: expected (N," + shape_str(input_shape) + "), got " +
                       shape_str(in.shape));
    NetworkCache local;
    NetworkCache& c = cache ? *cache : local;
    c.layers.assign(layers_.size(), LayerCache{});
    Tensor cur = in;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Tensor next;
      try {
        std::vector<std::size_t> unbatched(cur.shape.begin() + 1, cur.shape.end());
        layers_[i]->out_shape(unbatched);  // validates the incoming shape
        layers_[i]->forward(cur, next, c.layers[i], mode);
      } catch (const ShapeError& e) {
        throw ShapeError("layer " + std::to_string(i) + " (" + layers_[i]->kind() +
                         "): " + e.what());
      }
      cur = std::move(next);
    }
    if (!cur.all_finite()) throw NumericError("network forward produced non-finite values");
    return cur;
  }

  // Returns the input gradient; parameter gradients land in `grads` keyed by
  // "layer<i>.<param>". Frozen layers contribute no parameter gradients.
  Tensor backward(const NetworkCache& cache, const Tensor& grad_out, GradMap& grads) const {
    if (cache.layers.size() != layers_.size() || (!layers_.empty() && !cache.layers.back().valid))
      throw std::logic_error("network backward: stale or missing forward cache");
    Tensor g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      Tensor gi;
      layers_[i]->backward(cache.layers[i], g, gi, grads, "layer" + std::to_string(i));
      g = std::move(gi);
    }
    return g;
  }

  std::vector<std::pair<std::string, Tensor*>> named_params(bool trainable_only = false) const {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (trainable_only && layers_[i]->frozen) continue;
      for (auto& [name, t] : layers_[i]->params())
        out.emplace_back("layer" + std::to_string(i) + "." + name, t);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named_buffers() const {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto& [name, t] : layers_[i]->buffers())
        out.emplace_back("layer" + std::to_string(i) + "." + name, t);
    return out;
  }

  std::string spec_string() const {
    std::string s = "in=" + shape_str(input_shape) + ";";
    for (const auto& l : layers_) s += l->spec() + ";";
    return s;
  }

  std::array<std::uint8_t, 32> spec_digest() const {
    Sha256 h;
    h.update(spec_string());
    return h.digest();
  }

  // Digest over parameter bytes, used to assert frozen-encoder stability.
  std::string param_digest() const {
    Sha256 h;
    for (auto& [name, t] : named_params()) {
      h.update(name);
      h.update(t->v.data(), t->v.size() * sizeof(double));
    }
    for (auto& [name, t] : named_buffers()) {
      h.update(name);
      h.update(t->v.data(), t->v.size() * sizeof(double));
    }
    return h.hex_digest();
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------
inline constexpr double kProbClamp = 1e-7;

inline double clamp_prob(double p) { return clamp(p, kProbClamp, 1.0 - kProbClamp); }

// -ln(p_pos) - ln(1 - p_neg); gradients w.r.t. the raw (unclamped) scores.
inline double bce_pair_loss(double score_pos, double score_neg, double* grad_pos = nullptr,
                            double* grad_neg = nullptr) {
  const double p = clamp_prob(score_pos);
  const double q = clamp_prob(score_neg);
  if (grad_pos) *grad_pos = -1.0 / p;
  if (grad_neg) *grad_neg = 1.0 / (1.0 - q);
  return -std::log(p) - std::log(1.0 - q);
}

// Cross entropy against a one-hot label over softmax probabilities.
inline double ce_loss(const double* probs, std::size_t k, std::size_t label,
                      double* grad = nullptr) {
  const double p = clamp_prob(probs[label]);
  if (grad) {
    for (std::size_t i = 0; i < k; ++i) grad[i] = 0.0;
    grad[label] = -1.0 / p;
  }
  return -std::log(p);
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay:
//   v <- momentum*v + (g + wd*p);  p <- p - lr*v
// ---------------------------------------------------------------------------
struct SgdMomentum {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::map<std::string, Tensor> velocity;

  void step(const std::vector<std::pair<std::string, Tensor*>>& params, const GradMap& grads) {
    for (auto& [name, g] : grads)
      if (!g.all_finite()) throw NumericError("non-finite gradient for " + name + "; step aborted");
    for (auto& [name, p] : params) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const Tensor& g = it->second;
      if (!g.same_shape(*p)) throw ShapeError("optimizer: grad shape mismatch for " + name);
      Tensor& v = velocity.try_emplace(name, Tensor(p->shape)).first->second;
      for (std::size_t i = 0; i < p->size(); ++i) {
        v.v[i] = momentum * v.v[i] + (g.v[i] + weight_decay * p->v[i]);
        p->v[i] -= lr * v.v[i];
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check.
// loss_fn must evaluate the full forward+loss from current parameters.
// ---------------------------------------------------------------------------
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t params_checked = 0;
};

inline GradCheckReport grad_check(Network& net, const std::function<double()>& loss_fn,
                                  const GradMap& analytic, double eps = 1e-5) {
  GradCheckReport rep;
  for (auto& [name, p] : net.named_params(/*trainable_only=*/true)) {
    auto it = analytic.find(name);
    if (it == analytic.end()) throw std::logic_error("grad_check: missing analytic grad " + name);
    const Tensor& g = it->second;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double orig = p->v[i];
      p->v[i] = orig + eps;
      const double lp = loss_fn();
      p->v[i] = orig - eps;
      const double lm = loss_fn();
      p->v[i] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double diff = std::fabs(fd - g.v[i]);
      // differences below the fd noise floor count as exact (covers directions
      // whose true gradient is identically zero, e.g. a conv bias feeding bn)
      const double rel =
          diff < 1e-7 ? 0.0 : diff / std::max({std::fabs(fd), std::fabs(g.v[i]), 1e-8});
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name + "[" + std::to_string(i) + "]";
      }
      ++rep.params_checked;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "DVDW", version u16, spec digest (32 bytes), then
// named tensors as (name len u16, name bytes, rank u8, dims u32 x rank,
// float32 little-endian values).
// ---------------------------------------------------------------------------
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const std::array<std::uint8_t, 32>& spec_digest,
                                        const std::vector<std::pair<std::string, Tensor*>>& tensors) {
  std::string out = "DVDW";
  io::put_le<std::uint16_t>(out, kCheckpointVersion);
  out.append(reinterpret_cast<const char*>(spec_digest.data()), 32);
  for (auto& [name, t] : tensors) {
    io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t->shape.size()));
    for (auto d : t->shape) io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double x : t->v) {
      const float f = static_cast<float>(x);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      io::put_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

inline std::map<std::string, Tensor> parse_checkpoint(const std::string& blob,
                                                      const std::array<std::uint8_t, 32>& want_digest,
                                                      bool check_digest = true) {
  if (blob.size() < 38 || blob.compare(0, 4, "DVDW") != 0)
    throw CompatError("checkpoint: bad magic");
  std::size_t pos = 4;
  const auto version = io::get_le<std::uint16_t>(blob, pos);
  if (version != kCheckpointVersion) throw CompatError("checkpoint: unsupported version");
  std::array<std::uint8_t, 32> digest;
  std::memcpy(digest.data(), blob.data() + pos, 32);
  pos += 32;
  if (check_digest && digest != want_digest)
    throw CompatError("checkpoint: network spec digest mismatch");
  std::map<std::string, Tensor> out;
  while (pos < blob.size()) {
    const auto name_len = io::get_le<std::uint16_t>(blob, pos);
    if (pos + name_len > blob.size()) throw CompatError("checkpoint: truncated name");
    std::string name = blob.substr(pos, name_len);
    pos += name_len;
    const auto rank = io::get_le<std::uint8_t>(blob, pos);
    std::vector<std::size_t> shape;
    std::size_t cnt = 1;
    for (int i = 0; i < rank; ++i) {
      const auto d = io::get_le<std::uint32_t>(blob, pos);
      shape.push_back(d);
      cnt *= d;
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < cnt; ++i) {
      const auto bits = io::get_le<std::uint32_t>(blob, pos);
      float f;
      std::memcpy(&f, &bits, 4);
      t.v[i] = static_cast<double>(f);
    }
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& blob) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Save network parameters + buffers (and optionally optimizer velocities).
inline void save_checkpoint(const std::string& path, const Network& net,
                            const SgdMomentum* opt = nullptr) {
  std::vector<std::pair<std::string, Tensor*>> tensors = net.named_params();
  for (auto& [name, t] : net.named_buffers()) tensors.emplace_back(name, t);
  std::vector<std::pair<std::string, Tensor>> opt_copies;
  if (opt) {
    opt_copies.reserve(opt->velocity.size());
    for (auto& [name, t] : opt->velocity) opt_copies.emplace_back("opt." + name, t);
    for (auto& [name, t] : opt_copies) tensors.emplace_back(name, &t);
  }
  write_file(path, serialize_checkpoint(net.spec_digest(), tensors));
}

inline void load_checkpoint(const std::string& path, Network& net, SgdMomentum* opt = nullptr) {
  auto tensors = parse_checkpoint(read_file(path), net.spec_digest());
  auto assign = [&](const std::string& name, Tensor* dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CompatError("checkpoint: missing tensor " + name);
    if (it->second.shape != dst->shape)
      throw CompatError("checkpoint: shape mismatch for " + name);
    *dst = it->second;
  };
  for (auto& [name, t] : net.named_params()) assign(name, t);
  for (auto& [name, t] : net.named_buffers()) assign(name, t);
  if (opt) {
    opt->velocity.clear();
    for (auto& [name, t] : tensors)
      if (name.rfind("opt.", 0) == 0) opt->velocity.emplace(name.substr(4), t);
  }
}

}  // namespace dvd::nn
