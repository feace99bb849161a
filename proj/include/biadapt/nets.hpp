#pragma once

// Detector H = G(F(x)) and domain discriminator Q on top of pluggable
// backbones. dual_vit pairs a visual ViT with a frequency branch (blockwise
// DCT of YCbCr planes -> strided convs -> transformer); tiny_vit drops the
// frequency branch; tiny_cnn is a four-conv baseline.
//
// Batched layout: a batch of B images is packed as a (B*H*W) x 3 matrix with
// row index b*H*W + y*W + x; token sequences as (B*T) x C.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "biadapt/autodiff.hpp"
#include "biadapt/freqmap.hpp"
#include "biadapt/image.hpp"

namespace biadapt::nets {

using biadapt::Mat;
namespace ad = biadapt::ad;

enum class BackboneKind { dual_vit, tiny_vit, tiny_cnn };

inline const char* backbone_name(BackboneKind k) {
  switch (k) {
    case BackboneKind::dual_vit: return "dual_vit";
    case BackboneKind::tiny_vit: return "tiny_vit";
    case BackboneKind::tiny_cnn: return "tiny_cnn";
  }
  throw StateError("backbone_name: bad enum");
}

inline BackboneKind parse_backbone(const std::string& s) {
  if (s == "dual_vit") return BackboneKind::dual_vit;
  if (s == "tiny_vit") return BackboneKind::tiny_vit;
  if (s == "tiny_cnn") return BackboneKind::tiny_cnn;
  throw ConfigError("unknown backbone kind: " + s);
}

struct BackboneConfig {
  BackboneKind kind = BackboneKind::dual_vit;
  int side = 32;
  int visual_layers = 4;  // l
  int freq_layers = 2;    // m
  int embed_dim = 64;
  int patch = 8;
  int freq_channels = 64;  // C
  int freq_depth = 2;      // D

  static BackboneConfig desk(BackboneKind k = BackboneKind::dual_vit) {
    BackboneConfig c;
    c.kind = k;
    return c;
  }
  static BackboneConfig paper_parity(BackboneKind k = BackboneKind::dual_vit) {
    BackboneConfig c;
    c.kind = k;
    c.side = 224;
    c.visual_layers = 12;
    c.freq_layers = 4;
    c.embed_dim = 768;
    c.patch = 16;
    c.freq_channels = 768;
    c.freq_depth = 4;
    return c;
  }

  static int head_count(int dim) {
    int h = dim / 16;
    return h < 1 ? 1 : (h > 12 ? 12 : h);
  }
  int visual_heads() const { return head_count(embed_dim); }
  int freq_heads() const { return head_count(freq_channels); }
  int tokens_per_side() const { return side / patch; }
  int visual_tokens() const { return tokens_per_side() * tokens_per_side(); }

  int feature_dim() const {
    switch (kind) {
      case BackboneKind::dual_vit: return embed_dim + freq_channels;
      case BackboneKind::tiny_vit: return embed_dim;
      case BackboneKind::tiny_cnn: return 2 * embed_dim;
    }
    throw StateError("feature_dim: bad enum");
  }

  int discriminator_width() const { return embed_dim >= 256 ? 256 : 64; }
  int classifier_hidden() const {
    int h = feature_dim() / 2;
    return h < 2 ? 2 : h;
  }

  void validate() const {
    if (side <= 0) throw ConfigError("backbone: side must be positive");
    if (kind == BackboneKind::tiny_cnn) {
      if (side % 16 != 0)
        throw ConfigError("backbone: tiny_cnn needs side divisible by 16");
      if (embed_dim < 2 || embed_dim % 2 != 0)
        throw ConfigError("backbone: tiny_cnn needs even embed_dim >= 2");
      return;
    }
    if (visual_layers < 1) throw ConfigError("backbone: need l >= 1");
    if (patch < 1 || side % patch != 0)
      throw ConfigError("backbone: side must be divisible by patch");
    if (embed_dim < visual_heads() || embed_dim % visual_heads() != 0)
      throw ConfigError("backbone: embed_dim must divide into heads");
    if (kind == BackboneKind::dual_vit) {
      if (freq_layers < 1) throw ConfigError("backbone: need m >= 1");
      if (freq_depth < 1) throw ConfigError("backbone: need D >= 1");
      if (side % 8 != 0)
        throw ConfigError("backbone: frequency branch needs side % 8 == 0");
      int down = 1 << freq_depth;
      if (patch % down != 0 || side % down != 0)
        throw ConfigError(
            "backbone: patch must be divisible by 2^freq_depth");
      if (freq_channels < freq_heads() || freq_channels % freq_heads() != 0)
        throw ConfigError("backbone: freq_channels must divide into heads");
    }
  }

  bool operator==(const BackboneConfig&) const = default;
};

// ---------------------------------------------------------------------------
// parameter sets
// ---------------------------------------------------------------------------

struct ParamSet {
  std::vector<ad::Tensor> tensors;

  ad::Tensor& add(const std::string& name, Mat value) {
    for (auto& t : tensors)
      if (t.name == name) throw StateError("param set: duplicate " + name);
    tensors.emplace_back(name, std::move(value));
    return tensors.back();
  }
  ad::Tensor& at(const std::string& name) {
    for (auto& t : tensors)
      if (t.name == name) return t;
    throw StateError("param set: missing tensor " + name);
  }
  const ad::Tensor& at(const std::string& name) const {
    for (auto& t : tensors)
      if (t.name == name) return t;
    throw StateError("param set: missing tensor " + name);
  }
  bool empty() const { return tensors.empty(); }
  void zero_grad() {
    for (auto& t : tensors) t.zero_grad();
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
    return n;
  }
};

struct ModelState {
  BackboneConfig cfg;
  ParamSet F;        // teacher extractor
  ParamSet F_prime;  // student extractor
  ParamSet G;        // classifier
  ParamSet Q;        // discriminator
};

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

namespace detail {

inline Mat filled_normal(long r, long c, double stddev, Rng& rng) {
  Mat m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = stddev * rng.normal();
  return m;
}

// each tensor draws from its own stream so adding a tensor elsewhere
// cannot shift another tensor's initial values
inline void add_linear(ParamSet& p, Rng& root, const std::string& name,
                       long fan_in, long fan_out) {
  Rng rw = root.fork(name + ".w");
  double s = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  p.add(name + ".w", filled_normal(fan_in, fan_out, s, rw));
  p.add(name + ".b", Mat::Zero(1, fan_out));
}

inline void add_conv(ParamSet& p, Rng& root, const std::string& name,
                     long cin, long cout, long k) {
  Rng rw = root.fork(name + ".w");
  double s = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  p.add(name + ".w", filled_normal(cin * k * k, cout, s, rw));
  p.add(name + ".b", Mat::Zero(1, cout));
}

inline void add_layernorm(ParamSet& p, const std::string& name, long dim) {
  p.add(name + ".g", Mat::Ones(1, dim));
  p.add(name + ".b", Mat::Zero(1, dim));
}

inline void add_transformer_layer(ParamSet& p, Rng& root,
                                  const std::string& prefix, long dim) {
  add_layernorm(p, prefix + ".ln1", dim);
  add_linear(p, root, prefix + ".qkv", dim, 3 * dim);
  add_linear(p, root, prefix + ".proj", dim, dim);
  add_layernorm(p, prefix + ".ln2", dim);
  add_linear(p, root, prefix + ".fc1", dim, 4 * dim);
  add_linear(p, root, prefix + ".fc2", 4 * dim, dim);
}

inline void add_pos(ParamSet& p, Rng& root, const std::string& name, long t,
                    long dim) {
  Rng rr = root.fork(name);
  p.add(name, filled_normal(t, dim, 0.02, rr));
}

}  // namespace detail

inline ParamSet init_extractor(const BackboneConfig& cfg, Rng& root) {
  cfg.validate();
  ParamSet p;
  if (cfg.kind == BackboneKind::tiny_cnn) {
    int e = cfg.embed_dim;
    int chans[5] = {3, e / 2, e, e, 2 * e};
    for (int i = 0; i < 4; ++i)
      detail::add_conv(p, root, "c.conv" + std::to_string(i), chans[i],
                       chans[i + 1], 3);
    return p;
  }
  detail::add_linear(p, root, "v.embed", 3L * cfg.patch * cfg.patch,
                     cfg.embed_dim);
  detail::add_pos(p, root, "v.pos", cfg.visual_tokens(), cfg.embed_dim);
  for (int i = 0; i < cfg.visual_layers; ++i)
    detail::add_transformer_layer(p, root, "v.l" + std::to_string(i),
                                  cfg.embed_dim);
  detail::add_layernorm(p, "v.ln", cfg.embed_dim);
  if (cfg.kind == BackboneKind::dual_vit) {
    int cin = 3;
    for (int i = 0; i < cfg.freq_depth; ++i) {
      detail::add_conv(p, root, "f.conv" + std::to_string(i), cin,
                       cfg.freq_channels, 3);
      cin = cfg.freq_channels;
    }
    detail::add_pos(p, root, "f.pos", cfg.visual_tokens(), cfg.freq_channels);
    for (int i = 0; i < cfg.freq_layers; ++i)
      detail::add_transformer_layer(p, root, "f.l" + std::to_string(i),
                                    cfg.freq_channels);
    detail::add_layernorm(p, "f.ln", cfg.freq_channels);
  }
  return p;
}

inline ParamSet init_classifier(const BackboneConfig& cfg, Rng& root) {
  ParamSet p;
  detail::add_linear(p, root, "g.fc1", cfg.feature_dim(),
                     cfg.classifier_hidden());
  detail::add_linear(p, root, "g.fc2", cfg.classifier_hidden(), 2);
  return p;
}

inline ParamSet init_discriminator(const BackboneConfig& cfg, Rng& root) {
  ParamSet p;
  int w = cfg.discriminator_width();
  detail::add_linear(p, root, "q.fc1", cfg.feature_dim(), w);
  detail::add_linear(p, root, "q.fc2", w, w);
  detail::add_linear(p, root, "q.fc3", w, 1);
  return p;
}

inline void init_student_from_teacher(ModelState& state) {
  state.F_prime = state.F;
  state.F_prime.zero_grad();
}

inline ModelState init_model_state(const BackboneConfig& cfg,
                                   std::uint64_t seed) {
  cfg.validate();
  ModelState s;
  s.cfg = cfg;
  Rng root(seed);
  Rng rf = root.fork("F");
  Rng rg = root.fork("G");
  Rng rq = root.fork("Q");
  s.F = init_extractor(cfg, rf);
  s.G = init_classifier(cfg, rg);
  s.Q = init_discriminator(cfg, rq);
  init_student_from_teacher(s);
  return s;
}

// ---------------------------------------------------------------------------
// forward passes (tape)
// ---------------------------------------------------------------------------

namespace detail {

// YCbCr then blockwise orthonormal DCT; both linear, so the backward pass
// applies the transposed (= inverse) transforms to the gradient
inline ad::Value frequency_value(ad::Tape& t, const ad::Value& rgb, int b,
                                 int h, int w) {
  Mat f = freq::dct8_rows(freq::ycbcr_rows(rgb.val()), b, h, w, false);
  bool ng = t.needs_grad(rgb.idx);
  int xi = rgb.idx;
  ad::Tape::Backprop bp;
  if (ng)
    bp = [xi, b, h, w](ad::Tape& tp, const Mat& g) {
      Mat gy = freq::dct8_rows(g, b, h, w, true);
      tp.accum(xi, gy * freq::ycbcr_matrix());
    };
  return t.push(std::move(f), ng, std::move(bp));
}

inline ad::Value linear(ad::Tape& t, ParamSet& p, const std::string& name,
                        const ad::Value& x, bool trainable) {
  auto w = t.param(p.at(name + ".w"), trainable);
  auto b = t.param(p.at(name + ".b"), trainable);
  return ad::add_rowvec(ad::matmul(x, w), b);
}

inline ad::Value conv3x3(ad::Tape& t, ParamSet& p, const std::string& name,
                         const ad::Value& x, const ad::ConvGeom& g,
                         bool trainable) {
  auto cols = ad::im2col(x, g);
  return linear(t, p, name, cols, trainable);
}

inline ad::Value transformer_layer(ad::Tape& t, ParamSet& p,
                                   const std::string& prefix,
                                   const ad::Value& x, int b, int t_len,
                                   int heads, bool trainable) {
  auto bind = [&](const std::string& n) { return t.param(p.at(n), trainable); };
  auto h = ad::layer_norm(x, bind(prefix + ".ln1.g"), bind(prefix + ".ln1.b"));
  auto qkv = linear(t, p, prefix + ".qkv", h, trainable);
  auto att = ad::attention(qkv, b, t_len, heads);
  auto x1 = ad::add(x, linear(t, p, prefix + ".proj", att, trainable));
  auto h2 =
      ad::layer_norm(x1, bind(prefix + ".ln2.g"), bind(prefix + ".ln2.b"));
  auto mlp = linear(t, p, prefix + ".fc2",
                    ad::gelu(linear(t, p, prefix + ".fc1", h2, trainable)),
                    trainable);
  return ad::add(x1, mlp);
}

}  // namespace detail

struct FreqActivation {
  ad::Value value;  // conv-stack output, (B*h*w) x C
  int h = 0;
  int w = 0;
};

// Detaches a named activation into a gradient-enabled leaf during
// extractor_forward so attribution code can read d(score)/d(activation) off
// the tape after backward(). Detaching is sound here: those gradients are
// never propagated upstream of the tapped activation. Layers:
//   "freq_conv"      last frequency-branch conv activation (dual_vit)
//   "visual_tokens"  post-norm visual token grid (dual_vit, tiny_vit)
//   "conv"           last conv activation (tiny_cnn)
struct GradTap {
  std::string layer;
  ad::Value value;  // set during the forward pass when the layer matches
  int h = 0;        // activation grid rows (value has h*w rows per image)
  int w = 0;
};

// runs the frequency conv stack; exposed separately so attribution maps can
// hook the last conv activation
inline FreqActivation freq_conv_stack(ad::Tape& t, ParamSet& p,
                                      const ad::Value& images, int batch,
                                      const BackboneConfig& cfg,
                                      bool trainable) {
  auto x = detail::frequency_value(t, images, batch, cfg.side, cfg.side);
  int h = cfg.side, w = cfg.side, cin = 3;
  for (int i = 0; i < cfg.freq_depth; ++i) {
    ad::ConvGeom g;
    g.b = batch;
    g.c = cin;
    g.h = h;
    g.w = w;
    g.k = 3;
    g.stride = 2;
    g.pad = 1;
    x = ad::relu(
        detail::conv3x3(t, p, "f.conv" + std::to_string(i), x, g, trainable));
    h = g.oh();
    w = g.ow();
    cin = cfg.freq_channels;
  }
  return {x, h, w};
}

inline ad::Value extractor_forward(ad::Tape& t, ParamSet& p,
                                   const ad::Value& images, int batch,
                                   const BackboneConfig& cfg, bool trainable,
                                   GradTap* tap = nullptr) {
  cfg.validate();
  long expect = static_cast<long>(batch) * cfg.side * cfg.side;
  if (images.rows() != expect || images.cols() != 3)
    throw ShapeError("extractor: image batch shape mismatch");
  // center pixels: the shared mean-image response otherwise dwarfs the
  // image-dependent part of every embedding and stalls SGD on the head
  auto px = ad::affine(images, 1.0, -0.5);
  auto hook = [&](ad::Value v, const char* layer, int h, int w) {
    if (tap == nullptr || tap->layer != layer) return v;
    v = t.leaf(v.val());
    tap->value = v;
    tap->h = h;
    tap->w = w;
    return v;
  };

  if (cfg.kind == BackboneKind::tiny_cnn) {
    auto x = px;
    int h = cfg.side, w = cfg.side;
    int e = cfg.embed_dim;
    int chans[5] = {3, e / 2, e, e, 2 * e};
    for (int i = 0; i < 4; ++i) {
      ad::ConvGeom g;
      g.b = batch;
      g.c = chans[i];
      g.h = h;
      g.w = w;
      g.k = 3;
      g.stride = 2;
      g.pad = 1;
      x = ad::relu(detail::conv3x3(t, p, "c.conv" + std::to_string(i), x, g,
                                   trainable));
      h = g.oh();
      w = g.ow();
    }
    x = hook(x, "conv", h, w);
    return ad::mean_tokens(x, batch, h * w);
  }

  auto bind = [&](const std::string& n) { return t.param(p.at(n), trainable); };
  int tv = cfg.visual_tokens();
  auto tokens = ad::patchify(px, batch, cfg.side, cfg.side, cfg.patch);
  auto x = ad::add_posembed(detail::linear(t, p, "v.embed", tokens, trainable),
                            bind("v.pos"), batch);
  for (int i = 0; i < cfg.visual_layers; ++i)
    x = detail::transformer_layer(t, p, "v.l" + std::to_string(i), x, batch,
                                  tv, cfg.visual_heads(), trainable);
  x = ad::layer_norm(x, bind("v.ln.g"), bind("v.ln.b"));
  x = hook(x, "visual_tokens", cfg.tokens_per_side(), cfg.tokens_per_side());
  auto visual = ad::mean_tokens(x, batch, tv);
  if (cfg.kind == BackboneKind::tiny_vit) return visual;

  auto fa = freq_conv_stack(t, p, px, batch, cfg, trainable);
  ad::Value fx = hook(fa.value, "freq_conv", fa.h, fa.w);
  int factor = cfg.patch >> cfg.freq_depth;
  if (factor > 1) fx = ad::avg_pool(fx, batch, fa.h, fa.w, factor);
  fx = ad::add_posembed(fx, bind("f.pos"), batch);
  for (int i = 0; i < cfg.freq_layers; ++i)
    fx = detail::transformer_layer(t, p, "f.l" + std::to_string(i), fx, batch,
                                   tv, cfg.freq_heads(), trainable);
  fx = ad::layer_norm(fx, bind("f.ln.g"), bind("f.ln.b"));
  auto freq = ad::mean_tokens(fx, batch, tv);
  return ad::concat_cols(visual, freq);
}

inline ad::Value classifier_forward(ad::Tape& t, ParamSet& p,
                                    const ad::Value& f, bool trainable) {
  if (f.cols() != p.at("g.fc1.w").value.rows())
    throw ShapeError("classifier: feature length mismatch");
  auto h = ad::gelu(detail::linear(t, p, "g.fc1", f, trainable));
  return detail::linear(t, p, "g.fc2", h, trainable);
}

inline ad::Value discriminator_forward(ad::Tape& t, ParamSet& p,
                                       const ad::Value& f, bool trainable) {
  if (f.cols() != p.at("q.fc1.w").value.rows())
    throw ShapeError("discriminator: feature length mismatch");
  auto h1 = ad::relu(detail::linear(t, p, "q.fc1", f, trainable));
  auto h2 = ad::relu(detail::linear(t, p, "q.fc2", h1, trainable));
  return ad::sigmoid(detail::linear(t, p, "q.fc3", h2, trainable));
}

// ---------------------------------------------------------------------------
// batching helpers and single-sample wrappers
// ---------------------------------------------------------------------------

inline Mat pack_images(const std::vector<const Image*>& batch) {
  if (batch.empty()) throw SizeError("pack_images: empty batch");
  long hw = static_cast<long>(batch[0]->h) * batch[0]->w;
  Mat out(static_cast<long>(batch.size()) * hw, 3);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Image& im = *batch[i];
    if (static_cast<long>(im.h) * im.w != hw)
      throw ShapeError("pack_images: mixed image sizes");
    out.middleRows(static_cast<long>(i) * hw, hw) = image_rows(im);
  }
  return out;
}

inline Mat extract_features(ParamSet& theta_F, const Image& img,
                            const BackboneConfig& cfg) {
  if (img.h != cfg.side || img.w != cfg.side)
    throw ShapeError("extract_features: image size mismatch");
  ad::Tape t;
  auto f = extractor_forward(t, theta_F, t.input(image_rows(img)), 1, cfg,
                             false);
  return f.val();
}

inline Mat classify(ParamSet& theta_G, const Mat& f) {
  ad::Tape t;
  return classifier_forward(t, theta_G, t.input(f), false).val();
}

inline double discriminate(ParamSet& theta_Q, const Mat& f) {
  ad::Tape t;
  double p = discriminator_forward(t, theta_Q, t.input(f), false).val()(0, 0);
  // sigmoid saturates to exactly 0/1 in doubles beyond |x| ~ 37
  return std::min(std::max(p, 1e-15), 1.0 - 1e-15);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint32_t kCheckpointMagic = 0x50444142;  // "BADP"
constexpr std::uint32_t kCheckpointVersion = 1;

struct FileCloser {
  std::FILE* f = nullptr;
  ~FileCloser() {
    if (f != nullptr) std::fclose(f);
  }
};

inline void put_bytes(std::FILE* f, const void* p, std::size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw IoError("checkpoint: write failed");
}
inline void get_bytes(std::FILE* f, void* p, std::size_t n) {
  if (std::fread(p, 1, n, f) != n)
    throw IoError("checkpoint: truncated file");
}
inline void put_u32(std::FILE* f, std::uint32_t v) { put_bytes(f, &v, 4); }
inline void put_i64(std::FILE* f, std::int64_t v) { put_bytes(f, &v, 8); }
inline void put_str(std::FILE* f, const std::string& s) {
  put_i64(f, static_cast<std::int64_t>(s.size()));
  put_bytes(f, s.data(), s.size());
}
inline std::uint32_t get_u32(std::FILE* f) {
  std::uint32_t v;
  get_bytes(f, &v, 4);
  return v;
}
inline std::int64_t get_i64(std::FILE* f) {
  std::int64_t v;
  get_bytes(f, &v, 8);
  return v;
}
inline std::string get_str(std::FILE* f) {
  std::int64_t n = get_i64(f);
  if (n < 0 || n > (1 << 20)) throw IoError("checkpoint: bad string length");
  std::string s(static_cast<std::size_t>(n), '\0');
  get_bytes(f, s.data(), s.size());
  return s;
}

inline void put_param_set(std::FILE* f, const std::string& key,
                          const ParamSet& p) {
  put_str(f, key);
  put_i64(f, static_cast<std::int64_t>(p.tensors.size()));
  for (const auto& t : p.tensors) {
    put_str(f, t.name);
    put_i64(f, t.value.rows());
    put_i64(f, t.value.cols());
    put_bytes(f, t.value.data(),
              static_cast<std::size_t>(t.value.size()) * sizeof(double));
  }
}

inline ParamSet get_param_set(std::FILE* f) {
  ParamSet p;
  std::int64_t n = get_i64(f);
  if (n < 0 || n > (1 << 20)) throw IoError("checkpoint: bad tensor count");
  for (std::int64_t i = 0; i < n; ++i) {
    std::string name = get_str(f);
    std::int64_t r = get_i64(f), c = get_i64(f);
    if (r < 0 || c < 0 || r * c > (1LL << 32))
      throw IoError("checkpoint: bad tensor shape");
    Mat m(r, c);
    get_bytes(f, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    p.add(name, std::move(m));
  }
  return p;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelState& s) {
  detail::FileCloser fc{std::fopen(path.c_str(), "wb")};
  if (fc.f == nullptr) throw IoError("checkpoint: cannot open " + path);
  std::FILE* f = fc.f;
  detail::put_u32(f, detail::kCheckpointMagic);
  detail::put_u32(f, detail::kCheckpointVersion);
  detail::put_u32(f, static_cast<std::uint32_t>(s.cfg.kind));
  detail::put_i64(f, s.cfg.side);
  detail::put_i64(f, s.cfg.visual_layers);
  detail::put_i64(f, s.cfg.freq_layers);
  detail::put_i64(f, s.cfg.embed_dim);
  detail::put_i64(f, s.cfg.patch);
  detail::put_i64(f, s.cfg.freq_channels);
  detail::put_i64(f, s.cfg.freq_depth);
  detail::put_param_set(f, "F", s.F);
  detail::put_param_set(f, "F_prime", s.F_prime);
  detail::put_param_set(f, "G", s.G);
  detail::put_param_set(f, "Q", s.Q);
  if (std::fflush(f) != 0) throw IoError("checkpoint: flush failed");
}

// sections are read by key until EOF so a checkpoint stripped to a subset
// of parameter sets still loads (remaining sets stay empty)
inline ModelState load_checkpoint(const std::string& path) {
  detail::FileCloser fc{std::fopen(path.c_str(), "rb")};
  if (fc.f == nullptr) throw IoError("checkpoint: cannot open " + path);
  std::FILE* f = fc.f;
  if (detail::get_u32(f) != detail::kCheckpointMagic)
    throw IoError("checkpoint: not a checkpoint file");
  if (detail::get_u32(f) != detail::kCheckpointVersion)
    throw IoError("checkpoint: unsupported version");
  ModelState s;
  std::uint32_t kind = detail::get_u32(f);
  if (kind > 2) throw IoError("checkpoint: bad backbone kind");
  s.cfg.kind = static_cast<BackboneKind>(kind);
  s.cfg.side = static_cast<int>(detail::get_i64(f));
  s.cfg.visual_layers = static_cast<int>(detail::get_i64(f));
  s.cfg.freq_layers = static_cast<int>(detail::get_i64(f));
  s.cfg.embed_dim = static_cast<int>(detail::get_i64(f));
  s.cfg.patch = static_cast<int>(detail::get_i64(f));
  s.cfg.freq_channels = static_cast<int>(detail::get_i64(f));
  s.cfg.freq_depth = static_cast<int>(detail::get_i64(f));
  s.cfg.validate();
  for (;;) {
    int ch = std::fgetc(f);
    if (ch == EOF) break;
    std::ungetc(ch, f);
    std::string key = detail::get_str(f);
    ParamSet p = detail::get_param_set(f);
    if (key == "F")
      s.F = std::move(p);
    else if (key == "F_prime")
      s.F_prime = std::move(p);
    else if (key == "G")
      s.G = std::move(p);
    else if (key == "Q")
      s.Q = std::move(p);
    else
      throw IoError("checkpoint: unknown section " + key);
  }
  return s;
}

}  // namespace biadapt::nets
