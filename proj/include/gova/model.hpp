#pragma once

// Toy grounded masked-language model: word and patch encoders, a joint
// cross-encoder, a query-based object decoder, a text decoder attending to
// the decoded objects, and MLM / box / position-alignment / embedding heads.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "gova/autograd.hpp"
#include "gova/dataworld.hpp"
#include "gova/error.hpp"
#include "gova/rng.hpp"

namespace gova {

using ad::Mat;

enum class Variant { kFull, kNoGrounding, kNoObjects, kTextOnly };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoGrounding: return "no_grounding";
    case Variant::kNoObjects: return "no_objects";
    case Variant::kTextOnly: return "text_only";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::kFull, Variant::kNoGrounding, Variant::kNoObjects, Variant::kTextOnly})
    if (variant_name(v) == s) return v;
  fail(ErrorKind::kConfig, "unknown variant '" + std::string(s) + "'");
}

inline bool has_object_decoder(Variant v) { return v == Variant::kFull || v == Variant::kNoGrounding; }
inline bool has_image(Variant v) { return v != Variant::kTextOnly; }
inline bool has_alignment(Variant v) { return v == Variant::kFull; }

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int cross_blocks = 2;
  int object_blocks = 2;
  int text_blocks = 2;
  int ffn_dim = 512;
  int n_queries = 12;
  int max_text_len = 32;
  int patch_size = 8;
  int image_width = 64;
  int image_height = 64;
  int vocab_size = 0;
  int alignment_dim = 64;
  double temperature = 0.07;
  Variant variant = Variant::kFull;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  int n_patches() const { return (image_width / patch_size) * (image_height / patch_size); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  /// Encoder depth after folding the decoder budget into it for variants
  /// without an object decoder.
  int encoder_blocks() const {
    return has_object_decoder(variant) ? cross_blocks : cross_blocks + object_blocks + text_blocks;
  }

  void validate() const {
    require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, ErrorKind::kConfig,
            "d_model must be a positive multiple of n_heads");
    require(ffn_dim > 0 && n_queries > 0 && max_text_len > 0 && alignment_dim > 0, ErrorKind::kConfig,
            "model dimensions must be positive");
    require(cross_blocks >= 0 && object_blocks >= 0 && text_blocks >= 0, ErrorKind::kConfig,
            "block counts must be nonnegative");
    require(patch_size > 0 && image_width % patch_size == 0 && image_height % patch_size == 0, ErrorKind::kConfig,
            "image size must be divisible by patch_size");
    require(vocab_size > Vocabulary::kNoObj, ErrorKind::kConfig, "vocab_size must exceed the reserved ids");
    require(temperature > 0.0, ErrorKind::kConfig, "temperature must be positive");
  }
};

/// Desk-scale defaults.
inline ModelConfig desk_model(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

/// Full-size dimensions; not used in tests.
inline ModelConfig paper_model(int vocab_size) {
  ModelConfig c;
  c.d_model = 512;
  c.n_heads = 8;
  c.cross_blocks = c.object_blocks = c.text_blocks = 4;
  c.ffn_dim = 2048;
  c.n_queries = 50;
  c.max_text_len = 256;
  c.alignment_dim = 64;
  c.vocab_size = vocab_size;
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

struct Parameters {
  std::map<std::string, Mat> tensors;
  std::array<std::uint64_t, 4> rng_state{};
  std::int64_t step_count = 0;

  const Mat& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorKind::kContract, "missing parameter '" + name + "'");
    return it->second;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, m] : tensors) n += static_cast<std::size_t>(m.size());
    return n;
  }
};

using Gradients = std::map<std::string, Mat>;

/// Parameter group used for per-group learning rates.
enum class ParamGroup { kImage, kText, kMultimodal };

inline ParamGroup param_group(const std::string& name) {
  if (name.rfind("image.", 0) == 0) return ParamGroup::kImage;
  if (name.rfind("text.", 0) == 0) return ParamGroup::kText;
  return ParamGroup::kMultimodal;
}

inline Gradients zero_gradients(const Parameters& p) {
  Gradients g;
  for (const auto& [k, m] : p.tensors) g.emplace(k, Mat::Zero(m.rows(), m.cols()));
  return g;
}

namespace detail {

class ParamBuilder {
 public:
  ParamBuilder(Parameters& p, Rng& rng) : p_(p), rng_(rng) {}

  void normal(const std::string& name, int rows, int cols, double std) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng_.normal();
    p_.tensors[name] = std::move(m);
  }
  void constant(const std::string& name, int rows, int cols, double v) {
    p_.tensors[name] = Mat::Constant(rows, cols, v);
  }
  void linear(const std::string& name, int in, int out) {
    normal(name + ".w", in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    constant(name + ".b", 1, out, 0.0);
  }
  void norm(const std::string& name, int d) {
    constant(name + ".g", 1, d, 1.0);
    constant(name + ".b", 1, d, 0.0);
  }
  void attention(const std::string& name, int d) {
    for (const char* part : {".q", ".k", ".v", ".o"}) linear(name + part, d, d);
  }
  void ffn(const std::string& name, int d, int hidden) {
    linear(name + ".fc1", d, hidden);
    linear(name + ".fc2", hidden, d);
  }

 private:
  Parameters& p_;
  Rng& rng_;
};

inline std::string block_name(const char* stage, int i) { return std::string("mm.") + stage + "." + std::to_string(i); }

}  // namespace detail

/// Splits a raster into flattened patches scaled to [-0.5, 0.5].
inline Mat patchify(const ImageRaster& img, int patch) {
  require(img.width % patch == 0 && img.height % patch == 0, ErrorKind::kContract,
          "raster size not divisible by patch size");
  const int pw = img.width / patch, ph = img.height / patch;
  Mat out(pw * ph, patch * patch * 3);
  for (int py = 0; py < ph; ++py)
    for (int px = 0; px < pw; ++px) {
      const int row = py * pw + px;
      int col = 0;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int c = 0; c < 3; ++c) out(row, col++) = img.at(px * patch + x, py * patch + y, c) / 255.0 - 0.5;
    }
  return out;
}

/// Fixed sinusoidal code of a 2-D position (in patch units): half the
/// channels encode y, half x.
inline void sinusoid_point(double px, double py, int d, Eigen::Ref<Eigen::Matrix<double, 1, Eigen::Dynamic>> out) {
  const int half = d / 2;
  for (int j = 0; j < d; ++j) {
    const bool use_y = j < half;
    const int k = use_y ? j : j - half;
    const int span = use_y ? half : d - half;
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (k / 2)) / std::max(span, 1));
    const double v = (use_y ? py : px) * freq;
    out(j) = (k % 2 == 0) ? std::sin(v) : std::cos(v);
  }
}

inline Mat sinusoid_2d(int grid_w, int grid_h, int d) {
  Mat out(grid_w * grid_h, d);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) sinusoid_point(gx, gy, d, out.row(gy * grid_w + gx));
  return out;
}

/// Normalised (x, y) centre of every patch, in patch order.
inline Mat patch_centres(const ModelConfig& cfg) {
  const int gw = cfg.image_width / cfg.patch_size, gh = cfg.image_height / cfg.patch_size;
  Mat c(gw * gh, 2);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      c(gy * gw + gx, 0) = (gx + 0.5) / gw;
      c(gy * gw + gx, 1) = (gy + 0.5) / gh;
    }
  return c;
}

/// Initial query anchors (cx, cy, w, h) on a near-square grid.
inline Mat anchor_grid(int n) {
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  Mat a(n, 4);
  for (int i = 0; i < n; ++i) {
    a(i, 0) = (i % cols + 0.5) / cols;
    a(i, 1) = (i / cols + 0.5) / rows;
    a(i, 2) = a(i, 3) = 0.25;
  }
  return a;
}

/// Sinusoidal code of anchor centres on a grid_w x grid_h patch grid.
inline Mat anchor_positions(const Mat& anchors, int grid_w, int grid_h, int d) {
  Mat out(anchors.rows(), d);
  for (Eigen::Index i = 0; i < anchors.rows(); ++i)
    sinusoid_point(anchors(i, 0) * grid_w - 0.5, anchors(i, 1) * grid_h - 0.5, d, out.row(i));
  return out;
}

inline Mat anchor_logits(const Mat& anchors) {
  return anchors.unaryExpr([](double v) { return std::log(v / (1.0 - v)); });
}

/// Fresh parameters for `cfg`; the key set depends only on the config.
inline Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Parameters p;
  Rng rng(seed);
  detail::ParamBuilder b(p, rng);
  const int d = cfg.d_model;

  b.normal("text.embed", cfg.vocab_size, d, 0.1);
  b.normal("text.pos", cfg.max_text_len, d, 0.1);
  b.norm("text.ln", d);
  b.linear("mm.text_proj", d, d);
  if (has_image(cfg.variant)) {
    b.linear("image.patch", cfg.patch_dim(), d);
    b.norm("image.ln", d);
    b.linear("mm.image_proj", d, d);
    b.normal("mm.type", 2, d, 0.1);
  }
  for (int i = 0; i < cfg.encoder_blocks(); ++i) {
    const std::string n = detail::block_name("enc", i);
    b.norm(n + ".ln1", d);
    b.attention(n + ".attn", d);
    b.norm(n + ".ln2", d);
    b.ffn(n + ".ffn", d, cfg.ffn_dim);
  }
  b.norm("mm.enc.ln", d);
  if (has_object_decoder(cfg.variant)) {
    b.normal("mm.queries", cfg.n_queries, d, 0.1);
    const Mat anchors = anchor_grid(cfg.n_queries);
    p.tensors["mm.query_pos"] =
        anchor_positions(anchors, cfg.image_width / cfg.patch_size, cfg.image_height / cfg.patch_size, d);
    p.tensors["mm.box.size"] = anchor_logits(anchors.rightCols(2));
    for (int i = 0; i < cfg.object_blocks; ++i) {
      const std::string n = detail::block_name("obj", i);
      b.norm(n + ".ln1", d);
      b.attention(n + ".self", d);
      b.norm(n + ".ln2", d);
      b.attention(n + ".cross", d);
      b.norm(n + ".ln3", d);
      b.ffn(n + ".ffn", d, cfg.ffn_dim);
    }
    b.norm("mm.obj.ln", d);
    for (int i = 0; i < cfg.text_blocks; ++i) {
      const std::string n = detail::block_name("txt", i);
      b.norm(n + ".ln1", d);
      b.attention(n + ".self", d);
      b.norm(n + ".ln2", d);
      b.attention(n + ".cross", d);
      b.norm(n + ".ln3", d);
      b.ffn(n + ".ffn", d, cfg.ffn_dim);
    }
    b.norm("mm.txt.ln", d);
    b.linear("mm.box.fc1", d, d);
    b.linear("mm.box.fc2", d, d);
    b.linear("mm.box.fc3", d, 4);
    b.linear("mm.box.attn_q", d, d);
    b.linear("mm.box.attn_k", d, d);
    b.linear("mm.pos_head", d, cfg.max_text_len + 1);
    b.linear("mm.obj_align", d, cfg.alignment_dim);
    b.linear("mm.tok_align", d, cfg.alignment_dim);
  }
  b.linear("mm.mlm.fc1", d, d);
  b.norm("mm.mlm.ln", d);
  b.linear("mm.mlm.fc2", d, cfg.vocab_size);
  p.rng_state = rng.state();
  return p;
}

/// Resolves parameter names to tape leaves, once per tape.
class Binder {
 public:
  Binder(ad::Tape& tape, const Parameters& params, Gradients* grads = nullptr)
      : tape_(tape), params_(params), grads_(grads) {}

  ad::Tape& tape() { return tape_; }

  ad::Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Mat* sink = nullptr;
    if (grads_) {
      auto g = grads_->find(name);
      if (g != grads_->end()) sink = &g->second;
    }
    ad::Var v = tape_.parameter(params_.at(name), sink);
    cache_.emplace(name, v);
    return v;
  }

 private:
  ad::Tape& tape_;
  const Parameters& params_;
  Gradients* grads_;
  std::map<std::string, ad::Var> cache_;
};

// ---------------------------------------------------------------------------
// Forward pass

/// Tape handles for every head output. Alignment handles are unset
/// (id < 0) for variants that do not produce them.
struct ForwardGraph {
  ad::Var mlm_logits;  // L x V
  ad::Var boxes;       // Q x 4, cxcywh in [0, 1]
  ad::Var pos_logits;  // Q x (max_text_len + 1), padding positions masked
  ad::Var obj_embed;   // Q x alignment_dim, unit rows
  ad::Var tok_embed;   // L x alignment_dim, unit rows
  int text_len = 0;
};

/// Plain values of a forward pass.
struct ForwardOutput {
  Mat mlm_logits;
  Mat boxes;
  Eigen::VectorXd no_object_prob;
  Mat pos_align;  // rows sum to 1; last column is the no-object slot
  Mat obj_embed;
  Mat tok_embed;
  int text_len = 0;

  bool has_objects() const { return boxes.rows() > 0; }
  bool has_alignment() const { return pos_align.rows() > 0; }
};

namespace detail {

inline ad::Var ln(Binder& P, const std::string& n, ad::Var x) { return ad::layer_norm(x, P(n + ".g"), P(n + ".b")); }
inline ad::Var lin(Binder& P, const std::string& n, ad::Var x) { return ad::linear(x, P(n + ".w"), P(n + ".b")); }

inline ad::Var mha(Binder& P, const std::string& n, ad::Var q_in, ad::Var k_in, ad::Var v_in, int heads) {
  ad::Var q = lin(P, n + ".q", q_in), k = lin(P, n + ".k", k_in), v = lin(P, n + ".v", v_in);
  return lin(P, n + ".o", ad::attention(q, k, v, heads));
}

inline ad::Var mha(Binder& P, const std::string& n, ad::Var q_in, ad::Var kv_in, int heads) {
  return mha(P, n, q_in, kv_in, kv_in, heads);
}

inline ad::Var ffn(Binder& P, const std::string& n, ad::Var x) {
  return lin(P, n + ".fc2", ad::gelu(lin(P, n + ".fc1", x)));
}

inline ad::Var encoder_block(Binder& P, const std::string& n, ad::Var x, int heads) {
  ad::Var h = ln(P, n + ".ln1", x);
  x = ad::add(x, mha(P, n + ".attn", h, h, heads));
  return ad::add(x, ffn(P, n + ".ffn", ln(P, n + ".ln2", x)));
}

inline ad::Var decoder_block(Binder& P, const std::string& n, ad::Var x, ad::Var memory, int heads) {
  ad::Var h = ln(P, n + ".ln1", x);
  x = ad::add(x, mha(P, n + ".self", h, h, heads));
  x = ad::add(x, mha(P, n + ".cross", ln(P, n + ".ln2", x), memory, heads));
  return ad::add(x, ffn(P, n + ".ffn", ln(P, n + ".ln3", x)));
}

// Object decoder block: query positions join queries and keys of both
// attentions, memory positions join the cross-attention keys.
inline ad::Var query_block(Binder& P, const std::string& n, ad::Var x, ad::Var qpos, ad::Var memory, ad::Var mpos,
                           int heads) {
  ad::Var h = ln(P, n + ".ln1", x);
  ad::Var hp = ad::add(h, qpos);
  x = ad::add(x, mha(P, n + ".self", hp, hp, h, heads));
  x = ad::add(x, mha(P, n + ".cross", ad::add(ln(P, n + ".ln2", x), qpos), ad::add(memory, mpos), memory, heads));
  return ad::add(x, ffn(P, n + ".ffn", ln(P, n + ".ln3", x)));
}

}  // namespace detail

/// Word embeddings plus learned positions, normalised. Returns L x d.
inline ad::Var embed_text(const ModelConfig& cfg, Binder& P, const std::vector<int>& ids) {
  require(!ids.empty() && static_cast<int>(ids.size()) <= cfg.max_text_len, ErrorKind::kContract,
          "token sequence length must be in [1, max_text_len]");
  for (int id : ids) require(id >= 0 && id < cfg.vocab_size, ErrorKind::kContract, "token id out of range");
  const auto n = static_cast<Eigen::Index>(ids.size());
  ad::Var e = ad::add(ad::gather_rows(P("text.embed"), ids), ad::slice_rows(P("text.pos"), 0, n));
  return detail::ln(P, "text.ln", e);
}

/// Linear patch embedding plus fixed 2-D positions. Returns n_patches x d.
inline ad::Var encode_image(const ModelConfig& cfg, Binder& P, const ImageRaster& img) {
  require(img.width == cfg.image_width && img.height == cfg.image_height, ErrorKind::kContract,
          "raster size does not match the model config");
  ad::Tape& t = P.tape();
  ad::Var patches = t.constant(patchify(img, cfg.patch_size));
  ad::Var pos = t.constant(sinusoid_2d(cfg.image_width / cfg.patch_size, cfg.image_height / cfg.patch_size, cfg.d_model));
  ad::Var x = ad::add(detail::lin(P, "image.patch", patches), pos);
  return detail::ln(P, "image.ln", x);
}

/// Builds the full forward graph for one instance. `img` may be null only
/// for the text-only variant.
inline ForwardGraph forward_graph(const ModelConfig& cfg, Binder& P, const std::vector<int>& ids, const ImageRaster* img) {
  const Variant v = cfg.variant;
  require(has_image(v) == (img != nullptr), ErrorKind::kContract,
          has_image(v) ? "variant requires an image" : "text-only variant takes no image");
  const int L = static_cast<int>(ids.size());
  const int heads = cfg.n_heads;

  ad::Var text = embed_text(cfg, P, ids);
  ad::Var x = detail::lin(P, "mm.text_proj", text);
  int n_img = 0;
  if (img) {
    ad::Var im = detail::lin(P, "mm.image_proj", encode_image(cfg, P, *img));
    ad::Var type = P("mm.type");
    x = ad::add_row(x, ad::slice_rows(type, 0, 1));
    im = ad::add_row(im, ad::slice_rows(type, 1, 1));
    n_img = static_cast<int>(im.rows());
    x = ad::concat_rows(x, im);
  }
  for (int i = 0; i < cfg.encoder_blocks(); ++i) x = detail::encoder_block(P, detail::block_name("enc", i), x, heads);
  x = detail::ln(P, "mm.enc.ln", x);

  ForwardGraph g;
  g.text_len = L;
  ad::Var text_out = ad::slice_rows(x, 0, L);

  if (has_object_decoder(v)) {
    ad::Var q = P("mm.queries");
    Mat mpos = Mat::Zero(x.rows(), cfg.d_model);
    if (img)
      mpos.bottomRows(n_img) =
          sinusoid_2d(cfg.image_width / cfg.patch_size, cfg.image_height / cfg.patch_size, cfg.d_model);
    ad::Var memory_pos = P.tape().constant(std::move(mpos));
    ad::Var qpos = P("mm.query_pos");
    for (int i = 0; i < cfg.object_blocks; ++i)
      q = detail::query_block(P, detail::block_name("obj", i), q, qpos, x, memory_pos, heads);
    ad::Var obj = detail::ln(P, "mm.obj.ln", q);

    ad::Var tx = text_out;
    for (int i = 0; i < cfg.text_blocks; ++i) tx = detail::decoder_block(P, detail::block_name("txt", i), tx, obj, heads);
    text_out = detail::ln(P, "mm.txt.ln", tx);

    ad::Var h = ad::gelu(detail::lin(P, "mm.box.fc1", obj));
    h = ad::gelu(detail::lin(P, "mm.box.fc2", h));
    ad::Var delta = detail::lin(P, "mm.box.fc3", h);
    // Box centres refine an attention-weighted centroid of patch centres;
    // sizes refine per-query learned priors.
    ad::Var centre = ad::slice_cols(delta, 0, 2);
    if (img) {
      ad::Var patches = ad::add(ad::slice_rows(x, L, n_img), ad::slice_rows(memory_pos, L, n_img));
      ad::Var scores = ad::matmul(detail::lin(P, "mm.box.attn_q", obj),
                                  ad::transpose(detail::lin(P, "mm.box.attn_k", patches)));
      ad::Var attn = ad::softmax_rows(ad::scale(scores, 1.0 / std::sqrt(static_cast<double>(cfg.d_model))));
      ad::Var centroid = ad::matmul(attn, P.tape().constant(patch_centres(cfg)));
      centre = ad::add(centre, ad::logit(centroid));
    }
    g.boxes = ad::sigmoid(ad::concat_cols(centre, ad::add(ad::slice_cols(delta, 2, 2), P("mm.box.size"))));

    // Positions past the caption cannot be referenced.
    Mat pad_mask = Mat::Zero(cfg.n_queries, cfg.max_text_len + 1);
    pad_mask.middleCols(L, cfg.max_text_len - L).setConstant(-1e9);
    g.pos_logits = ad::add(detail::lin(P, "mm.pos_head", obj), P.tape().constant(std::move(pad_mask)));

    if (has_alignment(v)) {
      g.obj_embed = ad::normalize_rows(detail::lin(P, "mm.obj_align", obj));
      g.tok_embed = ad::normalize_rows(detail::lin(P, "mm.tok_align", text_out));
    }
  }

  ad::Var m = detail::ln(P, "mm.mlm.ln", ad::gelu(detail::lin(P, "mm.mlm.fc1", text_out)));
  g.mlm_logits = detail::lin(P, "mm.mlm.fc2", m);
  return g;
}

inline ForwardOutput read_output(const ModelConfig& cfg, const ForwardGraph& g) {
  ForwardOutput o;
  o.text_len = g.text_len;
  o.mlm_logits = g.mlm_logits.value();
  if (g.boxes.id >= 0) {
    o.boxes = g.boxes.value();
    const Mat pa = ad::detail::softmax_rows_value(g.pos_logits.value());
    o.no_object_prob = pa.col(cfg.max_text_len);
    if (has_alignment(cfg.variant)) {
      o.pos_align = pa;
      o.obj_embed = g.obj_embed.value();
      o.tok_embed = g.tok_embed.value();
    }
  }
  return o;
}

/// Inference-only forward pass.
inline ForwardOutput forward(const ModelConfig& cfg, const Parameters& params, const std::vector<int>& ids,
                             const ImageRaster* img) {
  ad::Tape tape(false);
  Binder P(tape, params);
  return read_output(cfg, forward_graph(cfg, P, ids, img));
}

}  // namespace gova
