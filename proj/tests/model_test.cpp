#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "gova/config.hpp"
#include "gova/model.hpp"

namespace gova {
namespace {

ModelConfig small_config(Variant v) {
  ModelConfig c = desk_preset().model;
  c.d_model = 16;
  c.ffn_dim = 32;
  c.n_queries = 5;
  c.max_text_len = 12;
  c.alignment_dim = 8;
  c.vocab_size = 20;
  c.variant = v;
  return c;
}

ImageRaster scene(double dx) {
  std::vector<ObjectSpec> objs(2);
  objs[0] = {0, "circle", "red", "small", "plain", {0.1 + dx, 0.1, 0.35 + dx, 0.4}};
  objs[1] = {1, "square", "blue", "large", "striped", {0.5, 0.5, 0.9, 0.9}};
  return render_scene(64, 64, objs);
}

const std::vector<int> kIds{4, 5, 1, 7, 8, 9, 10};

// Closed-form parameter count, written out independently of init_parameters.
std::size_t expected_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, F = c.ffn_dim, V = c.vocab_size, L = c.max_text_len, Q = c.n_queries,
                    A = c.alignment_dim, P = c.patch_dim();
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  const std::size_t norm = 2 * d, att = 4 * lin(d, d), ffn = lin(d, F) + lin(F, d);
  std::size_t n = V * d + L * d + norm + lin(d, d);
  if (has_image(c.variant)) n += lin(P, d) + norm + lin(d, d) + 2 * d;
  n += static_cast<std::size_t>(c.encoder_blocks()) * (2 * norm + att + ffn) + norm;
  if (has_object_decoder(c.variant)) {
    n += 2 * Q * d + 2 * Q;
    n += static_cast<std::size_t>(c.object_blocks + c.text_blocks) * (3 * norm + 2 * att + ffn) + 2 * norm;
    n += 2 * lin(d, d) + lin(d, 4) + 2 * lin(d, d) + lin(d, L + 1) + 2 * lin(d, A);
  }
  n += lin(d, d) + norm + lin(d, V);
  return n;
}

TEST(Shapes, FullVariantProducesEveryHead) {
  const ModelConfig c = small_config(Variant::kFull);
  const ImageRaster img = scene(0);
  const ForwardOutput o = forward(c, init_parameters(c, 1), kIds, &img);
  const auto L = static_cast<Eigen::Index>(kIds.size());
  EXPECT_EQ(o.mlm_logits.rows(), L);
  EXPECT_EQ(o.mlm_logits.cols(), c.vocab_size);
  EXPECT_EQ(o.boxes.rows(), c.n_queries);
  EXPECT_EQ(o.boxes.cols(), 4);
  EXPECT_EQ(o.pos_align.rows(), c.n_queries);
  EXPECT_EQ(o.pos_align.cols(), c.max_text_len + 1);
  EXPECT_EQ(o.obj_embed.rows(), c.n_queries);
  EXPECT_EQ(o.obj_embed.cols(), c.alignment_dim);
  EXPECT_EQ(o.tok_embed.rows(), L);
  EXPECT_EQ(o.no_object_prob.size(), c.n_queries);
  EXPECT_EQ(o.text_len, L);
}

TEST(Shapes, VariantsDropTheirHeads) {
  const ImageRaster img = scene(0);
  {
    const ModelConfig c = small_config(Variant::kNoGrounding);
    const ForwardOutput o = forward(c, init_parameters(c, 1), kIds, &img);
    EXPECT_TRUE(o.has_objects());
    EXPECT_FALSE(o.has_alignment());
    EXPECT_EQ(o.no_object_prob.size(), c.n_queries);
  }
  for (Variant v : {Variant::kNoObjects, Variant::kTextOnly}) {
    const ModelConfig c = small_config(v);
    const ForwardOutput o = forward(c, init_parameters(c, 1), kIds, v == Variant::kTextOnly ? nullptr : &img);
    EXPECT_FALSE(o.has_objects());
    EXPECT_FALSE(o.has_alignment());
    EXPECT_EQ(o.mlm_logits.rows(), static_cast<Eigen::Index>(kIds.size()));
  }
}

TEST(Heads, ProbabilitiesBoxesAndEmbeddingsAreWellFormed) {
  const ModelConfig c = small_config(Variant::kFull);
  for (std::uint64_t seed : {1, 2, 3}) {
    const ImageRaster img = scene(0.05 * static_cast<double>(seed));
    const ForwardOutput o = forward(c, init_parameters(c, seed), kIds, &img);
    for (Eigen::Index q = 0; q < c.n_queries; ++q) {
      EXPECT_NEAR(o.pos_align.row(q).sum(), 1.0, 1e-12);
      for (Eigen::Index j = static_cast<Eigen::Index>(kIds.size()); j < c.max_text_len; ++j)
        EXPECT_LT(o.pos_align(q, j), 1e-300) << "padding column " << j;
      EXPECT_DOUBLE_EQ(o.no_object_prob[q], o.pos_align(q, c.max_text_len));
      EXPECT_NEAR(o.obj_embed.row(q).norm(), 1.0, 1e-12);
      for (int k = 0; k < 4; ++k) {
        EXPECT_GT(o.boxes(q, k), 0.0);
        EXPECT_LT(o.boxes(q, k), 1.0);
      }
    }
    for (Eigen::Index t = 0; t < o.tok_embed.rows(); ++t) EXPECT_NEAR(o.tok_embed.row(t).norm(), 1.0, 1e-12);
  }
}

TEST(Forward, DeterministicForFixedInputs) {
  const ModelConfig c = small_config(Variant::kFull);
  const Parameters p = init_parameters(c, 9);
  const ImageRaster img = scene(0);
  const ForwardOutput a = forward(c, p, kIds, &img), b = forward(c, p, kIds, &img);
  EXPECT_EQ(a.mlm_logits, b.mlm_logits);
  EXPECT_EQ(a.boxes, b.boxes);
  EXPECT_EQ(a.pos_align, b.pos_align);
}

TEST(Forward, MovingAnObjectChangesTheOutputs) {
  const ModelConfig c = small_config(Variant::kFull);
  const Parameters p = init_parameters(c, 9);
  const ImageRaster a = scene(0), b = scene(0.3);
  const ForwardOutput oa = forward(c, p, kIds, &a), ob = forward(c, p, kIds, &b);
  EXPECT_GT((oa.boxes - ob.boxes).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_GT((oa.mlm_logits - ob.mlm_logits).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Forward, DeskImageHasSixtyFourPatches) {
  const ModelConfig c = desk_preset().model;
  EXPECT_EQ(c.n_patches(), 64);
  EXPECT_EQ(patchify(scene(0), c.patch_size).rows(), 64);
  EXPECT_EQ(patchify(scene(0), c.patch_size).cols(), c.patch_dim());
}

TEST(Forward, ContractViolationsThrow) {
  const ModelConfig full = small_config(Variant::kFull);
  const Parameters p = init_parameters(full, 1);
  const ImageRaster img = scene(0);
  auto kind = [](auto&& fn) -> std::optional<ErrorKind> {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  EXPECT_EQ(kind([&] { forward(full, p, std::vector<int>(13, 4), &img); }), ErrorKind::kContract);
  EXPECT_EQ(kind([&] { forward(full, p, {}, &img); }), ErrorKind::kContract);
  EXPECT_EQ(kind([&] { forward(full, p, {4, 20}, &img); }), ErrorKind::kContract);
  EXPECT_EQ(kind([&] { forward(full, p, kIds, nullptr); }), ErrorKind::kContract);
  EXPECT_EQ(kind([&] { forward(full, p, kIds, &img); }), std::nullopt);
  const ImageRaster wrong = render_scene(32, 32, {});
  EXPECT_EQ(kind([&] { forward(full, p, kIds, &wrong); }), ErrorKind::kContract);
  const ModelConfig text = small_config(Variant::kTextOnly);
  EXPECT_EQ(kind([&] { forward(text, init_parameters(text, 1), kIds, &img); }), ErrorKind::kContract);
}

TEST(Config, ValidateRejectsBadDimensions) {
  auto bad = [](auto mutate) {
    ModelConfig c = small_config(Variant::kFull);
    mutate(c);
    try {
      c.validate();
    } catch (const Error& e) {
      return e.kind() == ErrorKind::kConfig;
    }
    return false;
  };
  EXPECT_TRUE(bad([](ModelConfig& c) { c.n_heads = 3; }));
  EXPECT_TRUE(bad([](ModelConfig& c) { c.n_queries = 0; }));
  EXPECT_TRUE(bad([](ModelConfig& c) { c.patch_size = 7; }));
  EXPECT_TRUE(bad([](ModelConfig& c) { c.vocab_size = 3; }));
  EXPECT_TRUE(bad([](ModelConfig& c) { c.temperature = 0.0; }));
  EXPECT_TRUE(bad([](ModelConfig& c) { c.object_blocks = -1; }));
  EXPECT_FALSE(bad([](ModelConfig&) {}));
}

TEST(Parameters, CountMatchesClosedForm) {
  for (Variant v : {Variant::kFull, Variant::kNoGrounding, Variant::kNoObjects, Variant::kTextOnly}) {
    const ModelConfig c = small_config(v);
    EXPECT_EQ(init_parameters(c, 1).count(), expected_count(c)) << variant_name(v);
  }
}

TEST(Parameters, PinnedCountsPerPreset) {
  ModelConfig desk = desk_preset().model;
  desk.vocab_size = 40;
  EXPECT_EQ(init_parameters(desk, 1).count(), 424157u);
  EXPECT_EQ(expected_count(desk), 424157u);
  ModelConfig paper = paper_preset().model;
  paper.vocab_size = 40;
  EXPECT_EQ(expected_count(paper), 48609297u);
}

TEST(Parameters, VariantsWithoutDecoderFoldItsBlocksIntoTheEncoder) {
  const ModelConfig full = small_config(Variant::kFull), flat = small_config(Variant::kNoObjects);
  EXPECT_EQ(full.encoder_blocks(), full.cross_blocks);
  EXPECT_EQ(flat.encoder_blocks(), flat.cross_blocks + flat.object_blocks + flat.text_blocks);
  const Parameters p = init_parameters(flat, 1);
  const std::string last = "mm.enc." + std::to_string(flat.encoder_blocks() - 1) + ".attn.q.w";
  EXPECT_TRUE(p.tensors.count(last));
  for (const auto& [name, m] : p.tensors) {
    EXPECT_EQ(name.rfind("mm.obj.", 0), std::string::npos) << name;
    EXPECT_EQ(name.rfind("mm.txt.", 0), std::string::npos) << name;
  }
}

TEST(Parameters, KeySetDependsOnlyOnConfig) {
  const ModelConfig c = small_config(Variant::kFull);
  const Parameters a = init_parameters(c, 1), b = init_parameters(c, 2);
  std::set<std::string> ka, kb;
  for (const auto& [k, m] : a.tensors) ka.insert(k);
  for (const auto& [k, m] : b.tensors) kb.insert(k);
  EXPECT_EQ(ka, kb);
  EXPECT_NE(a.at("text.embed"), b.at("text.embed"));
  EXPECT_EQ(init_parameters(c, 1).at("text.embed"), a.at("text.embed"));
}

}  // namespace
}  // namespace gova
