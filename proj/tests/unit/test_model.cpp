#include <cmath>
#include <cstring>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "helpers.hpp"
#include "peftcap/errors.hpp"
#include "peftcap/freeze.hpp"
#include "peftcap/model.hpp"
#include "peftcap/ops.hpp"
#include "peftcap/training.hpp"

using namespace peftcap;
using testing::bitwise_equal;
using testing::random_caption;
using testing::random_image;
using testing::tiny_config;

namespace {

void fill(const CaptionModel& model, const std::string& path, double value) {
  Tensor t = model.parameter(path);
  for (auto& v : t.mutable_data()) v = value;
}

void randomize(const CaptionModel& model, const std::string& path, Rng& rng) {
  Tensor t = model.parameter(path);
  for (auto& v : t.mutable_data()) v = rng.uniform(-0.5, 0.5);
}

Tensor logits_for(const CaptionModel& model, const Tensor& image, const std::vector<int>& caption) {
  NoGradGuard guard;
  return model.decoder_forward(std::span<const int>(caption), model.encode(model.prepare(image)));
}

// Counts written out from the architecture description, independent of the
// registry builder.
struct Tally {
  std::size_t paths = 0;
  std::uint64_t elements = 0;
  void add(std::uint64_t n) {
    ++paths;
    elements += n;
  }
  void linear(std::uint64_t in, std::uint64_t out) {
    add(in * out);
    add(out);
  }
  void norm(std::uint64_t d) {
    add(d);
    add(d);
  }
};

Tally count_by_hand(const ModelConfig& c) {
  Tally t;
  const std::uint64_t d = c.d_model, ff = c.d_ff;
  const std::uint64_t patch_dim = c.patch_size * c.patch_size * c.in_channels;
  const std::uint64_t n = (c.image_size / c.patch_size) * (c.image_size / c.patch_size);
  t.linear(patch_dim, d);
  t.add(d);            // cls
  t.add((n + 1) * d);  // positions
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    t.norm(d);
    for (int i = 0; i < 4; ++i) t.linear(d, d);
    t.norm(d);
    t.linear(d, ff);
    t.linear(ff, d);
  }
  if (c.n_enc_layers > 0) t.norm(d);
  t.add(c.vocab_size * d);
  t.add(c.max_caption_len * d);
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    t.norm(d);
    for (int i = 0; i < 4; ++i) t.linear(d, d);
    t.norm(d);
    for (int i = 0; i < 4; ++i) t.linear(d, d);
    t.norm(d);
    t.linear(d, ff);
    t.linear(ff, d);
  }
  t.norm(d);
  t.linear(d, c.vocab_size);
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.max_caption_len = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("patch embedding token counts") {
  Rng rng(1);
  auto c = tiny_config();
  c.patch_size = 16;
  CaptionModel single(c);
  CHECK(single.patchify_embed(random_image(rng, 16)).shape() == Shape{2, 16});

  c = tiny_config();
  c.image_size = 64;
  CaptionModel grid(c);
  CHECK(grid.patchify_embed(random_image(rng, 64)).shape() == Shape{65, 16});
  CHECK_THROWS_AS(grid.patchify_embed(random_image(rng, 32)), DimensionError);
}

TEST_CASE("a black image with zero positions embeds to the patch bias") {
  Rng rng(2);
  CaptionModel model(tiny_config());
  randomize(model, "encoder.patch_embed.bias", rng);
  fill(model, "encoder.pos_embed", 0.0);
  auto tokens = model.patchify_embed(Tensor::zeros({3, 16, 16}));
  const auto bias = model.parameter("encoder.patch_embed.bias").data();
  for (std::size_t row = 1; row < tokens.dim(0); ++row)
    for (std::size_t j = 0; j < 16; ++j) CHECK(tokens[row * 16 + j] == bias[j]);
}

TEST_CASE("encoder with no layers is the identity") {
  Rng rng(3);
  auto c = tiny_config();
  c.n_enc_layers = 0;
  CaptionModel model(c);
  auto tokens = testing::random_tensor(rng, {5, 16});
  CHECK(bitwise_equal(model.encoder_forward(tokens), tokens));
}

TEST_CASE("encoder with zeroed residual branches reduces to the final norm") {
  Rng rng(4);
  auto c = tiny_config();
  c.n_enc_layers = 2;
  CaptionModel model(c);
  for (int b = 0; b < 2; ++b) {
    const std::string p = "encoder.block" + std::to_string(b);
    for (auto s : {".attn.o.weight", ".attn.o.bias", ".mlp.fc2.weight", ".mlp.fc2.bias"})
      fill(model, p + s, 0.0);
  }
  randomize(model, "encoder.norm.weight", rng);
  randomize(model, "encoder.norm.bias", rng);
  auto tokens = testing::random_tensor(rng, {5, 16});
  auto out = model.encoder_forward(tokens);
  const auto g = model.parameter("encoder.norm.weight").data();
  const auto beta = model.parameter("encoder.norm.bias").data();
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 16; ++j) mean += tokens[r * 16 + j];
    mean /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += std::pow(tokens[r * 16 + j] - mean, 2);
    var /= 16;
    for (std::size_t j = 0; j < 16; ++j) {
      const double want = (tokens[r * 16 + j] - mean) / std::sqrt(var + c.ln_eps) * g[j] + beta[j];
      CHECK(std::abs(out[r * 16 + j] - want) < 1e-12);
    }
  }
}

TEST_CASE("encoder and projections preserve token shape") {
  Rng rng(5);
  for (std::size_t layers : {0u, 1u, 3u})
    for (auto kind : {ProjectionKind::none, ProjectionKind::linear, ProjectionKind::vit_block}) {
      auto c = tiny_config();
      c.n_enc_layers = layers;
      CaptionModel model(c);
      if (kind != ProjectionKind::none) model.attach_projection(kind, false, 9);
      auto tokens = testing::random_tensor(rng, {5, 16});
      auto enc = model.encoder_forward(tokens);
      CHECK(enc.shape() == tokens.shape());
      CHECK(model.project_visual(enc).shape() == tokens.shape());
    }
}

TEST_CASE("projection examples") {
  Rng rng(6);
  auto tokens = testing::random_tensor(rng, {5, 16});
  CaptionModel none(tiny_config());
  CHECK(bitwise_equal(none.project_visual(tokens), tokens));

  CaptionModel identity(tiny_config());
  identity.attach_projection(ProjectionKind::linear, false, 1);
  CHECK(bitwise_equal(identity.project_visual(tokens), tokens));

  CaptionModel zero(tiny_config());
  zero.attach_projection(ProjectionKind::linear, true, 1);
  auto zeroed = zero.project_visual(tokens);
  for (double v : zeroed.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(identity.attach_projection(ProjectionKind::vit_block, false, 1), StrategyError);
}

TEST_CASE("identity projection leaves logits unchanged") {
  Rng rng(7);
  CaptionModel base(tiny_config());
  CaptionModel projected = base.clone();
  projected.attach_projection(ProjectionKind::linear, false, 5);
  for (int trial = 0; trial < 4; ++trial) {
    auto img = random_image(rng, 16);
    auto cap = random_caption(rng, 4, 20);
    CHECK(bitwise_equal(logits_for(base, img, cap), logits_for(projected, img, cap)));
  }
}

TEST_CASE("decoder shapes and length limit") {
  Rng rng(8);
  CaptionModel model(tiny_config());
  auto visual = model.encode(model.prepare(random_image(rng, 16)));
  std::vector<int> bos{tokens::kBos};
  CHECK(model.decoder_forward(std::span<const int>(bos), visual).shape() == Shape{1, 20});
  std::vector<int> too_long(9, 5);
  CHECK_THROWS_AS(model.decoder_forward(std::span<const int>(too_long), visual), std::length_error);
}

TEST_CASE("decoder is causal") {
  Rng rng(9);
  auto c = tiny_config();
  c.n_dec_layers = 2;
  CaptionModel model(c);
  for (int trial = 0; trial < 8; ++trial) {
    auto img = random_image(rng, 16);
    auto cap = random_caption(rng, 5, 20);
    auto before = logits_for(model, img, cap);
    const std::size_t j = 1 + rng.below(cap.size() - 1);
    auto changed = cap;
    changed[j] = 4 + (changed[j] - 4 + 1) % 16;
    auto after = logits_for(model, img, changed);
    const auto n = j * 20;
    CHECK(std::memcmp(before.data().data(), after.data().data(), n * sizeof(double)) == 0);
    bool later_differs = false;
    for (std::size_t i = n; i < before.numel(); ++i) later_differs |= before[i] != after[i];
    CHECK(later_differs);
  }
}

TEST_CASE("zeroed cross-attention values cut the image out") {
  Rng rng(10);
  auto c = tiny_config();
  c.n_dec_layers = 2;
  CaptionModel model(c);
  auto cap = random_caption(rng, 4, 20);
  auto a = random_image(rng, 16), b = random_image(rng, 16);
  CHECK_FALSE(bitwise_equal(logits_for(model, a, cap), logits_for(model, b, cap)));
  for (int l = 0; l < 2; ++l) {
    const std::string p = "decoder.block" + std::to_string(l) + ".cross_attn.v.";
    fill(model, p + "weight", 0.0);
    fill(model, p + "bias", 0.0);
  }
  CHECK(bitwise_equal(logits_for(model, a, cap), logits_for(model, b, cap)));
}

TEST_CASE("registry matches a hand count of the architecture") {
  for (std::size_t enc : {0u, 1u, 3u})
    for (std::size_t dec : {1u, 2u})
      for (std::size_t vocab : {10u, 37u}) {
        auto c = tiny_config(vocab);
        c.n_enc_layers = enc;
        c.n_dec_layers = dec;
        c.d_ff = 24;
        auto tally = count_by_hand(c);
        CaptionModel model(c);
        CHECK(model.parameters().size() == tally.paths);
        CHECK(model.parameter_count() == tally.elements);
        std::set<std::string> unique;
        for (const auto& p : model.parameters()) unique.insert(p.path);
        CHECK(unique.size() == tally.paths);
      }
}

TEST_CASE("the registry is a pure function of the config") {
  auto a = describe_parameters(ModelConfig::toy(40));
  auto b = describe_parameters(ModelConfig::toy(40));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].path == b[i].path);
    CHECK(a[i].shape == b[i].shape);
  }
  CaptionModel m(ModelConfig::toy(40));
  CHECK(m.parameters().size() == a.size());
}

TEST_CASE("caption loss examples") {
  Rng rng(11);
  auto c = tiny_config(8);
  CaptionModel model(c);
  fill(model, "decoder.head.weight", 0.0);
  fill(model, "decoder.head.bias", 0.0);
  auto img = random_image(rng, 16);
  std::vector<int> shortest{tokens::kBos, tokens::kEos};
  CHECK(caption_loss(model, img, shortest).item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  std::vector<int> padded{tokens::kBos, 5, 6, tokens::kEos, tokens::kPad, tokens::kPad};
  CHECK(caption_loss(model, img, padded).item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  std::vector<int> no_bos{5, tokens::kEos};
  std::vector<int> no_eos{tokens::kBos, 5};
  CHECK_THROWS_AS(caption_loss(model, img, no_bos), FormatError);
  CHECK_THROWS_AS(caption_loss(model, img, no_eos), FormatError);
}

TEST_CASE("generation stops at a forced EOS and is deterministic") {
  Rng rng(12);
  CaptionModel model(tiny_config());
  auto img = random_image(rng, 16);
  auto first = generate(model, img, 8);
  CHECK(first == generate(model, img, 8));
  CHECK(first.front() == tokens::kBos);
  CHECK(first.size() <= 8);

  fill(model, "decoder.head.weight", 0.0);
  Tensor bias = model.parameter("decoder.head.bias");
  auto b = bias.mutable_data();
  for (auto& v : b) v = 0.0;
  b[tokens::kEos] = 5.0;
  CHECK(generate(model, img, 8) == std::vector<int>{tokens::kBos, tokens::kEos});
  CHECK_THROWS(generate(model, img, 9));
}

TEST_CASE("overfitting one pair") {
  Rng rng(13);
  CaptionModel model(tiny_config());
  auto plan = attach(model, make_strategy("ft_a", StrategyHyper::toy()), 1);
  auto img = random_image(rng, 16);
  std::vector<int> cap{tokens::kBos, 7, 11, 9, 15, tokens::kEos};

  TrainConfig tc;
  tc.lr = 1e-3;
  tc.weight_decay = 0.0;
  AdamW opt(model, plan, tc);
  std::vector<double> losses;
  for (int step = 0; step < 20; ++step) {
    auto loss = caption_loss(model, img, cap);
    losses.push_back(loss.item());
    backward(loss);
    opt.step();
    opt.zero_grad();
  }
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);

  for (int step = 0; step < 200; ++step) {
    auto loss = caption_loss(model, img, cap);
    backward(loss);
    opt.step();
    opt.zero_grad();
  }
  CHECK(generate(model, img, 8) == cap);
}

TEST_CASE("clone copies weights and attachments") {
  Rng rng(14);
  CaptionModel model(tiny_config());
  model.attach_houlsby(4, 2);
  randomize(model, "decoder.block0.adapter_mlp.up.weight", rng);
  auto copy = model.clone();
  CHECK(copy.attachments().houlsby_bottleneck == 4);
  auto img = random_image(rng, 16);
  auto cap = random_caption(rng, 3, 20);
  CHECK(bitwise_equal(logits_for(model, img, cap), logits_for(copy, img, cap)));
  fill(copy, "decoder.block0.adapter_mlp.up.weight", 0.0);
  CHECK_FALSE(bitwise_equal(logits_for(model, img, cap), logits_for(copy, img, cap)));
}
