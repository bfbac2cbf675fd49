#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "peftcap/errors.hpp"
#include "peftcap/freeze.hpp"
#include "peftcap/ops.hpp"
#include "peftcap/strategy.hpp"
#include "peftcap/training.hpp"

using namespace peftcap;
using testing::bitwise_equal;
using testing::random_caption;
using testing::random_image;
using testing::random_tensor;
using testing::tiny_config;

namespace {

Tensor logits_for(const CaptionModel& model, const Tensor& image, const std::vector<int>& caption) {
  NoGradGuard guard;
  return model.decoder_forward(std::span<const int>(caption), model.encode(model.prepare(image)));
}

Linear make_linear(Shape w, std::vector<double> wd, std::vector<double> bd) {
  const std::size_t out = w[1];
  return Linear{Tensor::from_data(std::move(w), std::move(wd)),
                Tensor::from_data({out}, std::move(bd)), std::nullopt};
}

// Gives every zero-initialised adapter output map some weight, so that the
// whole adapter path influences the loss.
void wake_adapters(CaptionModel& model, Rng& rng) {
  for (const auto& p : model.parameters()) {
    if (p.origin == ParamOrigin::base) continue;
    if (p.path.ends_with("up.weight") || p.path.ends_with("lora_b")) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_data()) v = rng.uniform(-0.1, 0.1);
    }
  }
}

void train_steps(CaptionModel& model, const FreezePlan& plan, int steps, Rng& rng) {
  TrainConfig tc;
  tc.lr = 1e-2;
  AdamW opt(model, plan, tc);
  const auto image_size = model.config().image_size;
  for (int s = 0; s < steps; ++s) {
    auto loss = caption_loss(model, random_image(rng, image_size), random_caption(rng, 3, 20));
    backward(loss);
    opt.step();
    opt.zero_grad();
  }
}

const std::vector<std::string> kIdentityCells{"houlsby_t", "lora_t", "evp", "evp_gs", "evp_fft",
                                              "evp_houlsby", "evp_lora", "linear_houlsby",
                                              "linear_lora"};

}  // namespace

TEST_CASE("houlsby forward examples") {
  auto adapter = HoulsbyAdapter{make_linear({1, 1}, {1.0}, {0.0}), make_linear({1, 1}, {1.0}, {0.0})};
  auto one = Tensor::from_data({1, 1}, {1.0});
  CHECK(houlsby_forward(one, adapter).item() == doctest::Approx(1.8413447460685429).epsilon(1e-12));
  auto zero = Tensor::from_data({1, 1}, {0.0});
  CHECK(houlsby_forward(zero, adapter).item() == 0.0);

  Rng rng(1);
  auto h = random_tensor(rng, {3, 4});
  HoulsbyAdapter idle{make_linear({4, 2}, {0.3, -0.2, 0.1, 0.5, -0.7, 0.2, 0.4, 0.1}, {0.1, 0.2}),
                      make_linear({2, 4}, std::vector<double>(8, 0.0), std::vector<double>(4, 0.0))};
  CHECK(bitwise_equal(houlsby_forward(h, idle), h));
  CHECK_THROWS_AS(houlsby_forward(random_tensor(rng, {3, 5}), idle), DimensionError);
}

TEST_CASE("lora forward examples") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto bias = Tensor::zeros({2});
  auto x = Tensor::from_data({1, 2}, {1, 0});
  LoraDelta delta{Tensor::from_data({2, 1}, {1, 0}), Tensor::from_data({1, 2}, {1, 0}), 1.0};
  auto out = lora_forward(x, eye, bias, delta);
  CHECK(out[0] == 2.0);
  CHECK(out[1] == 0.0);

  Rng rng(2);
  auto w = random_tensor(rng, {4, 3});
  auto b = random_tensor(rng, {3});
  auto in = random_tensor(rng, {5, 4});
  LoraDelta d{random_tensor(rng, {4, 2}), Tensor::zeros({2, 3}), 2.0};
  CHECK(bitwise_equal(lora_forward(in, w, b, d), ops::linear(in, w, b)));

  d.b = random_tensor(rng, {2, 3});
  auto base = ops::linear(in, w, b);
  auto single = lora_forward(in, w, b, d);
  d.alpha = 4.0;
  auto doubled = lora_forward(in, w, b, d);
  for (std::size_t i = 0; i < base.numel(); ++i)
    CHECK(doubled[i] - base[i] == doctest::Approx(2 * (single[i] - base[i])).epsilon(1e-12));

  d.b = random_tensor(rng, {2, 4});
  CHECK_THROWS_AS(lora_forward(in, w, b, d), DimensionError);
}

TEST_CASE("lora gradients reach only the factors") {
  Rng rng(3);
  auto w = random_tensor(rng, {4, 3});
  auto b = random_tensor(rng, {3});
  LoraDelta d{random_tensor(rng, {4, 2}, -1, 1, true), random_tensor(rng, {2, 3}, -1, 1, true), 2.0};
  backward(ops::sum(lora_forward(random_tensor(rng, {5, 4}), w, b, d)));
  CHECK_FALSE(w.has_grad());
  CHECK_FALSE(b.has_grad());
  CHECK(d.a.has_grad());
  CHECK(d.b.has_grad());
}

TEST_CASE("evp prompt examples and sharing") {
  Rng rng(4);
  const std::size_t d = 8, r = 2, blocks = 4, fdim = 12;
  EvpAdapterBank bank;
  bank.feature = {features::FeatureKind::image};
  bank.feature_embed = Linear{random_tensor(rng, {fdim, d}), Tensor::zeros({d}), std::nullopt};
  for (std::size_t i = 0; i < blocks; ++i)
    bank.down.push_back(Linear{random_tensor(rng, {d, r}), Tensor::zeros({r}), std::nullopt});
  bank.up = Linear{Tensor::zeros({r, d}), Tensor::zeros({d}), std::nullopt};
  auto feats = random_tensor(rng, {6, fdim});

  auto prompts = evp_prompts(feats, bank, blocks);
  REQUIRE(prompts.size() == blocks);
  for (const auto& p : prompts) {
    CHECK(p.shape() == Shape{6, d});
    for (double v : p.data()) CHECK(v == 0.0);
  }

  bank.up.weight = random_tensor(rng, {r, d});
  for (const auto& p : evp_prompts(Tensor::zeros({6, fdim}), bank, blocks))
    for (double v : p.data()) CHECK(v == 0.0);

  auto before = evp_prompts(feats, bank, blocks);
  bank.up.weight.mutable_data()[0] += 0.5;
  auto shared = evp_prompts(feats, bank, blocks);
  for (std::size_t i = 0; i < blocks; ++i) CHECK_FALSE(bitwise_equal(before[i], shared[i]));

  bank.down[2].weight.mutable_data()[1] += 0.5;
  auto local = evp_prompts(feats, bank, blocks);
  for (std::size_t i = 0; i < blocks; ++i) CHECK(bitwise_equal(shared[i], local[i]) == (i != 2));

  CHECK_THROWS_AS(evp_prompts(random_tensor(rng, {6, fdim + 1}), bank, blocks), DimensionError);
  CHECK_THROWS_AS(evp_prompts(feats, bank, blocks + 1), DimensionError);
}

TEST_CASE("an attached EVP bank has one shared up map") {
  auto c = tiny_config();
  c.n_enc_layers = 3;
  CaptionModel model(c);
  model.attach_evp({features::FeatureKind::grayscale}, 2, 1);
  std::size_t ups = 0, downs = 0;
  for (const auto& p : model.parameters()) {
    if (p.origin != ParamOrigin::evp) continue;
    ups += p.path.starts_with("evp.up.");
    downs += p.path.starts_with("evp.down") && p.path.ends_with(".weight");
  }
  CHECK(ups == 2);
  CHECK(downs == 3);
  CHECK(model.evp()->channels() == 1);
}

TEST_CASE("count examples") {
  std::vector<ParamSpec> layer{{"fc.weight", {8, 8}}, {"fc.bias", {8}}};
  auto plan = plan_for(layer, {"bitfit", {strategy::BitFit{Scope::all}}});
  auto count = count_trainable(layer, plan);
  CHECK(count.trainable == 8);
  CHECK(count.total == 72);
  CHECK(count.percent == doctest::Approx(100.0 * 8 / 72));

  auto full = count_trainable(layer, plan_for(layer, {"ft", {strategy::FullFT{Scope::all}}}));
  CHECK(full.percent == 100.0);

  auto c = tiny_config();
  c.d_model = 4;
  c.n_heads = 2;
  auto adapters = describe_houlsby(c, 2);
  std::uint64_t added = 0;
  for (const auto& s : adapters) added += s.numel();
  CHECK(added == 3 * c.n_dec_layers * 22);

  FreezePlan short_plan({{"fc.weight", true}});
  CHECK_THROWS_AS(count_trainable(layer, short_plan), AuditError);
  FreezePlan wrong({{"fc.weight", true}, {"fc.scale", false}});
  CHECK_THROWS_AS(count_trainable(layer, wrong), AuditError);
}

TEST_CASE("bitfit trains exactly the base biases and adds nothing") {
  for (const char* name : {"bitfit_a", "bitfit_v", "bitfit_t"}) {
    CaptionModel model(tiny_config());
    const auto before = model.parameters().size();
    auto plan = attach(model, make_strategy(name, StrategyHyper::toy()), 1);
    CHECK(model.parameters().size() == before);
    const std::string scope = name == std::string("bitfit_v")   ? "encoder."
                              : name == std::string("bitfit_t") ? "decoder."
                                                                : "";
    std::set<std::string> expected;
    for (const auto& p : model.parameters())
      if (p.path.ends_with(".bias") && p.path.starts_with(scope)) expected.insert(p.path);
    auto got = plan.trainable_paths();
    CHECK(std::set<std::string>(got.begin(), got.end()) == expected);
  }
}

TEST_CASE("strategy construction errors") {
  CHECK_THROWS_AS(make_strategy("prefix_tuning", StrategyHyper::toy()), ConfigError);
  CHECK_THROWS_AS(scope_from_string("middle"), StrategyError);
  std::vector<ParamSpec> layer{{"encoder.fc.weight", {2, 2}}, {"encoder.fc.bias", {2}}};
  CHECK_THROWS_AS(plan_for(layer, {"clash", {strategy::FullFT{Scope::all}, strategy::BitFit{Scope::all}}}),
                  StrategyError);
  CHECK_THROWS_AS(plan_for(layer, {"none", {strategy::BitFit{Scope::decoder}}}), StrategyError);

  CaptionModel model(tiny_config());
  attach(model, make_strategy("houlsby_t", StrategyHyper::toy()), 1);
  CHECK_THROWS_AS(attach(model, make_strategy("houlsby_t", StrategyHyper::toy()), 1), StrategyError);
}

TEST_CASE("identity at init") {
  Rng rng(5);
  const CaptionModel base(tiny_config());
  std::vector<std::pair<Tensor, std::vector<int>>> inputs;
  for (int i = 0; i < 8; ++i) inputs.emplace_back(random_image(rng, 16), random_caption(rng, 4, 20));
  for (const auto& name : kIdentityCells) {
    CAPTURE(name);
    auto model = base.clone();
    attach(model, make_strategy(name, StrategyHyper::toy()), 11);
    for (const auto& [img, cap] : inputs)
      CHECK(bitwise_equal(logits_for(base, img, cap), logits_for(model, img, cap)));
  }
}

TEST_CASE("gradients stay inside the plan") {
  Rng rng(6);
  for (const auto& name : strategy_names()) {
    CAPTURE(name);
    CaptionModel model(tiny_config());
    auto plan = attach(model, make_strategy(name, StrategyHyper::toy()), 2);
    wake_adapters(model, rng);
    backward(caption_loss(model, random_image(rng, 16), random_caption(rng, 5, 20)));
    for (const auto& p : model.parameters()) {
      CAPTURE(p.path);
      const bool any = p.tensor.has_grad() &&
                       std::any_of(p.tensor.grad().begin(), p.tensor.grad().end(),
                                   [](double g) { return g != 0.0; });
      CHECK(any == plan.trainable(p.path));
    }
  }
}

TEST_CASE("trainable counts add up over strategy elements") {
  const auto config = tiny_config();
  for (const auto& name : strategy_names()) {
    CAPTURE(name);
    const auto strategy = make_strategy(name, StrategyHyper::toy());
    CaptionModel model(config);
    auto plan = attach(model, strategy, 1);
    const auto registry = model.parameter_specs();
    std::uint64_t sum = 0;
    for (const auto& el : strategy.elements) sum += element_count(registry, el);
    auto count = count_trainable(model, plan);
    CHECK(count.trainable == sum);
    CHECK(count.total == model.parameter_count());
    auto audit = audit_strategy(config, strategy);
    CHECK(audit.trainable == count.trainable);
    CHECK(audit.total == count.total);
  }
}

TEST_CASE("frozen weights survive training") {
  Rng rng(7);
  for (const char* name : {"houlsby_t", "evp_lora", "linear_ft_t", "bitfit_v"}) {
    CAPTURE(name);
    CaptionModel model(tiny_config());
    auto plan = attach(model, make_strategy(name, StrategyHyper::toy()), 3);
    const auto snap = snapshot(model);
    train_steps(model, plan, name == std::string("houlsby_t") ? 100 : 20, rng);
    CHECK(assert_frozen(snap, model, plan).empty());
  }

  CaptionModel full(tiny_config());
  auto plan = attach(full, make_strategy("ft_a", StrategyHyper::toy()), 3);
  const auto snap = snapshot(full);
  train_steps(full, plan, 5, rng);
  CHECK(assert_frozen(snap, full, plan).empty());
}

TEST_CASE("assert_frozen reports a leaked path") {
  Rng rng(8);
  CaptionModel model(tiny_config());
  auto plan = attach(model, make_strategy("houlsby_t", StrategyHyper::toy()), 3);
  const std::string leaked = "decoder.block0.mlp.fc2.weight";
  REQUIRE_FALSE(plan.trainable(leaked));
  auto entries = plan.entries();
  for (auto& [path, flag] : entries)
    if (path == leaked) flag = true;
  FreezePlan mutated(entries);
  apply_plan(model, mutated);
  const auto snap = snapshot(model);
  train_steps(model, mutated, 3, rng);
  CHECK(assert_frozen(snap, model, plan) == std::vector<std::string>{leaked});
}

TEST_CASE("optimizer state covers only trainable paths") {
  CaptionModel model(tiny_config());
  auto plan = attach(model, make_strategy("lora_t", StrategyHyper::toy()), 3);
  TrainConfig tc;
  AdamW opt(model, plan, tc);
  CHECK(opt.state_paths() == plan.trainable_paths());
  std::size_t elements = 0;
  for (const auto& p : model.parameters())
    if (plan.trainable(p.path)) elements += p.tensor.numel();
  CHECK(opt.state_elements() == 2 * elements);
}

TEST_CASE("full-scale audit") {
  const auto hyper = StrategyHyper::paper();
  auto pct = [&](const char* name) { return audit_paper_scale(make_strategy(name, hyper)); };
  CHECK(std::abs(pct("ft_v") - 38.44) <= 1.5);
  CHECK(std::abs(pct("ft_t") - 61.56) <= 1.5);
  CHECK(std::abs(pct("bitfit_v") - 0.05) <= 0.03);
  CHECK(std::abs(pct("bitfit_t") - 0.08) <= 0.04);
  CHECK(std::abs(pct("bitfit_a") - 0.13) <= 0.05);
  CHECK(std::abs(pct("houlsby_t") - 1.18) <= 0.15);
  CHECK(std::abs(pct("lora_t") - 0.26) <= 0.08);
  CHECK(std::abs(pct("linear_houlsby") - 1.44) <= 0.2);
  CHECK(std::abs(pct("vitblock_houlsby") - 4.18) <= 0.6);
  CHECK(std::abs(pct("evp_houlsby") - 1.47) <= 0.4);
  CHECK(pct("evp") >= 0.1);
  CHECK(pct("evp") <= 0.5);
  CHECK(pct("ft_a") == 100.0);
}

TEST_CASE("houlsby bottleneck solved from the target share") {
  // 36 insertions of 2·d·m + m + d elements should make up 1.18% of the
  // full-scale model; solve for m and recount.
  const auto config = ModelConfig::paper_scale();
  std::uint64_t total = 0;
  for (const auto& s : describe_base(config)) total += s.numel();
  const double d = static_cast<double>(config.d_model);
  const double insertions = 3.0 * static_cast<double>(config.n_dec_layers);
  const double want = 0.0118 * static_cast<double>(total);
  const double m = (want / insertions - d) / (2 * d + 1);
  CHECK(std::abs(m - 48.0) < 1.5);
  for (std::size_t chosen : {static_cast<std::size_t>(std::round(m)), std::size_t{48}}) {
    TuningStrategy s{"h", {strategy::Houlsby{Scope::decoder, chosen}}};
    CHECK(std::abs(audit_paper_scale(s) - 1.18) <= 0.15);
  }
}
