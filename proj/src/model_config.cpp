#include "peftcap/model_config.hpp"

#include <stdexcept>

#include "peftcap/errors.hpp"

namespace peftcap {

namespace {

std::string block_name(const char* stack, std::size_t i) {
  return std::string(stack) + ".block" + std::to_string(i);
}

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                std::size_t outw, ParamOrigin origin, ParamInit weight_init = ParamInit::normal) {
  out.push_back({prefix + ".weight", {in, outw}, origin, weight_init});
  out.push_back({prefix + ".bias", {outw}, origin, ParamInit::zeros});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d,
              ParamOrigin origin) {
  out.push_back({prefix + ".weight", {d}, origin, ParamInit::ones});
  out.push_back({prefix + ".bias", {d}, origin, ParamInit::zeros});
}

void add_attention(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d,
                   ParamOrigin origin) {
  for (const char* name : {"q", "k", "v", "o"}) add_linear(out, prefix + "." + name, d, d, origin);
}

void add_mlp(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d,
             std::size_t ff, ParamOrigin origin) {
  add_linear(out, prefix + ".fc1", d, ff, origin);
  add_linear(out, prefix + ".fc2", ff, d, origin);
}

void add_encoder_block(std::vector<ParamSpec>& out, const std::string& prefix,
                       const ModelConfig& c, ParamOrigin origin) {
  add_norm(out, prefix + ".norm1", c.d_model, origin);
  add_attention(out, prefix + ".attn", c.d_model, origin);
  add_norm(out, prefix + ".norm2", c.d_model, origin);
  add_mlp(out, prefix + ".mlp", c.d_model, c.d_ff, origin);
}

}  // namespace

std::string to_string(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::none: return "none";
    case ProjectionKind::linear: return "linear";
    case ProjectionKind::vit_block: return "vit_block";
  }
  return "?";
}

ProjectionKind projection_kind_from_string(const std::string& name) {
  if (name == "none") return ProjectionKind::none;
  if (name == "linear") return ProjectionKind::linear;
  if (name == "vit_block") return ProjectionKind::vit_block;
  throw std::invalid_argument("unknown projection kind '" + name + "' (none|linear|vit_block)");
}

std::string to_string(LoraTargets targets) {
  switch (targets) {
    case LoraTargets::self_and_cross: return "self_and_cross";
    case LoraTargets::cross_only: return "cross_only";
    case LoraTargets::self_only: return "self_only";
  }
  return "?";
}

LoraTargets lora_targets_from_string(const std::string& name) {
  if (name == "self_and_cross" || name == "both") return LoraTargets::self_and_cross;
  if (name == "cross_only" || name == "cross") return LoraTargets::cross_only;
  if (name == "self_only" || name == "self") return LoraTargets::self_only;
  throw std::invalid_argument("unknown LoRA targets '" + name +
                              "' (self_and_cross|cross_only|self_only)");
}

std::string to_string(ParamOrigin origin) {
  switch (origin) {
    case ParamOrigin::base: return "base";
    case ParamOrigin::projection: return "projection";
    case ParamOrigin::houlsby: return "houlsby";
    case ParamOrigin::lora: return "lora";
    case ParamOrigin::evp: return "evp";
  }
  return "?";
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    fail("image_size must be a positive multiple of patch_size");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    fail("d_model must be divisible by n_heads");
  if (d_ff == 0) fail("d_ff must be positive");
  if (in_channels == 0) fail("in_channels must be positive");
  if (max_caption_len < 2) fail("max_caption_len must leave room for BOS and EOS");
  if (vocab_size < 4) fail("vocab_size must cover the four special tokens");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
}

ModelConfig ModelConfig::toy(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.image_size = 384;
  c.patch_size = 16;
  c.d_model = 768;
  c.n_heads = 12;
  c.d_ff = 3072;
  c.n_enc_layers = 12;
  c.n_dec_layers = 12;
  c.vocab_size = 30522;
  c.max_caption_len = 512;
  c.tie_embeddings = true;
  return c;
}

std::vector<ParamSpec> describe_base(const ModelConfig& c) {
  std::vector<ParamSpec> out;
  const auto base = ParamOrigin::base;
  add_linear(out, "encoder.patch_embed", c.patch_dim(), c.d_model, base);
  out.push_back({"encoder.cls_token", {1, c.d_model}, base, ParamInit::normal});
  out.push_back({"encoder.pos_embed", {c.n_patches() + 1, c.d_model}, base, ParamInit::normal});
  for (std::size_t i = 0; i < c.n_enc_layers; ++i)
    add_encoder_block(out, block_name("encoder", i), c, base);
  if (c.n_enc_layers > 0) add_norm(out, "encoder.norm", c.d_model, base);

  if (c.projection_kind != ProjectionKind::none) {
    auto proj = describe_projection(c, c.projection_kind, c.projection_zero_init);
    for (auto& p : proj) p.origin = base;
    out.insert(out.end(), proj.begin(), proj.end());
  }

  out.push_back({"decoder.tok_embed.weight", {c.vocab_size, c.d_model}, base, ParamInit::normal});
  out.push_back(
      {"decoder.pos_embed.weight", {c.max_caption_len, c.d_model}, base, ParamInit::normal});
  for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
    const auto prefix = block_name("decoder", i);
    add_norm(out, prefix + ".norm1", c.d_model, base);
    add_attention(out, prefix + ".self_attn", c.d_model, base);
    add_norm(out, prefix + ".norm2", c.d_model, base);
    add_attention(out, prefix + ".cross_attn", c.d_model, base);
    add_norm(out, prefix + ".norm3", c.d_model, base);
    add_mlp(out, prefix + ".mlp", c.d_model, c.d_ff, base);
  }
  add_norm(out, "decoder.norm", c.d_model, base);
  if (!c.tie_embeddings) {
    out.push_back({"decoder.head.weight", {c.d_model, c.vocab_size}, base, ParamInit::normal});
  }
  out.push_back({"decoder.head.bias", {c.vocab_size}, base, ParamInit::zeros});
  return out;
}

std::vector<ParamSpec> describe_projection(const ModelConfig& c, ProjectionKind kind,
                                           bool zero_init) {
  std::vector<ParamSpec> out;
  const auto origin = ParamOrigin::projection;
  if (kind == ProjectionKind::linear) {
    add_linear(out, "projection", c.d_model, c.d_model, origin,
               zero_init ? ParamInit::zeros : ParamInit::identity);
  } else if (kind == ProjectionKind::vit_block) {
    add_encoder_block(out, "projection.block", c, origin);
  }
  return out;
}

std::vector<ParamSpec> describe_houlsby(const ModelConfig& c, std::size_t m) {
  std::vector<ParamSpec> out;
  if (m == 0) return out;
  for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
    for (const char* site : {"adapter_self", "adapter_cross", "adapter_mlp"}) {
      const auto prefix = block_name("decoder", i) + "." + site;
      add_linear(out, prefix + ".down", c.d_model, m, ParamOrigin::houlsby);
      add_linear(out, prefix + ".up", m, c.d_model, ParamOrigin::houlsby, ParamInit::zeros);
    }
  }
  return out;
}

std::vector<ParamSpec> describe_lora(const ModelConfig& c, std::size_t r, LoraTargets targets) {
  std::vector<ParamSpec> out;
  if (r == 0) return out;
  std::vector<const char*> attns;
  if (targets != LoraTargets::cross_only) attns.push_back("self_attn");
  if (targets != LoraTargets::self_only) attns.push_back("cross_attn");
  for (std::size_t i = 0; i < c.n_dec_layers; ++i) {
    for (const char* attn : attns) {
      for (const char* proj : {"q", "v"}) {
        const auto prefix = block_name("decoder", i) + "." + attn + "." + proj;
        out.push_back({prefix + ".lora_a", {c.d_model, r}, ParamOrigin::lora, ParamInit::fan_in});
        out.push_back({prefix + ".lora_b", {r, c.d_model}, ParamOrigin::lora, ParamInit::zeros});
      }
    }
  }
  return out;
}

std::vector<ParamSpec> describe_evp(const ModelConfig& c, std::size_t channels,
                                    std::size_t r) {
  std::vector<ParamSpec> out;
  if (r == 0) return out;
  const auto origin = ParamOrigin::evp;
  add_linear(out, "evp.feature_embed", c.patch_size * c.patch_size * channels, c.d_model, origin);
  for (std::size_t i = 0; i < c.n_enc_layers; ++i)
    add_linear(out, "evp.down" + std::to_string(i), c.d_model, r, origin);
  add_linear(out, "evp.up", r, c.d_model, origin, ParamInit::zeros);
  return out;
}

std::vector<ParamSpec> describe_parameters(const ModelConfig& config,
                                           const Attachments& a) {
  if (a.projection != ProjectionKind::none && config.projection_kind != ProjectionKind::none) {
    throw StrategyError("model already carries a " + to_string(config.projection_kind) +
                        " projection");
  }
  auto out = describe_base(config);
  auto append = [&out](std::vector<ParamSpec> more) {
    out.insert(out.end(), std::make_move_iterator(more.begin()),
               std::make_move_iterator(more.end()));
  };
  append(describe_projection(config, a.projection, a.projection_zero_init));
  append(describe_evp(config, a.evp_channels, a.evp_bottleneck));
  append(describe_houlsby(config, a.houlsby_bottleneck));
  append(describe_lora(config, a.lora_rank, a.lora_targets));
  return out;
}

}  // namespace peftcap
