#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "peftcap/tensor.hpp"

namespace peftcap {

namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
}  // namespace tokens

enum class ProjectionKind { none, linear, vit_block };

std::string to_string(ProjectionKind kind);
ProjectionKind projection_kind_from_string(const std::string& name);

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t in_channels = 3;
  std::size_t patch_size = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 4;
  std::size_t vocab_size = 64;
  std::size_t max_caption_len = 16;
  ProjectionKind projection_kind = ProjectionKind::none;
  bool projection_zero_init = false;
  bool tie_embeddings = false;
  double ln_eps = 1e-6;
  std::uint64_t seed = 0;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t n_patches() const { return grid_side() * grid_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }

  // Throws std::invalid_argument naming the violated invariant.
  void validate() const;

  // CPU-trainable default shape.
  static ModelConfig toy(std::size_t vocab_size);
  // BLIP-base caption shape (ViT-B/16 at 384 px + 12-layer BERT decoder with
  // tied head). Only ever used for shape-level parameter audits.
  static ModelConfig paper_scale();
};

enum class LoraTargets { self_and_cross, cross_only, self_only };

std::string to_string(LoraTargets targets);
LoraTargets lora_targets_from_string(const std::string& name);

// Adapters present in a model on top of the base architecture.
struct Attachments {
  std::size_t houlsby_bottleneck = 0;  // 0 = none
  std::size_t lora_rank = 0;           // 0 = none
  double lora_alpha = 0.0;
  LoraTargets lora_targets = LoraTargets::self_and_cross;
  std::size_t evp_bottleneck = 0;  // 0 = none
  std::size_t evp_channels = 3;
  ProjectionKind projection = ProjectionKind::none;
  bool projection_zero_init = false;
};

enum class ParamOrigin { base, projection, houlsby, lora, evp };

std::string to_string(ParamOrigin origin);

// normal: N(0, 0.02²); fan_in: N(0, 1/in) for the first shape axis.
enum class ParamInit { normal, fan_in, zeros, ones, identity };

struct ParamSpec {
  std::string path;
  Shape shape;
  ParamOrigin origin = ParamOrigin::base;
  ParamInit init = ParamInit::normal;

  std::size_t numel() const { return shape_numel(shape); }
};

/// Ordered registry of every parameter a model with this config and these
/// attachments owns. Models allocate exactly this list; audits count it
/// without allocating.
std::vector<ParamSpec> describe_parameters(const ModelConfig& config,
                                           const Attachments& attachments = {});

// Pieces of the above, in registry order.
std::vector<ParamSpec> describe_base(const ModelConfig& config);
std::vector<ParamSpec> describe_projection(const ModelConfig& config, ProjectionKind kind,
                                           bool zero_init);
std::vector<ParamSpec> describe_houlsby(const ModelConfig& config, std::size_t bottleneck);
std::vector<ParamSpec> describe_lora(const ModelConfig& config, std::size_t rank,
                                     LoraTargets targets);
std::vector<ParamSpec> describe_evp(const ModelConfig& config, std::size_t channels,
                                    std::size_t bottleneck);

}  // namespace peftcap
