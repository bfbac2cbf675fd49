#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "peftcap/adapters.hpp"
#include "peftcap/model_config.hpp"
#include "peftcap/tensor.hpp"

namespace peftcap {

struct NamedParam {
  std::string path;
  ParamOrigin origin;
  Tensor tensor;
};

struct Attention {
  Linear q, k, v, o;
};

struct Mlp {
  Linear fc1, fc2;
};

// Pre-LN ViT block: x + attn(LN(x)), then x + mlp(LN(x)).
struct EncoderBlock {
  LayerNormParams norm1;
  Attention attn;
  LayerNormParams norm2;
  Mlp mlp;
};

// Pre-LN decoder block with causal self-attention, cross-attention over the
// visual tokens, and an FFN. Houlsby adapters, when attached, sit on each
// sub-layer output before its residual add.
struct DecoderBlock {
  LayerNormParams norm1;
  Attention self_attn;
  LayerNormParams norm2;
  Attention cross_attn;
  LayerNormParams norm3;
  Mlp mlp;
  std::optional<HoulsbyAdapter> adapter_self;
  std::optional<HoulsbyAdapter> adapter_cross;
  std::optional<HoulsbyAdapter> adapter_mlp;
};

struct VisualProjection {
  ProjectionKind kind = ProjectionKind::none;
  Linear linear;
  std::optional<EncoderBlock> block;
};

// Image-derived constants fed to the encoder: flattened patches and, when an
// EVP bank is attached, the patchified handcrafted feature.
struct VisualInput {
  Tensor patches;
  Tensor feature_patches;
};

// [c×H×W] -> [N × patch²·c], patches in row-major grid order, each flattened
// channel-major.
Tensor patchify(const Tensor& image, std::size_t patch);

Tensor encoder_block_forward(const EncoderBlock& block, const Tensor& x, std::size_t heads,
                             double eps);

/// Miniature BLIP-style caption model: ViT patch encoder, optional visual
/// projection, causal text decoder with cross-attention. Every weight lives
/// in an ordered registry keyed by dotted path; adapters attach by appending
/// to it. Move-only, because copies would alias the same weights.
class CaptionModel {
 public:
  explicit CaptionModel(ModelConfig config);
  CaptionModel(CaptionModel&&) = default;
  CaptionModel& operator=(CaptionModel&&) = default;
  CaptionModel(const CaptionModel&) = delete;
  CaptionModel& operator=(const CaptionModel&) = delete;

  // Deep copy with the same attachments and weights; flags are reset to frozen.
  CaptionModel clone() const;

  const ModelConfig& config() const { return config_; }
  const Attachments& attachments() const { return attachments_; }

  const std::vector<NamedParam>& parameters() const { return params_; }
  std::vector<ParamSpec> parameter_specs() const;
  const Tensor& parameter(const std::string& path) const;
  bool has_parameter(const std::string& path) const { return index_.contains(path); }
  std::uint64_t parameter_count() const;

  void attach_projection(ProjectionKind kind, bool zero_init, std::uint64_t seed);
  void attach_evp(const features::FeatureSpec& feature, std::size_t bottleneck,
                  std::uint64_t seed);
  void attach_houlsby(std::size_t bottleneck, std::uint64_t seed);
  void attach_lora(std::size_t rank, double alpha, LoraTargets targets, std::uint64_t seed);

  // Checks the image size, patchifies, and computes the EVP feature if needed.
  VisualInput prepare(const Tensor& image) const;

  Tensor embed_patches(const Tensor& patches) const;
  Tensor patchify_embed(const Tensor& image) const;
  // Prompts, when given, are added to the patch tokens (never CLS) before
  // each block.
  Tensor encoder_forward(const Tensor& tokens, std::span<const Tensor> prompts = {}) const;
  // Patch embedding, EVP prompts and the encoder stack; no projection.
  Tensor encode_backbone(const VisualInput& input) const;
  Tensor project_visual(const Tensor& tokens) const;
  Tensor encode(const VisualInput& input) const;

  /// Logits [B·T × V] for B captions padded with PAD to the longest length T.
  /// Rows for caption b occupy [b·T, (b+1)·T).
  Tensor decoder_forward(std::span<const std::vector<int>> captions, const Tensor& visual) const;
  Tensor decoder_forward(std::span<const int> caption, const Tensor& visual) const;

  std::vector<EncoderBlock>& encoder_blocks() { return enc_blocks_; }
  std::vector<DecoderBlock>& decoder_blocks() { return dec_blocks_; }
  const VisualProjection& projection() const { return projection_; }
  const std::optional<EvpAdapterBank>& evp() const { return evp_; }

 private:
  void allocate(const std::vector<ParamSpec>& specs, std::uint64_t seed);
  Tensor& slot(const std::string& path);
  Linear bind_linear(const std::string& prefix);
  LayerNormParams bind_norm(const std::string& prefix);
  Attention bind_attention(const std::string& prefix);
  EncoderBlock bind_encoder_block(const std::string& prefix);

  ModelConfig config_;
  Attachments attachments_;
  std::vector<NamedParam> params_;
  std::unordered_map<std::string, std::size_t> index_;

  Linear patch_embed_;
  Tensor cls_token_;
  Tensor enc_pos_;
  std::vector<EncoderBlock> enc_blocks_;
  std::optional<LayerNormParams> enc_norm_;
  VisualProjection projection_;
  Tensor tok_embed_;
  Tensor dec_pos_;
  std::vector<DecoderBlock> dec_blocks_;
  LayerNormParams dec_norm_;
  Tensor head_weight_;
  Tensor head_bias_;
  std::optional<EvpAdapterBank> evp_;
};

/// Teacher-forced loss: logits at positions 0..T−2 against tokens 1..T−1,
/// PAD ignored. The caption must start with BOS and end with EOS (trailing
/// PAD allowed); otherwise FormatError.
Tensor caption_loss(const CaptionModel& model, const Tensor& image, std::span<const int> caption);

/// Token-mean loss over several captions of the same image, sharing one
/// visual encoding.
Tensor caption_group_loss(const CaptionModel& model, const Tensor& visual,
                          std::span<const std::vector<int>> captions);

void check_caption_format(std::span<const int> caption);

/// Greedy argmax decoding from BOS until EOS or max_len tokens (BOS included).
std::vector<int> generate(const CaptionModel& model, const Tensor& image, std::size_t max_len);
std::vector<int> generate_from_visual(const CaptionModel& model, const Tensor& visual,
                                      std::size_t max_len);

}  // namespace peftcap
