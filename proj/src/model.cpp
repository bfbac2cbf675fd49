#include "peftcap/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "peftcap/errors.hpp"
#include "peftcap/ops.hpp"
#include "peftcap/rng.hpp"

namespace peftcap {

namespace {

constexpr double kInitStd = 0.02;

int origin_rank(ParamOrigin origin) {
  switch (origin) {
    case ParamOrigin::base: return 0;
    case ParamOrigin::projection: return 1;
    case ParamOrigin::evp: return 2;
    case ParamOrigin::houlsby: return 3;
    case ParamOrigin::lora: return 4;
  }
  return 5;
}

Tensor init_tensor(const ParamSpec& spec, std::uint64_t seed) {
  Tensor t = Tensor::zeros(spec.shape);
  auto data = t.mutable_data();
  switch (spec.init) {
    case ParamInit::zeros: break;
    case ParamInit::ones: std::fill(data.begin(), data.end(), 1.0); break;
    case ParamInit::identity: {
      if (spec.shape.size() != 2 || spec.shape[0] != spec.shape[1])
        throw DimensionError("identity init needs a square matrix, got " + shape_str(spec.shape));
      for (std::size_t i = 0; i < spec.shape[0]; ++i) data[i * spec.shape[0] + i] = 1.0;
      break;
    }
    case ParamInit::normal:
    case ParamInit::fan_in: {
      const double stddev = spec.init == ParamInit::normal
                                ? kInitStd
                                : 1.0 / std::sqrt(static_cast<double>(spec.shape.at(0)));
      Rng rng(mix_seed(seed, hash_string(spec.path)));
      for (auto& v : data) v = rng.normal(0.0, stddev);
      break;
    }
  }
  return t;
}

Tensor attention_forward(const Attention& attn, const Tensor& x, const Tensor& kv,
                         std::size_t heads, bool causal, std::size_t blocks, bool shared_kv) {
  auto q = attn.q.forward(x);
  auto k = attn.k.forward(kv);
  auto v = attn.v.forward(kv);
  return attn.o.forward(ops::attention(q, k, v, heads, causal, blocks, shared_kv));
}

Tensor mlp_forward(const Mlp& mlp, const Tensor& x) {
  return mlp.fc2.forward(ops::gelu(mlp.fc1.forward(x)));
}

Tensor maybe_adapt(const std::optional<HoulsbyAdapter>& adapter, const Tensor& h) {
  return adapter ? houlsby_forward(h, *adapter) : h;
}

}  // namespace

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3 || patch == 0 || image.dim(1) % patch != 0 ||
      image.dim(2) % patch != 0) {
    throw DimensionError("cannot cut " + shape_str(image.shape()) + " into " +
                         std::to_string(patch) + "-pixel patches");
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t pdim = patch * patch * c;
  auto src = image.data();
  std::vector<double> out(gh * gw * pdim);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* dst = out.data() + (gy * gw + gx) * pdim;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            *dst++ = src[(ch * h + gy * patch + y) * w + gx * patch + x];
    }
  }
  return Tensor::from_data({gh * gw, pdim}, std::move(out));
}

Tensor encoder_block_forward(const EncoderBlock& block, const Tensor& x, std::size_t heads,
                             double eps) {
  auto h = block.norm1.forward(x, eps);
  auto y = ops::add(x, attention_forward(block.attn, h, h, heads, false, 1, false));
  return ops::add(y, mlp_forward(block.mlp, block.norm2.forward(y, eps)));
}

CaptionModel::CaptionModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  allocate(describe_base(config_), config_.seed);

  patch_embed_ = bind_linear("encoder.patch_embed");
  cls_token_ = slot("encoder.cls_token");
  enc_pos_ = slot("encoder.pos_embed");
  for (std::size_t i = 0; i < config_.n_enc_layers; ++i)
    enc_blocks_.push_back(bind_encoder_block("encoder.block" + std::to_string(i)));
  if (config_.n_enc_layers > 0) enc_norm_ = bind_norm("encoder.norm");

  projection_.kind = config_.projection_kind;
  if (projection_.kind == ProjectionKind::linear) projection_.linear = bind_linear("projection");
  if (projection_.kind == ProjectionKind::vit_block)
    projection_.block = bind_encoder_block("projection.block");

  tok_embed_ = slot("decoder.tok_embed.weight");
  dec_pos_ = slot("decoder.pos_embed.weight");
  for (std::size_t i = 0; i < config_.n_dec_layers; ++i) {
    const auto p = "decoder.block" + std::to_string(i);
    DecoderBlock b;
    b.norm1 = bind_norm(p + ".norm1");
    b.self_attn = bind_attention(p + ".self_attn");
    b.norm2 = bind_norm(p + ".norm2");
    b.cross_attn = bind_attention(p + ".cross_attn");
    b.norm3 = bind_norm(p + ".norm3");
    b.mlp = Mlp{bind_linear(p + ".mlp.fc1"), bind_linear(p + ".mlp.fc2")};
    dec_blocks_.push_back(std::move(b));
  }
  dec_norm_ = bind_norm("decoder.norm");
  if (!config_.tie_embeddings) head_weight_ = slot("decoder.head.weight");
  head_bias_ = slot("decoder.head.bias");
}

void CaptionModel::allocate(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
  for (const auto& spec : specs) {
    if (index_.contains(spec.path))
      throw StrategyError("parameter '" + spec.path + "' already exists");
  }
  for (const auto& spec : specs) {
    params_.push_back({spec.path, spec.origin, init_tensor(spec, seed)});
  }
  std::stable_sort(params_.begin(), params_.end(), [](const NamedParam& a, const NamedParam& b) {
    return origin_rank(a.origin) < origin_rank(b.origin);
  });
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].path, i);
}

Tensor& CaptionModel::slot(const std::string& path) {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("no parameter '" + path + "'");
  return params_[it->second].tensor;
}

const Tensor& CaptionModel::parameter(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("no parameter '" + path + "'");
  return params_[it->second].tensor;
}

std::vector<ParamSpec> CaptionModel::parameter_specs() const {
  std::vector<ParamSpec> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back({p.path, p.tensor.shape(), p.origin});
  return out;
}

std::uint64_t CaptionModel::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Linear CaptionModel::bind_linear(const std::string& prefix) {
  return Linear{slot(prefix + ".weight"), slot(prefix + ".bias"), std::nullopt};
}

LayerNormParams CaptionModel::bind_norm(const std::string& prefix) {
  return LayerNormParams{slot(prefix + ".weight"), slot(prefix + ".bias")};
}

Attention CaptionModel::bind_attention(const std::string& prefix) {
  return Attention{bind_linear(prefix + ".q"), bind_linear(prefix + ".k"),
                   bind_linear(prefix + ".v"), bind_linear(prefix + ".o")};
}

EncoderBlock CaptionModel::bind_encoder_block(const std::string& prefix) {
  EncoderBlock b;
  b.norm1 = bind_norm(prefix + ".norm1");
  b.attn = bind_attention(prefix + ".attn");
  b.norm2 = bind_norm(prefix + ".norm2");
  b.mlp = Mlp{bind_linear(prefix + ".mlp.fc1"), bind_linear(prefix + ".mlp.fc2")};
  return b;
}

void CaptionModel::attach_projection(ProjectionKind kind, bool zero_init, std::uint64_t seed) {
  if (kind == ProjectionKind::none) return;
  if (projection_.kind != ProjectionKind::none)
    throw StrategyError("model already carries a " + to_string(projection_.kind) + " projection");
  allocate(describe_projection(config_, kind, zero_init), seed);
  attachments_.projection = kind;
  attachments_.projection_zero_init = zero_init;
  projection_.kind = kind;
  if (kind == ProjectionKind::linear) projection_.linear = bind_linear("projection");
  else projection_.block = bind_encoder_block("projection.block");
}

void CaptionModel::attach_evp(const features::FeatureSpec& feature, std::size_t bottleneck,
                              std::uint64_t seed) {
  if (evp_) throw StrategyError("EVP adapters already attached");
  if (bottleneck == 0) throw RankError("EVP bottleneck must be positive");
  const std::size_t channels = features::channels(feature.kind);
  allocate(describe_evp(config_, channels, bottleneck), seed);
  attachments_.evp_bottleneck = bottleneck;
  attachments_.evp_channels = channels;
  EvpAdapterBank bank;
  bank.feature = feature;
  bank.feature_embed = bind_linear("evp.feature_embed");
  for (std::size_t i = 0; i < config_.n_enc_layers; ++i)
    bank.down.push_back(bind_linear("evp.down" + std::to_string(i)));
  bank.up = bind_linear("evp.up");
  evp_ = std::move(bank);
}

void CaptionModel::attach_houlsby(std::size_t bottleneck, std::uint64_t seed) {
  if (attachments_.houlsby_bottleneck != 0) throw StrategyError("Houlsby adapters already attached");
  if (bottleneck == 0) throw RankError("adapter bottleneck must be positive");
  allocate(describe_houlsby(config_, bottleneck), seed);
  attachments_.houlsby_bottleneck = bottleneck;
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i) {
    const auto p = "decoder.block" + std::to_string(i);
    auto adapter = [&](const char* site) {
      return HoulsbyAdapter{bind_linear(p + "." + site + ".down"),
                            bind_linear(p + "." + site + ".up")};
    };
    dec_blocks_[i].adapter_self = adapter("adapter_self");
    dec_blocks_[i].adapter_cross = adapter("adapter_cross");
    dec_blocks_[i].adapter_mlp = adapter("adapter_mlp");
  }
}

void CaptionModel::attach_lora(std::size_t rank, double alpha, LoraTargets targets,
                               std::uint64_t seed) {
  if (attachments_.lora_rank != 0) throw StrategyError("LoRA already attached");
  if (rank == 0 || rank > config_.d_model) {
    throw RankError("LoRA rank " + std::to_string(rank) + " outside [1, " +
                    std::to_string(config_.d_model) + "]");
  }
  allocate(describe_lora(config_, rank, targets), seed);
  attachments_.lora_rank = rank;
  attachments_.lora_alpha = alpha;
  attachments_.lora_targets = targets;
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i) {
    const auto p = "decoder.block" + std::to_string(i);
    auto wire = [&](Attention& attn, const char* name) {
      for (auto [lin, proj] : {std::pair{&attn.q, "q"}, std::pair{&attn.v, "v"}}) {
        const auto prefix = p + "." + name + "." + proj;
        lin->lora = LoraDelta{slot(prefix + ".lora_a"), slot(prefix + ".lora_b"), alpha};
      }
    };
    if (targets != LoraTargets::cross_only) wire(dec_blocks_[i].self_attn, "self_attn");
    if (targets != LoraTargets::self_only) wire(dec_blocks_[i].cross_attn, "cross_attn");
  }
}

CaptionModel CaptionModel::clone() const {
  CaptionModel out(config_);
  const auto& a = attachments_;
  out.attach_projection(a.projection, a.projection_zero_init, 0);
  if (evp_) out.attach_evp(evp_->feature, a.evp_bottleneck, 0);
  if (a.houlsby_bottleneck) out.attach_houlsby(a.houlsby_bottleneck, 0);
  if (a.lora_rank) out.attach_lora(a.lora_rank, a.lora_alpha, a.lora_targets, 0);
  for (const auto& p : params_) {
    auto dst = out.slot(p.path).mutable_data();
    std::copy(p.tensor.data().begin(), p.tensor.data().end(), dst.begin());
  }
  return out;
}

VisualInput CaptionModel::prepare(const Tensor& image) const {
  const Shape expected{config_.in_channels, config_.image_size, config_.image_size};
  if (image.shape() != expected) {
    throw DimensionError("image " + shape_str(image.shape()) + " does not match model input " +
                         shape_str(expected));
  }
  VisualInput in;
  in.patches = patchify(image, config_.patch_size);
  if (evp_) in.feature_patches = patchify(features::extract(evp_->feature, image), config_.patch_size);
  return in;
}

Tensor CaptionModel::embed_patches(const Tensor& patches) const {
  if (patches.rank() != 2 || patches.dim(0) != config_.n_patches() ||
      patches.dim(1) != config_.patch_dim()) {
    throw DimensionError("patches " + shape_str(patches.shape()) + " do not match model");
  }
  auto x = patch_embed_.forward(patches);
  return ops::add(ops::concat_rows(cls_token_, x), enc_pos_);
}

Tensor CaptionModel::patchify_embed(const Tensor& image) const {
  return embed_patches(prepare(image).patches);
}

Tensor CaptionModel::encoder_forward(const Tensor& tokens, std::span<const Tensor> prompts) const {
  if (!prompts.empty() && prompts.size() != enc_blocks_.size()) {
    throw DimensionError("got " + std::to_string(prompts.size()) + " prompts for " +
                         std::to_string(enc_blocks_.size()) + " encoder blocks");
  }
  Tensor x = tokens;
  const Tensor cls_slot = prompts.empty() ? Tensor() : Tensor::zeros({1, config_.d_model});
  for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
    if (!prompts.empty()) x = ops::add(x, ops::concat_rows(cls_slot, prompts[i]));
    x = encoder_block_forward(enc_blocks_[i], x, config_.n_heads, config_.ln_eps);
  }
  if (enc_norm_) x = enc_norm_->forward(x, config_.ln_eps);
  return x;
}

Tensor CaptionModel::encode_backbone(const VisualInput& input) const {
  auto tokens = embed_patches(input.patches);
  if (!evp_) return encoder_forward(tokens);
  if (!input.feature_patches.defined())
    throw DimensionError("EVP model needs feature patches; build the input with prepare()");
  auto prompts = evp_prompts(input.feature_patches, *evp_, enc_blocks_.size());
  return encoder_forward(tokens, prompts);
}

Tensor CaptionModel::project_visual(const Tensor& tokens) const {
  switch (projection_.kind) {
    case ProjectionKind::none: return tokens;
    case ProjectionKind::linear: return projection_.linear.forward(tokens);
    case ProjectionKind::vit_block:
      return encoder_block_forward(*projection_.block, tokens, config_.n_heads, config_.ln_eps);
  }
  return tokens;
}

Tensor CaptionModel::encode(const VisualInput& input) const {
  return project_visual(encode_backbone(input));
}

Tensor CaptionModel::decoder_forward(std::span<const std::vector<int>> captions,
                                     const Tensor& visual) const {
  if (captions.empty()) throw DimensionError("decoder needs at least one caption");
  if (visual.rank() != 2 || visual.dim(1) != config_.d_model) {
    throw DimensionError("visual tokens " + shape_str(visual.shape()) + " do not have width " +
                         std::to_string(config_.d_model));
  }
  std::size_t len = 0;
  for (const auto& c : captions) len = std::max(len, c.size());
  if (len == 0) throw DimensionError("decoder got an empty caption");
  if (len > config_.max_caption_len) {
    throw std::length_error("caption of " + std::to_string(len) + " tokens exceeds " +
                            std::to_string(config_.max_caption_len));
  }
  const std::size_t blocks = captions.size();
  std::vector<int> ids(blocks * len, tokens::kPad);
  std::vector<int> pos(blocks * len);
  for (std::size_t b = 0; b < blocks; ++b) {
    std::copy(captions[b].begin(), captions[b].end(), ids.begin() + b * len);
    for (std::size_t t = 0; t < len; ++t) pos[b * len + t] = static_cast<int>(t);
  }
  const double eps = config_.ln_eps;
  const std::size_t heads = config_.n_heads;
  Tensor x = ops::add(ops::embedding(tok_embed_, ids), ops::embedding(dec_pos_, pos));
  for (const auto& blk : dec_blocks_) {
    auto h = blk.norm1.forward(x, eps);
    x = ops::add(x, maybe_adapt(blk.adapter_self,
                                attention_forward(blk.self_attn, h, h, heads, true, blocks, false)));
    h = blk.norm2.forward(x, eps);
    x = ops::add(x, maybe_adapt(blk.adapter_cross, attention_forward(blk.cross_attn, h, visual,
                                                                     heads, false, blocks, true)));
    h = blk.norm3.forward(x, eps);
    x = ops::add(x, maybe_adapt(blk.adapter_mlp, mlp_forward(blk.mlp, h)));
  }
  x = dec_norm_.forward(x, eps);
  if (config_.tie_embeddings) return ops::add_row_bias(ops::matmul_bt(x, tok_embed_), head_bias_);
  return ops::linear(x, head_weight_, head_bias_);
}

Tensor CaptionModel::decoder_forward(std::span<const int> caption, const Tensor& visual) const {
  std::vector<std::vector<int>> one{std::vector<int>(caption.begin(), caption.end())};
  return decoder_forward(one, visual);
}

void check_caption_format(std::span<const int> caption) {
  std::size_t end = caption.size();
  while (end > 0 && caption[end - 1] == tokens::kPad) --end;
  if (end < 2 || caption[0] != tokens::kBos || caption[end - 1] != tokens::kEos) {
    throw FormatError("caption must be BOS ... EOS (optionally followed by PAD), got " +
                      std::to_string(caption.size()) + " tokens");
  }
}

Tensor caption_group_loss(const CaptionModel& model, const Tensor& visual,
                          std::span<const std::vector<int>> captions) {
  std::size_t len = 0;
  for (const auto& c : captions) {
    check_caption_format(c);
    len = std::max(len, c.size());
  }
  std::vector<std::vector<int>> inputs;
  inputs.reserve(captions.size());
  std::vector<int> targets(captions.size() * (len - 1), tokens::kPad);
  for (std::size_t b = 0; b < captions.size(); ++b) {
    const auto& c = captions[b];
    inputs.emplace_back(c.begin(), c.end() - 1);
    inputs.back().resize(len - 1, tokens::kPad);
    std::copy(c.begin() + 1, c.end(), targets.begin() + b * (len - 1));
  }
  auto logits = model.decoder_forward(inputs, visual);
  return ops::cross_entropy(logits, targets, tokens::kPad);
}

Tensor caption_loss(const CaptionModel& model, const Tensor& image, std::span<const int> caption) {
  check_caption_format(caption);
  auto visual = model.encode(model.prepare(image));
  std::vector<std::vector<int>> one{std::vector<int>(caption.begin(), caption.end())};
  return caption_group_loss(model, visual, one);
}

std::vector<int> generate_from_visual(const CaptionModel& model, const Tensor& visual,
                                      std::size_t max_len) {
  if (max_len == 0 || max_len > model.config().max_caption_len) {
    throw std::invalid_argument("max_len " + std::to_string(max_len) + " outside [1, " +
                                std::to_string(model.config().max_caption_len) + "]");
  }
  NoGradGuard no_grad;
  std::vector<int> seq{tokens::kBos};
  const std::size_t vocab = model.config().vocab_size;
  while (seq.size() < max_len) {
    auto logits = model.decoder_forward(std::span<const int>(seq), visual);
    auto row = logits.data().subspan((seq.size() - 1) * vocab, vocab);
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (row[j] > row[best]) best = j;
    seq.push_back(static_cast<int>(best));
    if (seq.back() == tokens::kEos) break;
  }
  return seq;
}

std::vector<int> generate(const CaptionModel& model, const Tensor& image, std::size_t max_len) {
  NoGradGuard no_grad;
  return generate_from_visual(model, model.encode(model.prepare(image)), max_len);
}

}  // namespace peftcap
