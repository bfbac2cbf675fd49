#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "peftcap/features.hpp"
#include "peftcap/tensor.hpp"

// Building blocks shared by the caption model and the tuning methods. All
// weights use the row-vector convention: y = x·W + b with W stored [in × out].
namespace peftcap {

struct LoraDelta {
  Tensor a;  // [in × r], small gaussian init
  Tensor b;  // [r × out], zero init
  double alpha = 1.0;

  std::size_t rank() const { return a.dim(1); }
  double scaling() const { return alpha / static_cast<double>(rank()); }
};

struct Linear {
  Tensor weight;
  Tensor bias;
  std::optional<LoraDelta> lora;

  Tensor forward(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor weight;
  Tensor bias;

  Tensor forward(const Tensor& x, double eps) const;
};

/// Bottleneck adapter with skip connection: h + up(GELU(down(h))).
struct HoulsbyAdapter {
  Linear down;  // d × m
  Linear up;    // m × d, zero init so the adapter starts as the identity
};

Tensor houlsby_forward(const Tensor& h, const HoulsbyAdapter& adapter);

/// x·W + b + (α/r)·(x·A)·B. Only A and B are meant to be trainable.
Tensor lora_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                    const LoraDelta& delta);

/// EVP prompt generator: one feature embedding, a down map per encoder block,
/// and a single up map shared by every block.
struct EvpAdapterBank {
  features::FeatureSpec feature;
  Linear feature_embed;  // patch²·c_feature × d
  std::vector<Linear> down;  // per block, d × r
  Linear up;                 // r × d, shared

  std::size_t channels() const { return features::channels(feature.kind); }
};

/// prompt_i = up(GELU(down_i(feature_embed(feature_patches)))) for each of the
/// first `n_blocks` blocks. feature_patches is [N × patch²·c_feature].
std::vector<Tensor> evp_prompts(const Tensor& feature_patches, const EvpAdapterBank& bank,
                                std::size_t n_blocks);

}  // namespace peftcap
