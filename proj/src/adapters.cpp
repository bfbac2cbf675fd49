#include "peftcap/adapters.hpp"

#include "peftcap/errors.hpp"
#include "peftcap/ops.hpp"

namespace peftcap {

Tensor Linear::forward(const Tensor& x) const {
  if (lora) return lora_forward(x, weight, bias, *lora);
  return ops::linear(x, weight, bias);
}

Tensor LayerNormParams::forward(const Tensor& x, double eps) const {
  return ops::layer_norm(x, weight, bias, eps);
}

Tensor houlsby_forward(const Tensor& h, const HoulsbyAdapter& adapter) {
  const std::size_t d = adapter.down.weight.dim(0);
  if (h.rank() != 2 || h.dim(1) != d || adapter.up.weight.dim(1) != d) {
    throw DimensionError("houlsby adapter of width " + std::to_string(d) +
                         " applied to " + shape_str(h.shape()));
  }
  auto inner = ops::gelu(adapter.down.forward(h));
  return ops::add(h, adapter.up.forward(inner));
}

Tensor lora_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                    const LoraDelta& delta) {
  if (delta.a.dim(0) != weight.dim(0) || delta.b.dim(1) != weight.dim(1) ||
      delta.a.dim(1) != delta.b.dim(0)) {
    throw DimensionError("LoRA factors " + shape_str(delta.a.shape()) + " / " +
                         shape_str(delta.b.shape()) + " do not fit weight " +
                         shape_str(weight.shape()));
  }
  auto base = ops::linear(x, weight, bias);
  auto low = ops::matmul(ops::matmul(x, delta.a), delta.b);
  return ops::add(base, ops::scale(low, delta.scaling()));
}

std::vector<Tensor> evp_prompts(const Tensor& feature_patches, const EvpAdapterBank& bank,
                                std::size_t n_blocks) {
  if (feature_patches.rank() != 2 || feature_patches.dim(1) != bank.feature_embed.weight.dim(0)) {
    throw DimensionError("EVP feature patches " + shape_str(feature_patches.shape()) +
                         " do not match feature embedding " +
                         shape_str(bank.feature_embed.weight.shape()) + " (channel mismatch)");
  }
  if (n_blocks > bank.down.size()) {
    throw DimensionError("EVP bank has " + std::to_string(bank.down.size()) +
                         " down maps, asked for " + std::to_string(n_blocks));
  }
  auto embedded = bank.feature_embed.forward(feature_patches);
  std::vector<Tensor> prompts;
  prompts.reserve(n_blocks);
  for (std::size_t i = 0; i < n_blocks; ++i)
    prompts.push_back(bank.up.forward(ops::gelu(bank.down[i].forward(embedded))));
  return prompts;
}

}  // namespace peftcap
