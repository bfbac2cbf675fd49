#pragma once

#include <cstring>
#include <vector>

#include "peftcap/model.hpp"
#include "peftcap/rng.hpp"
#include "peftcap/tensor.hpp"

namespace testing {

inline peftcap::Tensor random_tensor(peftcap::Rng& rng, peftcap::Shape shape, double lo = -1.0,
                                     double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(peftcap::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return peftcap::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Small enough for gradient checks over whole models.
inline peftcap::ModelConfig tiny_config(std::size_t vocab = 20) {
  peftcap::ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.vocab_size = vocab;
  c.max_caption_len = 8;
  c.seed = 3;
  return c;
}

inline peftcap::Tensor random_image(peftcap::Rng& rng, std::size_t size) {
  return random_tensor(rng, {3, size, size}, 0.0, 1.0);
}

// BOS, len random body tokens, EOS.
inline std::vector<int> random_caption(peftcap::Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<int> c{1};
  for (std::size_t i = 0; i < len; ++i) c.push_back(4 + static_cast<int>(rng.below(vocab - 4)));
  c.push_back(2);
  return c;
}

inline bool bitwise_equal(const peftcap::Tensor& a, const peftcap::Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace testing
