#pragma once

#include <span>
#include <vector>

#include "peftcap/tensor.hpp"

// Differentiable primitives. Binary elementwise ops accept equal shapes or a
// rank-0 scalar against any tensor; nothing else broadcasts. Every reduction
// runs in fixed row-major order so results are bit-reproducible.
namespace peftcap::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ, used by the tied output head.
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// x[n×in] · w[in×out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
// x[n×m] + bias[m] on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// Exact erf form: x·Φ(x).
Tensor gelu(const Tensor& x);

enum class ElementwiseKind { add, sub, mul, scale, relu, exp, log };

// Dispatcher over the elementwise family; `factor` is only read by scale.
Tensor elementwise(ElementwiseKind kind, std::span<const Tensor> inputs,
                   double factor = 1.0);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);

// Normalizes over the last dimension, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

/// Mean negative log-softmax over rows whose target differs from
/// `ignore_index`. Throws NumericError when every row is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int ignore_index);

// Row gather: out[i] = table[ids[i]].
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor concat_rows(const Tensor& top, const Tensor& bottom);

/// Scaled dot-product multi-head attention over `blocks` independent
/// sequences stacked along rows. q is [blocks·Tq × d]; k and v are
/// [blocks·S × d], or one [S × d] block read by every query block when
/// `shared_kv` is set. `causal` requires Tq == S and masks keys after the
/// query position.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, bool causal, std::size_t blocks = 1,
                 bool shared_kv = false);

}  // namespace peftcap::ops
