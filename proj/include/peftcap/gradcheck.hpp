#pragma once

#include <cstddef>
#include <functional>

#include "peftcap/tensor.hpp"

namespace peftcap {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares backward() against central differences of `f` at `x`.
/// Returns max_i |g_ad − g_fd| / max(1, |g_ad|, |g_fd|).
/// Throws RankError when f is not scalar-valued; eps must lie in [1e-7, 1e-3].
double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps);

/// Same comparison against an existing leaf that `loss` reads (a model
/// parameter, typically). The leaf is perturbed in place and restored.
/// At most `max_components` evenly spaced entries are probed (0 = all).
double finite_diff_check_leaf(const std::function<Tensor()>& loss, Tensor leaf, double eps,
                              std::size_t max_components = 0);

}  // namespace peftcap
