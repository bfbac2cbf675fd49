#include "peftcap/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "peftcap/errors.hpp"

namespace peftcap {

namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw std::invalid_argument("finite-difference eps must lie in [1e-7, 1e-3]");
  }
}

double scalar_value(const Tensor& y) {
  if (y.numel() != 1) {
    throw RankError("gradient check needs a scalar objective, got shape " +
                    shape_str(y.shape()));
  }
  return y.item();
}

}  // namespace

double finite_diff_check_leaf(const std::function<Tensor()>& loss, Tensor leaf, double eps,
                              std::size_t max_components) {
  check_eps(eps);
  const bool had_flag = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();

  Tensor y = loss();
  scalar_value(y);
  backward(y);
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::ranges::copy(leaf.grad(), analytic.begin());
  leaf.zero_grad();

  const std::size_t n = leaf.numel();
  const std::size_t stride =
      (max_components == 0 || n <= max_components) ? 1 : (n + max_components - 1) / max_components;

  double worst = 0.0;
  auto data = leaf.mutable_data();
  {
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = scalar_value(loss());
      data[i] = saved - eps;
      const double down = scalar_value(loss());
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  leaf.set_requires_grad(had_flag);
  return worst;
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps) {
  Tensor probe = Tensor::from_data(x.shape(), std::vector<double>(x.data().begin(), x.data().end()),
                                   true);
  return finite_diff_check_leaf([&] { return f(probe); }, probe, eps);
}

}  // namespace peftcap
