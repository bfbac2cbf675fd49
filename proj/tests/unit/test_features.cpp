#include <cmath>
#include <complex>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "peftcap/errors.hpp"
#include "peftcap/features.hpp"

using namespace peftcap;
using namespace peftcap::features;
using testing::random_tensor;

namespace {

// Direct O(N²M²) DFT, the reference for the radix-2 path.
std::vector<std::complex<double>> naive_dft(const Tensor& x) {
  const std::size_t h = x.dim(0), w = x.dim(1);
  std::vector<std::complex<double>> out(h * w);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      std::complex<double> acc = 0;
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          const double angle = -2 * std::numbers::pi * (double(u * r) / h + double(v * c) / w);
          acc += x[r * w + c] * std::polar(1.0, angle);
        }
      out[u * w + v] = acc;
    }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("grayscale examples") {
  auto px = [](double r, double g, double b) {
    return grayscale(Tensor::from_data({3, 1, 1}, {r, g, b}))[0];
  };
  CHECK(px(1, 1, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(px(1, 0, 0) == doctest::Approx(0.299).epsilon(1e-15));
  for (double g : {0.0, 0.25, 0.7, 1.0}) CHECK(px(g, g, g) == doctest::Approx(g).epsilon(1e-14));
  CHECK_THROWS_AS(grayscale(Tensor::zeros({2, 4, 4})), DimensionError);
}

TEST_CASE("grayscale stays inside [0, 1]") {
  Rng rng(1);
  auto g = grayscale(random_tensor(rng, {3, 16, 16}, 0, 1));
  CHECK(g.shape() == Shape{1, 16, 16});
  for (double v : g.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("fft matches the direct DFT") {
  Rng rng(2);
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {2, 8}, {8, 8}, {4, 16}}) {
    auto x = random_tensor(rng, {h, w});
    auto fast = fft2d(x);
    auto slow = naive_dft(x);
    for (std::size_t i = 0; i < h * w; ++i) CHECK(std::abs(fast.bins[i] - slow[i]) < 1e-10);
  }
}

TEST_CASE("fft examples") {
  auto constant = Tensor::full({8, 8}, 0.3);
  auto s = fft2d(constant);
  CHECK(std::abs(s.bins[0] - std::complex<double>(0.3 * 64, 0)) < 1e-12);
  for (std::size_t i = 1; i < 64; ++i) CHECK(std::abs(s.bins[i]) < 1e-12);

  auto impulse = Tensor::zeros({4, 8});
  impulse.mutable_data()[0] = 1.0;
  for (const auto& b : fft2d(impulse).bins) CHECK(std::abs(b - std::complex<double>(1, 0)) < 1e-15);

  CHECK_THROWS_AS(fft2d(Tensor::zeros({6, 8})), DimensionError);
  CHECK_THROWS_AS(fft2d(Tensor::zeros({8, 12})), DimensionError);
}

TEST_CASE("fft round trip up to 64x64") {
  Rng rng(3);
  for (std::size_t n : {2u, 4u, 8u, 16u, 32u, 64u}) {
    auto x = random_tensor(rng, {n, n});
    auto back = ifft2d(fft2d(x));
    double worst = 0;
    for (std::size_t i = 0; i < n * n; ++i) worst = std::max(worst, std::abs(back.bins[i] - x[i]));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("parseval on 32x32") {
  Rng rng(4);
  auto x = random_tensor(rng, {32, 32});
  double space = 0, freq = 0;
  for (double v : x.data()) space += v * v;
  for (const auto& b : fft2d(x).bins) freq += std::norm(b);
  CHECK(std::abs(space - freq / 1024.0) < 1e-9);
}

TEST_CASE("fftshift is undone by ifftshift") {
  Rng rng(5);
  auto s = fft2d(random_tensor(rng, {8, 16}));
  auto shifted = fftshift(s);
  CHECK(std::abs(shifted.bins[4 * 16 + 8] - s.bins[0]) == 0.0);
  auto back = ifftshift(shifted);
  for (std::size_t i = 0; i < s.bins.size(); ++i) CHECK(back.bins[i] == s.bins[i]);
}

TEST_CASE("high-frequency extraction examples") {
  auto constant = Tensor::full({3, 16, 16}, 0.6);
  for (double tau : {0.05, 0.25, 0.9}) {
    auto out = high_freq_extract(constant, tau);
    for (double v : out.data()) CHECK(std::abs(v) < 1e-9);
  }

  Rng rng(6);
  auto img = random_tensor(rng, {2, 16, 16}, 0, 1);
  auto tiny = high_freq_extract(img, 0.01);  // only the DC bin falls in the box
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < 256; ++i) mean += img[c * 256 + i];
    mean /= 256;
    for (std::size_t i = 0; i < 256; ++i)
      CHECK(std::abs(tiny[c * 256 + i] - (img[c * 256 + i] - mean)) < 1e-9);
  }

  auto once = high_freq_extract(img, 0.25);
  auto twice = high_freq_extract(once, 0.25);
  CHECK(max_abs_diff(once, twice) < 1e-8);

  CHECK_THROWS(high_freq_extract(img, 0.0));
  CHECK_THROWS(high_freq_extract(img, 1.0));
}

TEST_CASE("high-frequency output has zero channel means") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto out = high_freq_extract(random_tensor(rng, {3, 32, 32}, 0, 1), 0.25);
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0;
      for (std::size_t i = 0; i < 1024; ++i) mean += out[c * 1024 + i];
      CHECK(std::abs(mean / 1024) < 1e-8);
    }
  }
}

TEST_CASE("low and high bands add back to the image") {
  Rng rng(8);
  auto img = random_tensor(rng, {1, 16, 16}, 0, 1);
  auto high = high_freq_extract(img, 0.3, true);
  auto low = high_freq_extract(img, 0.3, false);
  for (std::size_t i = 0; i < 256; ++i) CHECK(std::abs(high[i] + low[i] - img[i]) < 1e-9);
}

TEST_CASE("extract dispatches on the feature kind") {
  Rng rng(9);
  auto img = random_tensor(rng, {3, 8, 8}, 0, 1);
  CHECK(testing::bitwise_equal(extract({FeatureKind::image}, img), img));
  CHECK(extract({FeatureKind::grayscale}, img).shape() == Shape{1, 8, 8});
  auto f = extract({FeatureKind::fft_highfreq, 0.25, true}, img);
  CHECK(max_abs_diff(f, high_freq_extract(img, 0.25)) == 0.0);
  CHECK(channels(FeatureKind::grayscale) == 1);
  CHECK(channels(FeatureKind::fft_highfreq) == 3);
  CHECK(feature_kind_from_string(to_string(FeatureKind::fft_highfreq)) == FeatureKind::fft_highfreq);
  CHECK_THROWS(feature_kind_from_string("wavelet"));
}

TEST_CASE("box resize averages blocks") {
  auto img = Tensor::from_data({1, 2, 2}, {0.0, 1.0, 0.5, 0.5});
  auto r = resize_box(img, 1);
  CHECK(r[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(resize_box(Tensor::zeros({3, 6, 6}), 4), DimensionError);
}
