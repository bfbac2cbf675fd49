#include "peftcap/features.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "peftcap/errors.hpp"

namespace peftcap::features {

namespace {

using cd = std::complex<double>;

// In-place iterative radix-2 transform over `n` elements spaced `stride` apart.
void fft1d(cd* data, std::size_t n, std::size_t stride, bool inverse,
           const std::vector<cd>& twiddles) {
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i * stride], data[j * stride]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        cd w = twiddles[k * step];
        if (inverse) w = std::conj(w);
        cd& a = data[(start + k) * stride];
        cd& b = data[(start + k + len / 2) * stride];
        const cd t = w * b;
        b = a - t;
        a = a + t;
      }
    }
  }
}

std::vector<cd> twiddle_table(std::size_t n) {
  std::vector<cd> t(n / 2 + 1);
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    t[k] = cd(std::cos(angle), std::sin(angle));
  }
  return t;
}

void transform(Spectrum& s, bool inverse) {
  if (!is_power_of_two(s.rows) || !is_power_of_two(s.cols)) {
    throw DimensionError("fft2d: size " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                         " is not a power of two");
  }
  const auto row_tw = twiddle_table(s.cols);
  const auto col_tw = twiddle_table(s.rows);
  for (std::size_t r = 0; r < s.rows; ++r)
    fft1d(s.bins.data() + r * s.cols, s.cols, 1, inverse, row_tw);
  for (std::size_t c = 0; c < s.cols; ++c)
    fft1d(s.bins.data() + c, s.rows, s.cols, inverse, col_tw);
  if (inverse) {
    const double norm = 1.0 / static_cast<double>(s.rows * s.cols);
    for (auto& v : s.bins) v *= norm;
  }
}

Spectrum roll(const Spectrum& s, std::size_t dr, std::size_t dc) {
  Spectrum out{s.rows, s.cols, std::vector<cd>(s.bins.size())};
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < s.cols; ++c)
      out.bins[((r + dr) % s.rows) * s.cols + (c + dc) % s.cols] = s.bins[r * s.cols + c];
  return out;
}

void require_chw(const Tensor& image, const char* op) {
  if (image.rank() != 3) {
    throw DimensionError(std::string(op) + ": expected [c×H×W], got " + shape_str(image.shape()));
  }
}

}  // namespace

std::size_t channels(FeatureKind kind) { return kind == FeatureKind::grayscale ? 1 : 3; }

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::image: return "image";
    case FeatureKind::grayscale: return "grayscale";
    case FeatureKind::fft_highfreq: return "fft";
  }
  return "?";
}

FeatureKind feature_kind_from_string(const std::string& name) {
  if (name == "image") return FeatureKind::image;
  if (name == "grayscale" || name == "gs") return FeatureKind::grayscale;
  if (name == "fft" || name == "fft_highfreq") return FeatureKind::fft_highfreq;
  throw std::invalid_argument("unknown feature kind '" + name + "' (image|grayscale|fft)");
}

Tensor grayscale(const Tensor& image) {
  require_chw(image, "grayscale");
  if (image.dim(0) != 3) {
    throw DimensionError("grayscale: expected 3 channels, got " + std::to_string(image.dim(0)));
  }
  const std::size_t plane = image.dim(1) * image.dim(2);
  auto px = image.data();
  std::vector<double> out(plane);
  for (std::size_t i = 0; i < plane; ++i)
    out[i] = 0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i];
  return Tensor::from_data({1, image.dim(1), image.dim(2)}, std::move(out));
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

Spectrum fft2d(const Tensor& channel) {
  if (channel.rank() != 2) {
    throw DimensionError("fft2d: expected [H×W], got " + shape_str(channel.shape()));
  }
  Spectrum s{channel.dim(0), channel.dim(1), {}};
  s.bins.assign(channel.data().begin(), channel.data().end());
  transform(s, false);
  return s;
}

Spectrum fft2d(const Spectrum& signal) {
  Spectrum s = signal;
  transform(s, false);
  return s;
}

Spectrum ifft2d(const Spectrum& spectrum) {
  Spectrum s = spectrum;
  transform(s, true);
  return s;
}

Spectrum fftshift(const Spectrum& s) { return roll(s, s.rows / 2, s.cols / 2); }

Spectrum ifftshift(const Spectrum& s) {
  return roll(s, s.rows - s.rows / 2, s.cols - s.cols / 2);
}

Tensor high_freq_extract(const Tensor& image, double tau, bool keep_high) {
  require_chw(image, "high_freq_extract");
  if (!(tau > 0.0 && tau < 1.0)) {
    throw std::invalid_argument("high_freq_extract: mask ratio must lie in (0, 1)");
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto half_h = static_cast<std::size_t>(std::floor(tau * static_cast<double>(h) / 2.0));
  const auto half_w = static_cast<std::size_t>(std::floor(tau * static_cast<double>(w) / 2.0));
  auto px = image.data();
  std::vector<double> out(image.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    Spectrum s{h, w, {}};
    s.bins.assign(px.begin() + static_cast<std::ptrdiff_t>(ch * h * w),
                  px.begin() + static_cast<std::ptrdiff_t>((ch + 1) * h * w));
    transform(s, false);
    Spectrum centred = fftshift(s);
    for (std::size_t r = 0; r < h; ++r) {
      const bool row_in = (r >= h / 2 - half_h) && (r <= h / 2 + half_h);
      for (std::size_t col = 0; col < w; ++col) {
        const bool inside = row_in && (col >= w / 2 - half_w) && (col <= w / 2 + half_w);
        if (inside == keep_high) centred.bins[r * w + col] = 0.0;
      }
    }
    Spectrum back = ifftshift(centred);
    transform(back, true);
    for (std::size_t i = 0; i < h * w; ++i) out[ch * h * w + i] = back.bins[i].real();
  }
  return Tensor::from_data(image.shape(), std::move(out));
}

Tensor extract(const FeatureSpec& spec, const Tensor& image) {
  switch (spec.kind) {
    case FeatureKind::image: return image.detach();
    case FeatureKind::grayscale: return grayscale(image);
    case FeatureKind::fft_highfreq: return high_freq_extract(image, spec.mask_ratio, spec.keep_high);
  }
  return {};
}

Tensor resize_box(const Tensor& image, std::size_t size) {
  require_chw(image, "resize_box");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (size == 0 || h % size != 0 || w % size != 0 || h / size != w / size) {
    throw DimensionError("resize_box: cannot box-resize " + shape_str(image.shape()) + " to " +
                         std::to_string(size));
  }
  if (size == h) return image.detach();
  const std::size_t f = h / size;
  const double inv = 1.0 / static_cast<double>(f * f);
  auto px = image.data();
  std::vector<double> out(c * size * size, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < size; ++r)
      for (std::size_t col = 0; col < size; ++col) {
        double acc = 0.0;
        for (std::size_t dr = 0; dr < f; ++dr)
          for (std::size_t dc = 0; dc < f; ++dc)
            acc += px[(ch * h + r * f + dr) * w + col * f + dc];
        out[(ch * size + r) * size + col] = acc * inv;
      }
  return Tensor::from_data({c, size, size}, std::move(out));
}

}  // namespace peftcap::features
