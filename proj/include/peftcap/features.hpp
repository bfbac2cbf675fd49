#pragma once

#include <complex>
#include <cstddef>
#include <string>
#include <vector>

#include "peftcap/tensor.hpp"

// Handcrafted image features consumed by the EVP adapters. All of these are
// fixed preprocessing: they read tensor data and return fresh leaves, with no
// tape recording.
namespace peftcap::features {

enum class FeatureKind { image, grayscale, fft_highfreq };

struct FeatureSpec {
  FeatureKind kind = FeatureKind::image;
  double mask_ratio = 0.25;  // τ, fft only
  bool keep_high = true;     // false keeps the masked low band instead
};

std::size_t channels(FeatureKind kind);
std::string to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& name);

// Rec.601 luminance. [3×H×W] -> [1×H×W].
Tensor grayscale(const Tensor& image);

struct Spectrum {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::complex<double>> bins;  // row-major
};

bool is_power_of_two(std::size_t n);

// Unnormalized forward DFT of a real [H×W] channel (row-column radix-2).
// H and W must be powers of two.
Spectrum fft2d(const Tensor& channel);
Spectrum fft2d(const Spectrum& signal);
// Inverse with the 1/(HW) normalization, so ifft2d(fft2d(x)) == x.
Spectrum ifft2d(const Spectrum& spectrum);

// Moves the DC bin to (H/2, W/2) and back.
Spectrum fftshift(const Spectrum& s);
Spectrum ifftshift(const Spectrum& s);

/// Per channel: FFT, centre the spectrum, zero a centred box spanning a
/// fraction τ of each axis (the DC bin is always inside it), undo the shift,
/// inverse FFT, keep the real part. With keep_high = false the complement is
/// zeroed instead. τ must lie in (0, 1).
Tensor high_freq_extract(const Tensor& image, double tau, bool keep_high = true);

Tensor extract(const FeatureSpec& spec, const Tensor& image);

// Box-filter downsample of [c×H×W] to [c×size×size]; H must be a multiple of size.
Tensor resize_box(const Tensor& image, std::size_t size);

}  // namespace peftcap::features
