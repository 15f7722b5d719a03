#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "fpcd/error.hpp"
#include "fpcd/tensor.hpp"

namespace fpcd::spectral {

using cd = std::complex<double>;

inline bool is_pow2(int64_t n) { return n >= 2 && (n & (n - 1)) == 0; }

// One-sided bin count for a length-T real signal.
inline int64_t onesided_bins(int64_t t) { return t / 2 + 1; }

inline std::vector<cd> dft_naive(const double* x, int64_t n) {
  std::vector<cd> out(static_cast<size_t>(n));
  // Twiddle table over k*p mod n; avoids per-term trig calls and keeps the
  // argument reduction exact.
  const double w = -2.0 * std::numbers::pi / static_cast<double>(n);
  std::vector<double> ct(static_cast<size_t>(n)), st(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) {
    double a = w * static_cast<double>(j);
    ct[static_cast<size_t>(j)] = std::cos(a);
    st[static_cast<size_t>(j)] = std::sin(a);
  }
  for (int64_t k = 0; k < n; ++k) {
    double re = 0.0, im = 0.0;
    for (int64_t p = 0; p < n; ++p) {
      int64_t j = (k * p) % n;
      re += x[p] * ct[static_cast<size_t>(j)];
      im += x[p] * st[static_cast<size_t>(j)];
    }
    out[static_cast<size_t>(k)] = {re, im};
  }
  return out;
}

// Iterative radix-2 FFT, in place. n must be a power of two.
inline void fft_radix2(std::vector<cd>& a) {
  const size_t n = a.size();
  if (!is_pow2(static_cast<int64_t>(n))) throw ContractError("fft_radix2: length not a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    cd wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      cd w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        cd u = a[i + j];
        cd v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Full complex DFT of a real sequence; FFT path when the length is a power of two.
inline std::vector<cd> dft(const double* x, int64_t n) {
  if (n < 2) throw ContractError("dft: need length >= 2");
  if (is_pow2(n)) {
    std::vector<cd> a(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) a[static_cast<size_t>(i)] = {x[i], 0.0};
    fft_radix2(a);
    return a;
  }
  return dft_naive(x, n);
}

inline std::vector<cd> dft(const std::vector<double>& x) {
  return dft(x.data(), static_cast<int64_t>(x.size()));
}

// One-sided spectrum k = 0..floor(T/2); optionally exposes re/im for backward.
inline void onesided(const double* x, int64_t n, double* mag, double* re = nullptr,
                     double* im = nullptr) {
  auto full = dft(x, n);
  const int64_t kk = onesided_bins(n);
  for (int64_t k = 0; k < kk; ++k) {
    cd v = full[static_cast<size_t>(k)];
    mag[k] = std::abs(v);
    if (re) re[k] = v.real();
    if (im) im[k] = v.imag();
  }
}

// One-sided temporal DFT magnitudes of a stage feature map.
struct FeatureSpectrum {
  int64_t bands = 0;          // K = floor(T/2)+1
  Tensor values;              // [K,H',W',C], magnitudes >= 0
  int stage = 0;
};

struct KernelSpectrum {
  int kernel_id = 0;
  int64_t length = 0;                 // flattened kernel size L
  std::vector<double> magnitudes;     // floor(L/2)+1 values
};

// Complex temporal DFT per spatial-channel location. Layout [T][H*W*C] -> [T][H*W*C].
inline void temporal_dft(const Tensor& features, std::vector<double>& out_re,
                         std::vector<double>& out_im) {
  if (features.ndim() != 4) throw DimError("temporal_dft: expected [T,H,W,C]");
  const int64_t t = features.dims()[0];
  if (t < 2) throw ContractError("temporal_dft: T < 2");
  const int64_t loc = features.size() / t;
  out_re.assign(static_cast<size_t>(features.size()), 0.0);
  out_im.assign(static_cast<size_t>(features.size()), 0.0);
  std::vector<double> seq(static_cast<size_t>(t));
  for (int64_t l = 0; l < loc; ++l) {
    for (int64_t p = 0; p < t; ++p) seq[static_cast<size_t>(p)] = features[p * loc + l];
    auto full = dft(seq);
    for (int64_t k = 0; k < t; ++k) {
      out_re[static_cast<size_t>(k * loc + l)] = full[static_cast<size_t>(k)].real();
      out_im[static_cast<size_t>(k * loc + l)] = full[static_cast<size_t>(k)].imag();
    }
  }
}

inline FeatureSpectrum magnitude_spectrum(const Tensor& features, int stage = 0) {
  if (features.ndim() != 4) throw DimError("magnitude_spectrum: expected [T,H,W,C]");
  const int64_t t = features.dims()[0];
  if (t < 2) throw ContractError("magnitude_spectrum: T < 2");
  const int64_t kk = onesided_bins(t);
  const int64_t loc = features.size() / t;
  FeatureSpectrum fs;
  fs.bands = kk;
  fs.stage = stage;
  fs.values = Tensor({kk, features.dims()[1], features.dims()[2], features.dims()[3]});
  std::vector<double> seq(static_cast<size_t>(t)), mag(static_cast<size_t>(kk));
  for (int64_t l = 0; l < loc; ++l) {
    for (int64_t p = 0; p < t; ++p) seq[static_cast<size_t>(p)] = features[p * loc + l];
    onesided(seq.data(), t, mag.data());
    for (int64_t k = 0; k < kk; ++k) fs.values[k * loc + l] = mag[static_cast<size_t>(k)];
  }
  return fs;
}

// Number of low bins: [0, ceil(K/2)) low, the rest high.
inline int64_t low_bins(int64_t k) { return (k + 1) / 2; }

inline std::pair<FeatureSpectrum, FeatureSpectrum> band_split(const FeatureSpectrum& fs) {
  if (fs.bands < 2) throw ContractError("band_split: K < 2");
  const int64_t kl = low_bins(fs.bands);
  const int64_t loc = fs.values.size() / fs.bands;
  FeatureSpectrum lo, hi;
  lo.bands = kl;
  hi.bands = fs.bands - kl;
  lo.stage = hi.stage = fs.stage;
  Dims d = fs.values.dims();
  Dims dl = d, dh = d;
  dl[0] = kl;
  dh[0] = fs.bands - kl;
  lo.values = Tensor(dl);
  hi.values = Tensor(dh);
  for (int64_t k = 0; k < kl; ++k)
    for (int64_t l = 0; l < loc; ++l) lo.values[k * loc + l] = fs.values[k * loc + l];
  for (int64_t k = kl; k < fs.bands; ++k)
    for (int64_t l = 0; l < loc; ++l) hi.values[(k - kl) * loc + l] = fs.values[k * loc + l];
  return {std::move(lo), std::move(hi)};
}

// One-sided DFT magnitudes of the row-major flattened kernel weights.
inline KernelSpectrum kernel_spectrum(const double* w, int64_t length, int kernel_id = 0) {
  if (length < 2) throw ContractError("kernel_spectrum: flattened length < 2");
  KernelSpectrum ks;
  ks.kernel_id = kernel_id;
  ks.length = length;
  ks.magnitudes.resize(static_cast<size_t>(onesided_bins(length)));
  onesided(w, length, ks.magnitudes.data());
  return ks;
}

inline KernelSpectrum kernel_spectrum(const std::vector<double>& w, int kernel_id = 0) {
  return kernel_spectrum(w.data(), static_cast<int64_t>(w.size()), kernel_id);
}

// Inverse DFT of a real sequence keeping only the low or the high one-sided band
// (conjugate-symmetric bins kept together), for Fig-style visualizations.
inline std::vector<double> band_reconstruct(const std::vector<double>& x, bool keep_low) {
  const int64_t n = static_cast<int64_t>(x.size());
  auto full = dft(x);
  const int64_t kk = onesided_bins(n);
  const int64_t kl = low_bins(kk);
  for (int64_t k = 0; k < n; ++k) {
    int64_t folded = std::min(k, n - k);          // matching one-sided bin
    bool low = folded < kl;
    if (low != keep_low) full[static_cast<size_t>(k)] = 0.0;
  }
  std::vector<double> out(static_cast<size_t>(n));
  const double w = 2.0 * std::numbers::pi / static_cast<double>(n);
  for (int64_t p = 0; p < n; ++p) {
    cd acc = 0.0;
    for (int64_t k = 0; k < n; ++k)
      acc += full[static_cast<size_t>(k)] *
             cd(std::cos(w * static_cast<double>(k * p)), std::sin(w * static_cast<double>(k * p)));
    out[static_cast<size_t>(p)] = acc.real() / static_cast<double>(n);
  }
  return out;
}

}  // namespace fpcd::spectral
