#pragma once

// The two distillation objectives: feature spectrum distillation with a
// trainable 1x1-conv predictor, and parameter distribution distillation
// over spectral-energy histograms of conv kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fpcd/autodiff.hpp"
#include "fpcd/error.hpp"
#include "fpcd/rng.hpp"
#include "fpcd/spectral.hpp"
#include "fpcd/tensor.hpp"

namespace fpcd::distill {

using autodiff::Tape;
using autodiff::Var;

inline constexpr double kEps = 1e-8;

enum class BandMode { all, low, high };

inline BandMode band_mode_from_string(const std::string& s) {
  if (s == "all") return BandMode::all;
  if (s == "low") return BandMode::low;
  if (s == "high") return BandMode::high;
  throw ConfigError("unknown band mode: " + s);
}

// Per-stage 1x1 convolutions lifting student channels to teacher channels.
class Predictor {
 public:
  Predictor() = default;
  Predictor(const std::vector<int64_t>& student_widths, const std::vector<int64_t>& teacher_widths,
            uint64_t seed) {
    if (student_widths.size() != teacher_widths.size())
      throw ConfigError("predictor: stage count mismatch");
    auto eng = make_engine(seed, 0x70726564ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (size_t s = 0; s < student_widths.size(); ++s) {
      int64_t cs = student_widths[s], ct = teacher_widths[s];
      if (ct < cs) throw ConfigError("predictor: teacher narrower than student at stage " +
                                     std::to_string(s + 1));
      Tensor w({1, 1, cs, ct});
      // Near-zero init: early in training the channel map adapts to the
      // teacher spectra on its own (gradient w.r.t. student features passes
      // through these weights, so it starts negligible) and the student only
      // feels spectrum pressure once the map is meaningful.
      double std_ = 0.01 * std::sqrt(2.0 / static_cast<double>(cs));
      for (int64_t i = 0; i < w.size(); ++i) w[i] = std_ * normal(eng);
      weights_.push_back(std::move(w));
    }
  }

  size_t num_stages() const { return weights_.size(); }
  Tensor& weight(size_t stage) { return weights_[stage]; }
  const Tensor& weight(size_t stage) const { return weights_[stage]; }

  std::vector<std::pair<std::string, Tensor*>> parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (size_t s = 0; s < weights_.size(); ++s)
      out.push_back({"pred.stage" + std::to_string(s + 1), &weights_[s]});
    return out;
  }

  struct Bound {
    std::vector<Var> stage_w;
    std::vector<std::pair<Tensor*, Var>> leaves;
  };

  Bound bind(Tape& tape, bool requires_grad) {
    Bound b;
    for (auto& w : weights_) {
      Var v = tape.leaf(w, requires_grad);
      b.stage_w.push_back(v);
      b.leaves.push_back({&w, v});
    }
    return b;
  }

 private:
  std::vector<Tensor> weights_;
};

// Teacher magnitudes L1-normalized over the frequency axis per location.
inline Tensor teacher_distribution(const Tensor& mag, double eps = kEps) {
  if (mag.ndim() != 4) throw DimError("teacher_distribution: expected [K,H,W,C]");
  const int64_t k = mag.dims()[0];
  const int64_t loc = mag.size() / k;
  Tensor p = mag;
  for (int64_t l = 0; l < loc; ++l) {
    double s = eps;
    for (int64_t i = 0; i < k; ++i) s += mag[i * loc + l];
    for (int64_t i = 0; i < k; ++i) p[i * loc + l] = mag[i * loc + l] / s;
  }
  return p;
}

inline int64_t band_lo(BandMode mode, int64_t k) {
  return mode == BandMode::high ? spectral::low_bins(k) : 0;
}
inline int64_t band_hi(BandMode mode, int64_t k) {
  return mode == BandMode::low ? spectral::low_bins(k) : k;
}

// Cross-entropy between the teacher's normalized spectrum and the
// softmax-over-frequency of the predictor output, restricted to the selected
// band. Normalization always runs over all K bins, so the band contributions
// of low and high sum to the full loss.
inline Var spectrum_loss(Tape& tape, const Tensor& teacher_mag, Var student_feats,
                         Var predictor_w, BandMode mode) {
  Var smag = tape.magnitude_spectrum(student_feats);  // [K,H,W,Cs]
  const auto& sd = smag->value.dims();
  if (teacher_mag.ndim() != 4 || teacher_mag.dims()[0] != sd[0] ||
      teacher_mag.dims()[1] != sd[1] || teacher_mag.dims()[2] != sd[2])
    throw DimError("spectrum_loss: teacher/student spectrum geometry mismatch " +
                   dims_str(teacher_mag.dims()) + " vs " + dims_str(sd));
  const int64_t k = sd[0];
  if (k < 2) throw ContractError("spectrum_loss: K < 2");
  if (band_lo(mode, k) >= band_hi(mode, k)) throw ContractError("spectrum_loss: empty band");
  Var z = tape.conv2d(smag, predictor_w, 1, 0);  // [K,H,W,Ct]
  if (z->value.dims()[3] != teacher_mag.dims()[3])
    throw DimError("spectrum_loss: predictor output channels mismatch teacher");
  Var logp = tape.log_softmax_axis0(z);

  Tensor w = teacher_distribution(teacher_mag);
  const int64_t loc = w.size() / k;
  const int64_t lo = band_lo(mode, k), hi = band_hi(mode, k);
  for (int64_t i = 0; i < k; ++i)
    if (i < lo || i >= hi)
      for (int64_t l = 0; l < loc; ++l) w[i * loc + l] = 0.0;
  return tape.scale(tape.weighted_sum(logp, w), -1.0 / static_cast<double>(loc));
}

// Paper stage weights 1/8, 1/4, 1/2, 1 for stages 1..4.
inline double stage_weight(int stage) {
  if (stage < 1 || stage > 4) throw ContractError("stage_weight: stage out of range");
  static constexpr double w[4] = {0.125, 0.25, 0.5, 1.0};
  return w[stage - 1];
}

inline Var stage_spectrum_loss(Tape& tape, const std::vector<Tensor>& teacher_mags,
                               const std::vector<Var>& student_feats, int stage,
                               Predictor::Bound& pred, BandMode mode) {
  double w = stage_weight(stage);
  if (static_cast<size_t>(stage) > student_feats.size() ||
      static_cast<size_t>(stage) > teacher_mags.size())
    throw ContractError("stage_spectrum_loss: stage beyond available features");
  Var raw = spectrum_loss(tape, teacher_mags[static_cast<size_t>(stage - 1)],
                          student_feats[static_cast<size_t>(stage - 1)],
                          pred.stage_w[static_cast<size_t>(stage - 1)], mode);
  return tape.scale(raw, w);
}

// Uniform sample of student_count teacher kernel indices, no replacement,
// deterministic for a fixed seed. Equal counts select everything.
inline std::vector<int> sample_kernels(int teacher_count, int student_count, uint64_t seed) {
  if (teacher_count < student_count)
    throw ContractError("sample_kernels: teacher has " + std::to_string(teacher_count) +
                        " kernels but student needs " + std::to_string(student_count));
  std::vector<int> all(static_cast<size_t>(teacher_count));
  for (int i = 0; i < teacher_count; ++i) all[static_cast<size_t>(i)] = i;
  if (teacher_count == student_count) return all;
  std::vector<int> out;
  out.reserve(static_cast<size_t>(student_count));
  auto eng = make_engine(seed, 0x73616d70ULL);
  std::sample(all.begin(), all.end(), std::back_inserter(out),
              static_cast<size_t>(student_count), eng);
  return out;
}

// Normalized spectral-energy histogram over B frequency bins.
struct ParameterDistribution {
  int64_t bins = 0;
  std::vector<double> probs;
  std::string group;
};

inline ParameterDistribution parameter_distribution(const std::vector<std::vector<double>>& kernels,
                                                    int64_t bins, double eps = kEps) {
  if (bins < 2) throw ContractError("parameter_distribution: B < 2");
  if (kernels.empty()) throw ContractError("parameter_distribution: empty kernel list");
  ParameterDistribution pd;
  pd.bins = bins;
  pd.probs.assign(static_cast<size_t>(bins), 0.0);
  bool any = false;
  for (const auto& k : kernels) {
    const int64_t len = static_cast<int64_t>(k.size());
    if (len < 2) continue;
    any = true;
    auto ks = spectral::kernel_spectrum(k);
    const int64_t kl = static_cast<int64_t>(ks.magnitudes.size());
    for (int64_t i = 0; i < kl; ++i) {
      double m = ks.magnitudes[static_cast<size_t>(i)];
      pd.probs[static_cast<size_t>(autodiff::Tape::band_bin(i, kl, bins))] += m * m;
    }
  }
  if (!any) throw ContractError("parameter_distribution: no kernel with length >= 2");
  double s = 0.0;
  for (auto& p : pd.probs) {
    p += eps;
    s += p;
  }
  for (auto& p : pd.probs) p /= s;
  return pd;
}

// Spatial patches of a conv tensor [kh,kw,Ci,Co] for the selected output
// channels: one length kh*kw sequence per (input, output) channel pair,
// row-major over (kh,kw). Spectra are taken per patch; flattening across
// input channels would feed channel ordering, which carries no frequency
// content, into the transform.
inline std::vector<std::vector<double>> kernel_slices(const Tensor& kernel,
                                                      const std::vector<int>& out_channels) {
  if (kernel.ndim() != 4) throw DimError("kernel_slices: expected [kh,kw,Ci,Co]");
  const int64_t ci = kernel.dims()[2];
  const int64_t co = kernel.dims()[3];
  const int64_t plen = kernel.dims()[0] * kernel.dims()[1];
  std::vector<std::vector<double>> out;
  for (int ch : out_channels) {
    if (ch < 0 || ch >= co) throw IndexError("kernel_slices: channel out of range");
    for (int64_t c = 0; c < ci; ++c) {
      std::vector<double> seq(static_cast<size_t>(plen));
      for (int64_t p = 0; p < plen; ++p) seq[static_cast<size_t>(p)] = kernel[(p * ci + c) * co + ch];
      out.push_back(std::move(seq));
    }
  }
  return out;
}

inline std::vector<int> all_channels(const Tensor& kernel) {
  std::vector<int> v(static_cast<size_t>(kernel.dims()[3]));
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(i);
  return v;
}

// Differentiable PD of one conv layer on the tape.
inline Var parameter_distribution_var(Tape& tape, Var kernel, const std::vector<int>& out_channels,
                                      int64_t bins) {
  Var e = tape.kernel_band_energy(kernel, out_channels, bins);
  return tape.l1_normalize(tape.add_scalar(e, kEps));
}

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw DimError("kl_divergence: size mismatch");
  double s = 0.0;
  for (size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

// Teacher side of PDD, computable once per run: for each paired group,
// sample the teacher kernels down to the student count and take the log of
// the resulting parameter distribution.
inline std::vector<Tensor> pdd_teacher_log_pds(const std::vector<const Tensor*>& teacher_kernels,
                                               const std::vector<int64_t>& student_counts,
                                               int64_t bins, uint64_t seed) {
  if (teacher_kernels.empty() || teacher_kernels.size() != student_counts.size())
    throw ConfigError("pdd_teacher_log_pds: unpaired layer counts");
  std::vector<Tensor> out;
  for (size_t g = 0; g < teacher_kernels.size(); ++g) {
    const Tensor& tk = *teacher_kernels[g];
    int cs = static_cast<int>(student_counts[g]);
    int ct = static_cast<int>(tk.dims()[3]);
    if (ct < cs)
      throw ContractError("pdd: group " + std::to_string(g + 1) + " teacher has " +
                          std::to_string(ct) + " kernels < student " + std::to_string(cs));
    auto sel = sample_kernels(ct, cs, seed_combine(seed, g));
    auto pd_t = parameter_distribution(kernel_slices(tk, sel), bins);
    Tensor log_pd_t({bins});
    for (int64_t i = 0; i < bins; ++i) log_pd_t[i] = std::log(pd_t.probs[static_cast<size_t>(i)]);
    out.push_back(std::move(log_pd_t));
  }
  return out;
}

// Mean over paired layer groups of KL(PD_s || PD_t) against precomputed
// teacher log-distributions (constants on the tape).
inline Var pdd_loss_with_targets(Tape& tape, const std::vector<Var>& student_kernels,
                                 const std::vector<Tensor>& teacher_log_pds) {
  if (student_kernels.empty() || student_kernels.size() != teacher_log_pds.size())
    throw ConfigError("pdd_loss_with_targets: unpaired layer counts (" +
                      std::to_string(student_kernels.size()) + " student vs " +
                      std::to_string(teacher_log_pds.size()) + " teacher)");
  std::vector<Var> terms;
  for (size_t g = 0; g < student_kernels.size(); ++g) {
    Var sk = student_kernels[g];
    const Tensor& log_pd_t = teacher_log_pds[g];
    int64_t bins = log_pd_t.size();
    Var pd_s = parameter_distribution_var(tape, sk, all_channels(sk->value), bins);
    Var self = tape.sum_all(tape.mul(pd_s, tape.log(pd_s)));
    Var cross = tape.weighted_sum(pd_s, log_pd_t);
    terms.push_back(tape.sub(self, cross));
  }
  return tape.mean_of(terms);
}

// Mean over paired layer groups of KL(PD_s || PD_t); teacher kernels are
// sampled down to the student count and enter as constants.
inline Var pdd_loss(Tape& tape, const std::vector<Var>& student_kernels,
                    const std::vector<const Tensor*>& teacher_kernels, int64_t bins,
                    uint64_t seed) {
  if (student_kernels.empty() || student_kernels.size() != teacher_kernels.size())
    throw ConfigError("pdd_loss: unpaired layer counts (" +
                      std::to_string(student_kernels.size()) + " student vs " +
                      std::to_string(teacher_kernels.size()) + " teacher)");
  std::vector<int64_t> counts;
  for (Var sk : student_kernels) counts.push_back(sk->value.dims()[3]);
  auto targets = pdd_teacher_log_pds(teacher_kernels, counts, bins, seed);
  return pdd_loss_with_targets(tape, student_kernels, targets);
}

// Softened-logit KL baseline (temperature tau, conventional tau^2 scaling).
inline Var softened_kd_loss(Tape& tape, Var student_logits, const Tensor& teacher_logits,
                            double tau) {
  check_same_shape(student_logits->value, teacher_logits, "softened_kd_loss");
  const int64_t n = teacher_logits.dims()[0], c = teacher_logits.dims()[1];
  Tensor pt = teacher_logits;
  double entropy = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double mx = pt[i * c];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, pt[i * c + j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp((pt[i * c + j] - mx) / tau);
    for (int64_t j = 0; j < c; ++j) {
      double p = std::exp((pt[i * c + j] - mx) / tau) / s;
      pt[i * c + j] = p;
      if (p > 0.0) entropy -= p * std::log(p);
    }
  }
  Var logp = tape.log_softmax(tape.scale(student_logits, 1.0 / tau));
  Var ce = tape.scale(tape.weighted_sum(logp, pt), -1.0 / static_cast<double>(n));
  Var kl = tape.add_scalar(ce, -entropy / static_cast<double>(n));
  return tape.scale(kl, tau * tau);
}

}  // namespace fpcd::distill
