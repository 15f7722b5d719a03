#pragma once

// Collaborative learning: teacher-confidence profiling, the per-sample
// binary gate, and the three-stage epoch weight schedule.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fpcd/autodiff.hpp"
#include "fpcd/error.hpp"
#include "fpcd/tensor.hpp"

namespace fpcd::collab {

using autodiff::Tape;
using autodiff::Var;

struct DistillSchedule {
  double gamma = 0.9;
  double alpha = 0.1;
  double lambda = 0.8;
  int n1 = 0;
  int n2 = 0;

  void validate() const {
    if (!(0.0 < alpha && alpha < gamma && gamma <= 1.0))
      throw ConfigError("schedule: need 0 < alpha < gamma <= 1");
    if (!(0.0 < lambda && lambda < 1.0)) throw ConfigError("schedule: need 0 < lambda < 1");
    if (!(n1 < n2)) throw ConfigError("schedule: need N1 < N2");
  }
};

// 1 if c_t > theta, 0 otherwise (boundary excluded).
inline int gate(double c_t, double theta) {
  if (c_t < 0.0 || c_t > 1.0 || theta < 0.0 || theta > 1.0)
    throw ContractError("gate: confidence and threshold must lie in [0,1]");
  return c_t > theta ? 1 : 0;
}

// Epoch weight factor: gamma while warm, exponential decay towards alpha,
// then the alpha floor.
inline double schedule_weight(int n, const DistillSchedule& s, double p_gate) {
  s.validate();
  if (n < 1) throw ContractError("schedule_weight: epoch < 1");
  double f;
  if (n <= s.n1)
    f = s.gamma;
  else if (n <= s.n2)
    f = std::pow(s.lambda, n - s.n1) + s.alpha;
  else
    f = s.alpha;
  return f * p_gate;
}

// Histogram of teacher confidence split by correctness, with the derived
// gating threshold theta.
struct ConfidenceProfile {
  int bins = 50;
  std::vector<int64_t> correct;
  std::vector<int64_t> incorrect;
  double theta = 1.0;

  double bin_center(int b) const { return (b + 0.5) / static_cast<double>(bins); }

  int64_t total(int b) const {
    return correct[static_cast<size_t>(b)] + incorrect[static_cast<size_t>(b)];
  }

  double posterior(int b) const {
    int64_t t = total(b);
    return t == 0 ? 0.0 : static_cast<double>(correct[static_cast<size_t>(b)]) /
                              static_cast<double>(t);
  }

  // theta = smallest populated bin center with correctness fraction >= 0.5;
  // 1.0 when none qualifies, 0.0 when every bin is populated and qualifies.
  void derive_theta() {
    theta = 1.0;
    bool all_qualify = true;
    bool found = false;
    for (int b = 0; b < bins; ++b) {
      if (total(b) == 0) {
        all_qualify = false;
        continue;
      }
      if (posterior(b) >= 0.5) {
        if (!found) {
          theta = bin_center(b);
          found = true;
        }
      } else {
        all_qualify = false;
      }
    }
    if (all_qualify && found) theta = 0.0;
  }

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write confidence profile: " + path);
    f << "bin_center,true_count,false_count,posterior\n";
    for (int b = 0; b < bins; ++b)
      f << bin_center(b) << ',' << correct[static_cast<size_t>(b)] << ','
        << incorrect[static_cast<size_t>(b)] << ',' << posterior(b) << '\n';
    f << "theta," << theta << ",,\n";
  }
};

// Confidence = max softmax probability; correctness = argmax == label.
inline ConfidenceProfile build_confidence_profile(const Tensor& teacher_logits,
                                                  const std::vector<int>& labels, int bins = 50) {
  if (teacher_logits.ndim() != 2) throw DimError("confidence profile: expected logits [N,C]");
  const int64_t n = teacher_logits.dims()[0], c = teacher_logits.dims()[1];
  if (n == 0 || labels.empty()) throw ContractError("confidence profile: empty input");
  if (static_cast<int64_t>(labels.size()) != n)
    throw DimError("confidence profile: label count mismatch");
  ConfidenceProfile p;
  p.bins = bins;
  p.correct.assign(static_cast<size_t>(bins), 0);
  p.incorrect.assign(static_cast<size_t>(bins), 0);
  for (int64_t i = 0; i < n; ++i) {
    const double* row = teacher_logits.data() + i * c;
    int64_t arg = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[arg]) arg = j;
    double mx = row[arg];
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    double conf = 1.0 / s;  // exp(0)/s for the argmax entry
    int b = std::min(bins - 1, static_cast<int>(conf * bins));
    if (arg == labels[static_cast<size_t>(i)])
      ++p.correct[static_cast<size_t>(b)];
    else
      ++p.incorrect[static_cast<size_t>(b)];
  }
  p.derive_theta();
  return p;
}

inline double max_softmax_confidence(const double* logits, int64_t c) {
  int64_t arg = 0;
  for (int64_t j = 1; j < c; ++j)
    if (logits[j] > logits[arg]) arg = j;
  double s = 0.0;
  for (int64_t j = 0; j < c; ++j) s += std::exp(logits[j] - logits[arg]);
  return 1.0 / s;
}

// Mean over gated-in per-sample losses; nullptr when the gate set is empty.
inline Var masked_mean(Tape& tape, const std::vector<Var>& per_sample,
                       const std::vector<int>& gates) {
  if (per_sample.size() != gates.size()) throw DimError("masked_mean: gate count mismatch");
  std::vector<Var> kept;
  for (size_t i = 0; i < per_sample.size(); ++i)
    if (gates[i]) kept.push_back(per_sample[i]);
  if (kept.empty()) return nullptr;
  return tape.mean_of(kept);
}

// L = L_Cls + f(n) * (gate_fraction * L_P + L_S_masked). Null losses drop out.
inline Var total_loss(Tape& tape, Var l_cls, Var l_s_masked, Var l_p, double fn_base,
                      double gate_fraction) {
  Var total = l_cls;
  if (fn_base != 0.0) {
    Var distill = nullptr;
    if (l_p != nullptr && gate_fraction != 0.0) distill = tape.scale(l_p, gate_fraction);
    if (l_s_masked != nullptr)
      distill = distill ? tape.add(distill, l_s_masked) : l_s_masked;
    if (distill != nullptr) total = tape.add(total, tape.scale(distill, fn_base));
  }
  return total;
}

}  // namespace fpcd::collab
