#pragma once

// Staged per-frame CNN backbones. Each stage is conv(3x3) -> relu, repeated
// convs_per_stage times, then avgpool stride 2. The T frame axis rides as the
// conv batch axis, so stage features keep their temporal structure. The
// classifier global-average-pools the last stage and averages per-frame
// logits over T (consensus).

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fpcd/autodiff.hpp"
#include "fpcd/error.hpp"
#include "fpcd/rng.hpp"
#include "fpcd/tensor.hpp"

namespace fpcd::models {

using autodiff::Tape;
using autodiff::Var;

struct BackboneConfig {
  std::vector<int64_t> widths;  // per-stage output channels
  int64_t convs_per_stage = 1;
  int64_t in_channels = 1;
  int64_t num_classes = 8;
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

// Leaf nodes for one tape; reused across all clips of a batch so gradient
// accumulation over the batch is automatic.
struct BoundParams {
  std::vector<std::vector<Var>> stage_kernels;  // [stage][conv]
  Var fc_w = nullptr;
  Var fc_b = nullptr;
  std::vector<std::pair<Tensor*, Var>> leaves;  // param -> leaf, for the optimizer
};

struct ForwardResult {
  std::vector<Var> stage_feats;  // [T,H_i,W_i,C_i] per stage
  Var logits = nullptr;          // [1,num_classes]
};

class StagedBackbone {
 public:
  StagedBackbone() = default;
  explicit StagedBackbone(BackboneConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.widths.empty()) throw ConfigError("backbone: no stage widths");
    for (int64_t w : cfg_.widths)
      if (w <= 0) throw ConfigError("backbone: non-positive width");
    auto eng = make_engine(seed, 0x6261636bULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    // He init with an extra per-stage gain: the trailing 2x2 average-pool
    // attenuates activation rms by roughly 1/1.5 per stage, which plain He
    // scaling does not account for. Without it the logits at init are so
    // small that cross-entropy gradients vanish and training stalls. The
    // gain is split evenly across the convs of a stage.
    const double conv_gain = std::pow(1.5, 1.0 / static_cast<double>(cfg_.convs_per_stage));
    int64_t cin = cfg_.in_channels;
    kernels_.resize(cfg_.widths.size());
    for (size_t s = 0; s < cfg_.widths.size(); ++s) {
      int64_t cout = cfg_.widths[s];
      for (int64_t j = 0; j < cfg_.convs_per_stage; ++j) {
        Tensor k({3, 3, cin, cout});
        double std_ = conv_gain * std::sqrt(2.0 / static_cast<double>(3 * 3 * cin));
        for (int64_t i = 0; i < k.size(); ++i) k[i] = std_ * normal(eng);
        kernels_[s].push_back(std::move(k));
        cin = cout;
      }
    }
    fc_w_ = Tensor({cfg_.widths.back(), cfg_.num_classes});
    double std_ = std::sqrt(2.0 / static_cast<double>(cfg_.widths.back()));
    for (int64_t i = 0; i < fc_w_.size(); ++i) fc_w_[i] = std_ * normal(eng);
    fc_b_ = Tensor({cfg_.num_classes});
  }

  const BackboneConfig& config() const { return cfg_; }
  int64_t num_stages() const { return static_cast<int64_t>(cfg_.widths.size()); }

  // Last conv kernel of a stage; the layer paired for parameter distillation.
  Tensor& stage_kernel(int64_t stage) { return kernels_[static_cast<size_t>(stage)].back(); }
  const Tensor& stage_kernel(int64_t stage) const {
    return kernels_[static_cast<size_t>(stage)].back();
  }

  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out;
    for (size_t s = 0; s < kernels_.size(); ++s)
      for (size_t j = 0; j < kernels_[s].size(); ++j)
        out.push_back({"stage" + std::to_string(s + 1) + ".conv" + std::to_string(j),
                       &kernels_[s][j]});
    out.push_back({"fc.w", &fc_w_});
    out.push_back({"fc.b", &fc_b_});
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& st : kernels_)
      for (const auto& k : st) n += k.size();
    return n + fc_w_.size() + fc_b_.size();
  }

  BoundParams bind(Tape& tape, bool requires_grad) {
    BoundParams bp;
    bp.stage_kernels.resize(kernels_.size());
    for (size_t s = 0; s < kernels_.size(); ++s)
      for (auto& k : kernels_[s]) {
        Var v = tape.leaf(k, requires_grad);
        bp.stage_kernels[s].push_back(v);
        bp.leaves.push_back({&k, v});
      }
    bp.fc_w = tape.leaf(fc_w_, requires_grad);
    bp.fc_b = tape.leaf(fc_b_, requires_grad);
    bp.leaves.push_back({&fc_w_, bp.fc_w});
    bp.leaves.push_back({&fc_b_, bp.fc_b});
    return bp;
  }

  // Per-frame forward exposing stage features; clip [T,H,W,Cin].
  ForwardResult forward_with_stages(Tape& tape, BoundParams& bp, const Tensor& clip) const {
    if (clip.ndim() != 4 || clip.dims()[3] != cfg_.in_channels)
      throw DimError("forward: clip must be [T,H,W," + std::to_string(cfg_.in_channels) + "]");
    ForwardResult r;
    Var x = tape.constant(clip);
    for (size_t s = 0; s < kernels_.size(); ++s) {
      for (Var k : bp.stage_kernels[s]) {
        x = tape.conv2d(x, k, /*stride=*/1, /*pad=*/1);
        x = tape.relu(x);
      }
      x = tape.avgpool2d(x, 2, 2);
      r.stage_feats.push_back(x);
    }
    Var pooled = tape.spatial_mean(x);                       // [T,C]
    Var frame_logits = tape.linear(pooled, bp.fc_w, bp.fc_b);  // [T,classes]
    Var consensus = tape.mean_axis0(frame_logits);           // [classes]
    r.logits = tape.reshape(consensus, {1, cfg_.num_classes});
    return r;
  }

  // Convenience single-shot forward (fresh no-grad bind).
  ForwardResult forward_with_stages(Tape& tape, const Tensor& clip) {
    auto bp = bind(tape, false);
    return forward_with_stages(tape, bp, clip);
  }

 private:
  BackboneConfig cfg_;
  std::vector<std::vector<Tensor>> kernels_;
  Tensor fc_w_, fc_b_;
};

inline StagedBackbone build_teacher(std::vector<int64_t> widths = {32, 64, 128, 256},
                                    int64_t in_channels = 1, int64_t num_classes = 8,
                                    uint64_t seed = 0) {
  BackboneConfig cfg;
  cfg.widths = std::move(widths);
  cfg.convs_per_stage = 2;
  cfg.in_channels = in_channels;
  cfg.num_classes = num_classes;
  return StagedBackbone(cfg, seed);
}

inline StagedBackbone build_student(std::vector<int64_t> widths = {16, 32, 64, 128},
                                    int64_t in_channels = 1, int64_t num_classes = 8,
                                    uint64_t seed = 0) {
  BackboneConfig cfg;
  cfg.widths = std::move(widths);
  cfg.convs_per_stage = 1;
  cfg.in_channels = in_channels;
  cfg.num_classes = num_classes;
  return StagedBackbone(cfg, seed);
}

}  // namespace fpcd::models
