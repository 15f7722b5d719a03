#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fpcd/distill.hpp"
#include "testutil.hpp"

using namespace fpcd;
using autodiff::Tape;
using autodiff::Var;
using test::random_tensor;

TEST(Distill, TeacherDistributionNormalizes) {
  auto eng = make_engine(41);
  Tensor mag = random_tensor({5, 2, 2, 3}, eng, 0.0, 2.0);
  Tensor p = distill::teacher_distribution(mag);
  const int64_t loc = 12;
  for (int64_t l = 0; l < loc; ++l) {
    double s = 0.0;
    for (int64_t k = 0; k < 5; ++k) {
      EXPECT_GE(p[k * loc + l], 0.0);
      s += p[k * loc + l];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);  // eps-smoothed denominator
    EXPECT_LE(s, 1.0);
  }
}

TEST(Distill, SpectrumLossEntropyBound) {
  // cross-entropy >= teacher entropy, equal when the student's predicted
  // softmax matches the teacher distribution
  auto eng = make_engine(43);
  const int64_t t = 6, k = 4, cs = 2, ct = 3;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor feats = random_tensor({t, 2, 2, cs}, eng);
    Tensor pw = random_tensor({1, 1, cs, ct}, eng);
    Tensor tmag = random_tensor({k, 2, 2, ct}, eng, 0.1, 2.0);
    Tape tape;
    Var loss = distill::spectrum_loss(tape, tmag, tape.constant(feats), tape.constant(pw),
                                      distill::BandMode::all);
    Tensor w = distill::teacher_distribution(tmag);
    const int64_t loc = w.size() / k;
    double entropy = 0.0;
    for (int64_t l = 0; l < loc; ++l)
      for (int64_t i = 0; i < k; ++i) {
        double p = w[i * loc + l];
        if (p > 0.0) entropy -= p * std::log(p);
      }
    entropy /= static_cast<double>(loc);
    EXPECT_GE(loss->value[0], entropy - 1e-9);
  }

  // matched case: teacher magnitudes proportional to the student's softmax
  Tensor feats = random_tensor({t, 2, 2, cs}, eng);
  Tensor pw = random_tensor({1, 1, cs, ct}, eng);
  Tensor tmag;
  {
    Tape tape;
    Var smag = tape.magnitude_spectrum(tape.constant(feats));
    Var z = tape.conv2d(smag, tape.constant(pw), 1, 0);
    Var logp = tape.log_softmax_axis0(z);
    tmag = logp->value;
    for (int64_t i = 0; i < tmag.size(); ++i) tmag[i] = std::exp(tmag[i]);
  }
  Tape tape;
  Var loss = distill::spectrum_loss(tape, tmag, tape.constant(feats), tape.constant(pw),
                                    distill::BandMode::all);
  Tensor w = distill::teacher_distribution(tmag);
  const int64_t loc = w.size() / tmag.dims()[0];
  double entropy = 0.0;
  for (int64_t i = 0; i < w.size(); ++i)
    if (w[i] > 0.0) entropy -= w[i] * std::log(w[i]);
  entropy /= static_cast<double>(loc);
  EXPECT_NEAR(loss->value[0], entropy, 1e-5);
}

TEST(Distill, BandDecomposition) {
  // low-band loss + high-band loss = full loss (shared normalization)
  auto eng = make_engine(45);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor feats = random_tensor({8, 2, 2, 2}, eng);
    Tensor pw = random_tensor({1, 1, 2, 3}, eng);
    Tensor tmag = random_tensor({5, 2, 2, 3}, eng, 0.05, 2.0);
    Tape tape;
    auto run = [&](distill::BandMode m) {
      return distill::spectrum_loss(tape, tmag, tape.constant(feats), tape.constant(pw), m)
          ->value[0];
    };
    EXPECT_NEAR(run(distill::BandMode::all),
                run(distill::BandMode::low) + run(distill::BandMode::high), 1e-12);
  }
}

TEST(Distill, StageWeights) {
  EXPECT_EQ(distill::stage_weight(1), 0.125);
  EXPECT_EQ(distill::stage_weight(2), 0.25);
  EXPECT_EQ(distill::stage_weight(3), 0.5);
  EXPECT_EQ(distill::stage_weight(4), 1.0);
  EXPECT_THROW(distill::stage_weight(0), ContractError);
  EXPECT_THROW(distill::stage_weight(5), ContractError);
}

TEST(Distill, StageSpectrumLossAppliesWeight) {
  auto eng = make_engine(47);
  distill::Predictor pred({2, 2}, {3, 3}, 5);
  Tensor f1 = random_tensor({6, 4, 4, 2}, eng), f2 = random_tensor({6, 2, 2, 2}, eng);
  Tensor m1 = random_tensor({4, 4, 4, 3}, eng, 0.05, 1.0);
  Tensor m2 = random_tensor({4, 2, 2, 3}, eng, 0.05, 1.0);
  Tape tape;
  auto pb = pred.bind(tape, false);
  std::vector<Tensor> mags = {m1, m2};
  std::vector<Var> feats = {tape.constant(f1), tape.constant(f2)};
  Var s2 = distill::stage_spectrum_loss(tape, mags, feats, 2, pb, distill::BandMode::all);
  Var raw = distill::spectrum_loss(tape, m2, feats[1], pb.stage_w[1], distill::BandMode::all);
  EXPECT_NEAR(s2->value[0], 0.25 * raw->value[0], 1e-12);
  EXPECT_THROW(
      distill::stage_spectrum_loss(tape, mags, feats, 3, pb, distill::BandMode::all),
      ContractError);
}

TEST(Distill, SampleKernels) {
  auto a = distill::sample_kernels(8, 3, 123);
  auto b = distill::sample_kernels(8, 3, 123);
  EXPECT_EQ(a, b);  // deterministic
  EXPECT_EQ(a.size(), 3u);
  std::set<int> uniq(a.begin(), a.end());
  EXPECT_EQ(uniq.size(), 3u);  // no replacement
  for (int v : a) {
    EXPECT_GE(v, 0);
    EXPECT_LT(v, 8);
  }
  auto id = distill::sample_kernels(4, 4, 9);
  EXPECT_EQ(id, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_THROW(distill::sample_kernels(2, 3, 0), ContractError);
  // different seeds eventually differ
  bool differs = false;
  for (uint64_t s = 0; s < 100 && !differs; ++s)
    differs = distill::sample_kernels(8, 3, s) != a;
  EXPECT_TRUE(differs);
}

TEST(Distill, ParameterDistributionProperties) {
  auto eng = make_engine(51);
  // sums to one, nonnegative
  std::vector<std::vector<double>> kernels;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> k(12);
    for (auto& v : k) v = std::uniform_real_distribution<double>(-1, 1)(eng);
    kernels.push_back(k);
  }
  auto pd = distill::parameter_distribution(kernels, 5);
  double s = 0.0;
  for (double p : pd.probs) {
    EXPECT_GT(p, 0.0);
    s += p;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);

  // kernel order does not matter
  auto perm = kernels;
  std::swap(perm[0], perm[3]);
  std::swap(perm[1], perm[2]);
  auto pd2 = distill::parameter_distribution(perm, 5);
  for (size_t i = 0; i < pd.probs.size(); ++i) EXPECT_NEAR(pd.probs[i], pd2.probs[i], 1e-12);

  // independent oracle: naive DFT + manual binning
  const int64_t bins = 5;
  std::vector<double> acc(static_cast<size_t>(bins), 0.0);
  for (const auto& k : kernels) {
    auto full = spectral::dft_naive(k.data(), static_cast<int64_t>(k.size()));
    const int64_t kl = spectral::onesided_bins(static_cast<int64_t>(k.size()));
    for (int64_t i = 0; i < kl; ++i) {
      int64_t b = std::min(bins - 1, bins * i / kl);
      acc[static_cast<size_t>(b)] += std::norm(full[static_cast<size_t>(i)]);
    }
  }
  double tot = 0.0;
  for (auto& v : acc) {
    v += distill::kEps;
    tot += v;
  }
  for (size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(pd.probs[i], acc[i] / tot, 1e-10);

  // constant (DC-only) kernel concentrates in bin 0
  auto dc = distill::parameter_distribution({std::vector<double>(16, 0.5)}, 4);
  EXPECT_GT(dc.probs[0], 0.999);
  EXPECT_THROW(distill::parameter_distribution({}, 4), ContractError);
  EXPECT_THROW(distill::parameter_distribution(kernels, 1), ContractError);
}

TEST(Distill, ParameterDistributionVarMatchesStatic) {
  auto eng = make_engine(53);
  Tensor kernel = random_tensor({3, 3, 2, 4}, eng);
  const int64_t bins = 6;
  auto chans = distill::all_channels(kernel);
  auto pd = distill::parameter_distribution(distill::kernel_slices(kernel, chans), bins);
  Tape tape;
  Var v = distill::parameter_distribution_var(tape, tape.constant(kernel), chans, bins);
  ASSERT_EQ(v->value.size(), bins);
  for (int64_t i = 0; i < bins; ++i)
    EXPECT_NEAR(v->value[i], pd.probs[static_cast<size_t>(i)], 1e-10);
}

TEST(Distill, KlDivergence) {
  auto eng = make_engine(55);
  std::uniform_real_distribution<double> uni(0.01, 1.0);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> p(8), q(8);
    double sp = 0, sq = 0;
    for (int i = 0; i < 8; ++i) {
      p[static_cast<size_t>(i)] = uni(eng);
      q[static_cast<size_t>(i)] = uni(eng);
      sp += p[static_cast<size_t>(i)];
      sq += q[static_cast<size_t>(i)];
    }
    for (int i = 0; i < 8; ++i) {
      p[static_cast<size_t>(i)] /= sp;
      q[static_cast<size_t>(i)] /= sq;
    }
    EXPECT_GE(distill::kl_divergence(p, q), -1e-12);
  }
  std::vector<double> u(4, 0.25);
  EXPECT_NEAR(distill::kl_divergence(u, u), 0.0, 1e-15);
  EXPECT_THROW(distill::kl_divergence(u, std::vector<double>(3, 1.0 / 3)), DimError);
}

TEST(Distill, PddLossZeroForIdenticalKernels) {
  auto eng = make_engine(57);
  Tensor k1 = random_tensor({3, 3, 1, 3}, eng);
  Tensor k2 = random_tensor({3, 3, 3, 4}, eng);
  Tape tape;
  std::vector<Var> sk = {tape.constant(k1), tape.constant(k2)};
  std::vector<const Tensor*> tk = {&k1, &k2};
  Var loss = distill::pdd_loss(tape, sk, tk, 4, 0);
  EXPECT_NEAR(loss->value[0], 0.0, 1e-10);
  EXPECT_THROW(distill::pdd_loss(tape, sk, {&k1}, 4, 0), ConfigError);
}

TEST(Distill, PddLossNonNegativeAndSeeded) {
  auto eng = make_engine(59);
  for (int t = 0; t < 50; ++t) {
    Tensor sk1 = random_tensor({3, 3, 1, 2}, eng);
    Tensor tk1 = random_tensor({3, 3, 1, 5}, eng);
    Tape tape;
    std::vector<Var> sk = {tape.constant(sk1)};
    std::vector<const Tensor*> tk = {&tk1};
    double l1 = distill::pdd_loss(tape, sk, tk, 4, 7)->value[0];
    double l2 = distill::pdd_loss(tape, sk, tk, 4, 7)->value[0];
    EXPECT_GE(l1, -1e-12);
    EXPECT_EQ(l1, l2);  // same seed, same teacher subsample
  }
}

TEST(Distill, PddLossGradcheck) {
  auto eng = make_engine(61);
  Tensor tk1 = random_tensor({3, 3, 1, 4}, eng);
  Tensor tk2 = random_tensor({3, 3, 2, 5}, eng);
  for (int t = 0; t < 10; ++t) {
    std::vector<Tensor> params = {random_tensor({3, 3, 1, 2}, eng),
                                  random_tensor({3, 3, 2, 3}, eng)};
    auto build = [&](Tape& tape, std::vector<Var>& lv) {
      std::vector<const Tensor*> tk = {&tk1, &tk2};
      return distill::pdd_loss(tape, {lv[0], lv[1]}, tk, 4, 11);
    };
    auto rep = test::fd_check(params, build);
    EXPECT_TRUE(rep.ok) << "max err " << rep.max_abs_err << " analytic " << rep.worst_analytic
                        << " fd " << rep.worst_fd;
  }
}

TEST(Distill, SpectrumLossGradcheck) {
  auto eng = make_engine(63);
  int done = 0;
  for (int t = 0; t < 40 && done < 10; ++t) {
    Tensor tmag = random_tensor({4, 2, 2, 3}, eng, 0.05, 1.5);
    std::vector<Tensor> params = {random_tensor({6, 2, 2, 2}, eng),
                                  random_tensor({1, 1, 2, 3}, eng)};
    for (auto mode : {distill::BandMode::all, distill::BandMode::low, distill::BandMode::high}) {
      auto build = [&](Tape& tape, std::vector<Var>& lv) {
        return distill::spectrum_loss(tape, tmag, lv[0], lv[1], mode);
      };
      if (!test::margins_ok(params, build)) continue;
      auto rep = test::fd_check(params, build);
      EXPECT_TRUE(rep.ok) << "max err " << rep.max_abs_err;
      ++done;
    }
  }
  EXPECT_GE(done, 10);
}

TEST(Distill, SoftenedKdLoss) {
  auto eng = make_engine(65);
  // zero at identical logits
  Tensor logits = random_tensor({3, 5}, eng);
  {
    Tape tape;
    Var l = distill::softened_kd_loss(tape, tape.constant(logits), logits, 4.0);
    EXPECT_NEAR(l->value[0], 0.0, 1e-9);
  }
  // nonnegative for random pairs
  for (int t = 0; t < 100; ++t) {
    Tensor a = random_tensor({2, 4}, eng), b = random_tensor({2, 4}, eng);
    Tape tape;
    EXPECT_GE(distill::softened_kd_loss(tape, tape.constant(a), b, 4.0)->value[0], -1e-10);
  }
  // gradcheck
  for (int t = 0; t < 10; ++t) {
    Tensor teacher = random_tensor({2, 4}, eng);
    std::vector<Tensor> params = {random_tensor({2, 4}, eng)};
    auto build = [&](Tape& tape, std::vector<Var>& lv) {
      return distill::softened_kd_loss(tape, lv[0], teacher, 4.0);
    };
    auto rep = test::fd_check(params, build);
    EXPECT_TRUE(rep.ok) << "max err " << rep.max_abs_err;
  }
}

TEST(Distill, PredictorShapeChecks) {
  EXPECT_THROW(distill::Predictor({4, 8}, {2, 8}, 0), ConfigError);
  EXPECT_THROW(distill::Predictor({4}, {8, 8}, 0), ConfigError);
  distill::Predictor p({2, 4}, {3, 8}, 1);
  EXPECT_EQ(p.num_stages(), 2u);
  EXPECT_EQ(p.weight(0).dims(), (Dims{1, 1, 2, 3}));
  distill::Predictor q({2, 4}, {3, 8}, 1);
  for (int64_t i = 0; i < p.weight(1).size(); ++i)
    EXPECT_EQ(p.weight(1)[i], q.weight(1)[i]);  // seeded init is deterministic
}
