#pragma once

// Training/evaluation harness: run configuration, teacher and student
// training loops (plain, simple-KD, and frequency-domain distillation),
// checkpoints, metrics CSV, and the analysis commands.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpcd/autodiff.hpp"
#include "fpcd/collab.hpp"
#include "fpcd/data.hpp"
#include "fpcd/distill.hpp"
#include "fpcd/error.hpp"
#include "fpcd/models.hpp"
#include "fpcd/rng.hpp"
#include "fpcd/spectral.hpp"
#include "fpcd/tensor.hpp"
#include "fpcd/tensor_io.hpp"

namespace fpcd::harness {

namespace fs = std::filesystem;
using autodiff::Tape;
using autodiff::Var;
using nlohmann::json;

// ---- configuration ----

struct OptimConfig {
  double lr = 0.01;
  double momentum = 0.9;
  int epochs = 60;
  int batch_size = 32;
  std::vector<int> decay_epochs = {30, 45};
  double decay_factor = 0.1;
  double clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables
};

enum class Mode { train_teacher, train_student_baseline, distill_fpcd, distill_simple_kd };

struct RunConfig {
  std::string dataset;
  std::string out_dir;
  std::string teacher_checkpoint;
  std::vector<int64_t> widths;  // empty -> per-mode default
  std::string fsd = "all";      // off | low | high | all
  bool pdd = true;
  bool cl = true;
  collab::DistillSchedule schedule{0.9, 0.1, 0.8, -1, -1};  // n1/n2 < 0 -> 30%/70% of epochs
  int confidence_bins = 50;
  int64_t pdd_bins = 32;
  double kd_tau = 4.0;
  OptimConfig optim;
  uint64_t seed = 0;

  bool fsd_enabled() const { return fsd != "off"; }
  distill::BandMode band_mode() const { return distill::band_mode_from_string(fsd); }

  collab::DistillSchedule resolved_schedule() const {
    collab::DistillSchedule s = schedule;
    if (s.n1 < 0) s.n1 = std::max(1, (optim.epochs * 30) / 100);
    if (s.n2 < 0) s.n2 = std::max(s.n1 + 1, (optim.epochs * 70) / 100);
    return s;
  }

  void validate(Mode mode) const {
    if (dataset.empty()) throw ConfigError("config: dataset path required");
    if (out_dir.empty()) throw ConfigError("config: out_dir required");
    if (optim.lr <= 0.0) throw ConfigError("config: lr must be positive");
    if (optim.epochs < 0 || optim.batch_size < 1) throw ConfigError("config: bad optimizer fields");
    if (fsd != "off" && fsd != "low" && fsd != "high" && fsd != "all")
      throw ConfigError("config: fsd must be off|low|high|all");
    if (mode == Mode::distill_fpcd && cl) {
      auto s = resolved_schedule();
      s.validate();
      if (optim.epochs < s.n2)
        throw ConfigError("config: epochs must reach N2 when collaborative learning is on");
    }
    if ((mode == Mode::distill_fpcd || mode == Mode::distill_simple_kd) &&
        teacher_checkpoint.empty())
      throw ConfigError("config: teacher_checkpoint required for distillation");
  }
};

inline void apply_json(RunConfig& c, const json& j) {
  if (j.contains("dataset")) c.dataset = j["dataset"].get<std::string>();
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("teacher_checkpoint"))
    c.teacher_checkpoint = j["teacher_checkpoint"].get<std::string>();
  if (j.contains("widths")) c.widths = j["widths"].get<std::vector<int64_t>>();
  if (j.contains("ablation")) {
    const auto& a = j["ablation"];
    if (a.contains("fsd")) c.fsd = a["fsd"].get<std::string>();
    if (a.contains("pdd")) c.pdd = a["pdd"].get<bool>();
    if (a.contains("cl")) c.cl = a["cl"].get<bool>();
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    if (s.contains("gamma")) c.schedule.gamma = s["gamma"].get<double>();
    if (s.contains("alpha")) c.schedule.alpha = s["alpha"].get<double>();
    if (s.contains("lambda")) c.schedule.lambda = s["lambda"].get<double>();
    if (s.contains("n1")) c.schedule.n1 = s["n1"].get<int>();
    if (s.contains("n2")) c.schedule.n2 = s["n2"].get<int>();
  }
  if (j.contains("confidence_bins")) c.confidence_bins = j["confidence_bins"].get<int>();
  if (j.contains("pdd_bins")) c.pdd_bins = j["pdd_bins"].get<int64_t>();
  if (j.contains("kd_tau")) c.kd_tau = j["kd_tau"].get<double>();
  if (j.contains("optim")) {
    const auto& o = j["optim"];
    if (o.contains("lr")) c.optim.lr = o["lr"].get<double>();
    if (o.contains("momentum")) c.optim.momentum = o["momentum"].get<double>();
    if (o.contains("epochs")) c.optim.epochs = o["epochs"].get<int>();
    if (o.contains("batch_size")) c.optim.batch_size = o["batch_size"].get<int>();
    if (o.contains("decay_epochs")) c.optim.decay_epochs = o["decay_epochs"].get<std::vector<int>>();
    if (o.contains("decay_factor")) c.optim.decay_factor = o["decay_factor"].get<double>();
    if (o.contains("clip_norm")) c.optim.clip_norm = o["clip_norm"].get<double>();
  }
}

// "--set optim.lr=0.02" style override onto the raw JSON document.
inline void apply_override(json& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + kv);
  std::string key = kv.substr(0, eq);
  std::string val = kv.substr(eq + 1);
  json* cur = &j;
  size_t pos = 0;
  while (true) {
    auto dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (dot == std::string::npos) {
      json parsed = json::parse(val, nullptr, false);
      (*cur)[part] = parsed.is_discarded() ? json(val) : parsed;
      return;
    }
    cur = &(*cur)[part];
    pos = dot + 1;
  }
}

inline RunConfig load_config(const std::string& config_path, const std::vector<std::string>& sets,
                             uint64_t seed) {
  json j = json::object();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw IoError("cannot read config: " + config_path);
    f >> j;
  }
  for (const auto& s : sets) apply_override(j, s);
  RunConfig c;
  apply_json(c, j);
  c.seed = seed;
  return c;
}

// ---- checkpoints ----

inline void save_checkpoint(const std::string& dir, models::StagedBackbone& model) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint dir: " + dir);
  json meta;
  meta["widths"] = model.config().widths;
  meta["convs_per_stage"] = model.config().convs_per_stage;
  meta["in_channels"] = model.config().in_channels;
  meta["num_classes"] = model.config().num_classes;
  std::ofstream mf((fs::path(dir) / "meta.json").string());
  mf << meta.dump(2) << '\n';
  std::ofstream pf((fs::path(dir) / "params.tsv").string());
  for (auto& p : model.parameters()) {
    std::string file = p.name + ".fpcd";
    io::save_tensor((fs::path(dir) / file).string(), *p.tensor);
    pf << p.name << '\t' << file << '\n';
  }
}

inline models::StagedBackbone load_checkpoint(const std::string& dir) {
  std::ifstream mf((fs::path(dir) / "meta.json").string());
  if (!mf) throw IoError("cannot read checkpoint meta: " + dir);
  json meta;
  mf >> meta;
  models::BackboneConfig cfg;
  cfg.widths = meta["widths"].get<std::vector<int64_t>>();
  cfg.convs_per_stage = meta["convs_per_stage"].get<int64_t>();
  cfg.in_channels = meta["in_channels"].get<int64_t>();
  cfg.num_classes = meta["num_classes"].get<int64_t>();
  models::StagedBackbone model(cfg, 0);
  std::ifstream pf((fs::path(dir) / "params.tsv").string());
  if (!pf) throw IoError("cannot read checkpoint params: " + dir);
  auto params = model.parameters();
  std::string line;
  size_t loaded = 0;
  while (std::getline(pf, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    std::string name = line.substr(0, tab);
    std::string file = line.substr(tab + 1);
    bool found = false;
    for (auto& p : params)
      if (p.name == name) {
        Tensor t = io::load_tensor((fs::path(dir) / file).string());
        check_same_shape(*p.tensor, t, "load_checkpoint");
        *p.tensor = std::move(t);
        found = true;
        ++loaded;
      }
    if (!found) throw IoError("checkpoint lists unknown parameter " + name + " in " + dir);
  }
  if (loaded != params.size()) throw IoError("checkpoint missing parameters in " + dir);
  return model;
}

// ---- evaluation ----

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> per_class;
  int64_t count = 0;
};

inline Tensor model_logits(models::StagedBackbone& model, const Tensor& clip) {
  Tape tape;
  auto r = model.forward_with_stages(tape, clip);
  return r.logits->value;
}

inline EvalResult evaluate(models::StagedBackbone& model,
                           const std::vector<data::LoadedClip>& clips) {
  const int64_t c = model.config().num_classes;
  EvalResult res;
  res.per_class.assign(static_cast<size_t>(c), 0.0);
  std::vector<int64_t> class_n(static_cast<size_t>(c), 0);
  const int64_t topk = std::min<int64_t>(5, c);
  for (const auto& lc : clips) {
    Tensor logits = model_logits(model, lc.frames);
    std::vector<int64_t> order(static_cast<size_t>(c));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return logits[a] > logits[b]; });
    ++class_n[static_cast<size_t>(lc.label)];
    if (order[0] == lc.label) {
      res.top1 += 1.0;
      res.per_class[static_cast<size_t>(lc.label)] += 1.0;
    }
    for (int64_t i = 0; i < topk; ++i)
      if (order[static_cast<size_t>(i)] == lc.label) {
        res.top5 += 1.0;
        break;
      }
    ++res.count;
  }
  if (res.count == 0) throw ContractError("evaluate: empty split");
  res.top1 /= static_cast<double>(res.count);
  res.top5 /= static_cast<double>(res.count);
  for (int64_t i = 0; i < c; ++i)
    if (class_n[static_cast<size_t>(i)] > 0)
      res.per_class[static_cast<size_t>(i)] /= static_cast<double>(class_n[static_cast<size_t>(i)]);
  return res;
}

// ---- metrics ----

struct MetricsRow {
  int epoch = 0;
  double loss_cls = 0, loss_s = 0, loss_p = 0, f_n = 0, gate_fraction = 0;
  double train_top1 = 0, val_top1 = 0;
};

inline void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write metrics: " + path);
  f << "epoch,loss_cls,loss_s,loss_p,f_n,gate_fraction,train_top1,val_top1\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", r.epoch,
                  r.loss_cls, r.loss_s, r.loss_p, r.f_n, r.gate_fraction, r.train_top1,
                  r.val_top1);
    f << buf;
  }
}

// ---- optimizer bookkeeping ----

struct Optimizer {
  std::vector<std::pair<Tensor*, Tensor>> velocity;  // param -> velocity

  void track(Tensor* p) { velocity.push_back({p, Tensor(p->dims())}); }

  void step(const std::vector<std::pair<Tensor*, Var>>& leaves, double lr, double momentum,
            double clip_norm = 0.0) {
    double scale = 1.0;
    if (clip_norm > 0.0) {
      double sq = 0.0;
      for (auto& [param, leaf] : leaves)
        for (int64_t i = 0; i < leaf->grad.size(); ++i) sq += leaf->grad[i] * leaf->grad[i];
      double norm = std::sqrt(sq);
      if (norm > clip_norm) scale = clip_norm / norm;
    }
    for (auto& [param, leaf] : leaves) {
      Tensor* vel = nullptr;
      for (auto& [p, v] : velocity)
        if (p == param) vel = &v;
      if (!vel) throw ConfigError("optimizer: untracked parameter");
      if (scale != 1.0)
        for (int64_t i = 0; i < leaf->grad.size(); ++i) leaf->grad[i] *= scale;
      autodiff::sgd_step(*param, leaf->grad, *vel, lr, momentum);
    }
  }
};

// ---- training ----

struct TrainResult {
  double final_val_top1 = 0.0;
  std::string checkpoint_dir;
  std::string metrics_path;
  std::vector<MetricsRow> rows;
};

namespace detail {

inline double current_lr(const OptimConfig& o, int epoch) {
  double lr = o.lr;
  for (int d : o.decay_epochs)
    if (epoch > d) lr *= o.decay_factor;
  return lr;
}

inline std::vector<int64_t> shuffled_indices(int64_t n, uint64_t seed, int epoch) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  auto eng = make_engine(seed, 0x73687566ULL, static_cast<uint64_t>(epoch));
  std::shuffle(idx.begin(), idx.end(), eng);
  return idx;
}

// Frozen teacher context for distillation, built once per run.
struct TeacherContext {
  models::StagedBackbone model;
  std::vector<std::vector<Tensor>> spectra;  // per train clip, per stage: [K,H,W,Ct]
  std::vector<Tensor> logits;                // per train clip: [1,C]
  std::vector<double> confidence;            // per train clip
  double theta = 0.0;
  collab::ConfidenceProfile profile;
};

}  // namespace detail

inline TrainResult train_teacher(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.validate(Mode::train_teacher);
  if (c.widths.empty()) c.widths = {32, 64, 128, 256};
  auto train = data::load_split(c.dataset, data::Split::train);
  auto val = data::load_split(c.dataset, data::Split::val);
  int64_t classes = 0;
  for (auto& lc : train) classes = std::max<int64_t>(classes, lc.label + 1);
  auto model = models::build_teacher(c.widths, train[0].frames.dims()[3], classes, c.seed);

  Optimizer opt;
  for (auto& p : model.parameters()) opt.track(p.tensor);

  std::vector<MetricsRow> rows;
  for (int epoch = 1; epoch <= c.optim.epochs; ++epoch) {
    double lr = detail::current_lr(c.optim, epoch);
    auto order = detail::shuffled_indices(static_cast<int64_t>(train.size()), c.seed, epoch);
    double loss_sum = 0.0;
    int64_t steps = 0, hits = 0, seen = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(c.optim.batch_size)) {
      size_t end = std::min(order.size(), off + static_cast<size_t>(c.optim.batch_size));
      Tape tape;
      auto bp = model.bind(tape, true);
      std::vector<Var> logit_rows;
      std::vector<int> labels;
      for (size_t i = off; i < end; ++i) {
        const auto& lc = train[static_cast<size_t>(order[i])];
        auto r = model.forward_with_stages(tape, bp, lc.frames);
        logit_rows.push_back(r.logits);
        labels.push_back(lc.label);
      }
      Var logits = tape.concat_rows(logit_rows);
      Var loss = tape.cross_entropy(logits, labels);
      tape.backward(loss);
      opt.step(bp.leaves, lr, c.optim.momentum, c.optim.clip_norm);
      loss_sum += loss->value[0];
      ++steps;
      const int64_t nc = model.config().num_classes;
      for (size_t i = 0; i < labels.size(); ++i) {
        const double* row = logits->value.data() + static_cast<int64_t>(i) * nc;
        int64_t arg = 0;
        for (int64_t j = 1; j < nc; ++j)
          if (row[j] > row[arg]) arg = j;
        if (arg == labels[i]) ++hits;
        ++seen;
      }
    }
    MetricsRow r;
    r.epoch = epoch;
    r.loss_cls = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    r.gate_fraction = 1.0;
    r.train_top1 = seen ? static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
    r.val_top1 = evaluate(model, val).top1;
    rows.push_back(r);
  }

  TrainResult res;
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  res.checkpoint_dir = (fs::path(c.out_dir) / "checkpoint").string();
  res.metrics_path = (fs::path(c.out_dir) / "metrics.csv").string();
  save_checkpoint(res.checkpoint_dir, model);
  write_metrics(res.metrics_path, rows);
  res.rows = std::move(rows);
  res.final_val_top1 = res.rows.empty() ? evaluate(model, val).top1 : res.rows.back().val_top1;
  return res;
}

// Unified student trainer: baseline is distillation with every flag off and
// no teacher, so the two trajectories are bit-identical by construction.
inline TrainResult train_student(const RunConfig& cfg, Mode mode) {
  RunConfig c = cfg;
  c.validate(mode);
  if (c.widths.empty()) c.widths = {16, 32, 64, 128};
  const bool is_distill = mode == Mode::distill_fpcd;
  const bool is_kd = mode == Mode::distill_simple_kd;
  const bool use_fsd = is_distill && c.fsd_enabled();
  const bool use_pdd = is_distill && c.pdd;
  const bool use_cl = is_distill && c.cl;
  const bool need_teacher = is_kd || use_fsd || use_pdd || use_cl;

  auto train = data::load_split(c.dataset, data::Split::train);
  auto val = data::load_split(c.dataset, data::Split::val);
  int64_t classes = 0;
  for (auto& lc : train) classes = std::max<int64_t>(classes, lc.label + 1);
  auto student = models::build_student(c.widths, train[0].frames.dims()[3], classes, c.seed);

  std::error_code ec;
  fs::create_directories(c.out_dir, ec);

  std::optional<detail::TeacherContext> teacher;
  std::optional<distill::Predictor> predictor;
  if (need_teacher) {
    teacher.emplace(detail::TeacherContext{load_checkpoint(c.teacher_checkpoint), {}, {}, {}});
    auto& tc = *teacher;
    if (tc.model.num_stages() != student.num_stages())
      throw ConfigError("distill: teacher/student stage counts differ");
    tc.spectra.reserve(train.size());
    for (const auto& lc : train) {
      Tape tape;
      auto r = tc.model.forward_with_stages(tape, lc.frames);
      std::vector<Tensor> specs;
      if (use_fsd)
        for (Var f : r.stage_feats)
          specs.push_back(spectral::magnitude_spectrum(f->value).values);
      tc.spectra.push_back(std::move(specs));
      tc.logits.push_back(r.logits->value);
      tc.confidence.push_back(
          collab::max_softmax_confidence(r.logits->value.data(), classes));
    }
    if (use_cl) {
      // threshold estimated on the held-out split, then frozen
      Tensor vlogits({static_cast<int64_t>(val.size()), classes});
      std::vector<int> vlabels;
      for (size_t i = 0; i < val.size(); ++i) {
        Tensor l = model_logits(tc.model, val[i].frames);
        for (int64_t j = 0; j < classes; ++j) vlogits[static_cast<int64_t>(i) * classes + j] = l[j];
        vlabels.push_back(val[i].label);
      }
      tc.profile = collab::build_confidence_profile(vlogits, vlabels, c.confidence_bins);
      tc.theta = tc.profile.theta;
      tc.profile.write_csv((fs::path(c.out_dir) / "confidence_profile.csv").string());
    }
    if (use_fsd)
      predictor.emplace(student.config().widths, tc.model.config().widths,
                        seed_combine(c.seed, 0x70ULL));
  }

  Optimizer opt;
  for (auto& p : student.parameters()) opt.track(p.tensor);
  if (predictor)
    for (auto& p : predictor->parameters()) opt.track(p.second);

  // The PDD teacher subset and its log-distribution are fixed for the whole
  // run: resampling per step makes PD_t a moving target whose gradient never
  // vanishes and measurably drags classification convergence.
  std::vector<Tensor> pdd_targets;
  if (use_pdd) {
    std::vector<const Tensor*> tk;
    std::vector<int64_t> counts;
    for (int64_t s = 0; s < student.num_stages(); ++s) {
      tk.push_back(&teacher->model.stage_kernel(s));
      counts.push_back(student.config().widths[static_cast<size_t>(s)]);
    }
    pdd_targets = distill::pdd_teacher_log_pds(tk, counts, c.pdd_bins,
                                               seed_combine(c.seed, 0x706464ULL));
  }

  auto sched = c.resolved_schedule();
  std::vector<MetricsRow> rows;
  for (int epoch = 1; epoch <= c.optim.epochs; ++epoch) {
    double lr = detail::current_lr(c.optim, epoch);
    auto order = detail::shuffled_indices(static_cast<int64_t>(train.size()), c.seed, epoch);
    auto stage_eng = make_engine(c.seed, 0x73746167ULL, static_cast<uint64_t>(epoch));
    std::uniform_int_distribution<int> stage_pick(1, static_cast<int>(student.num_stages()));
    double fn_base = use_cl ? collab::schedule_weight(epoch, sched, 1.0) : 1.0;

    double cls_sum = 0, ls_sum = 0, lp_sum = 0, gate_sum = 0;
    int64_t steps = 0, hits = 0, seen = 0, gate_seen = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(c.optim.batch_size)) {
      size_t end = std::min(order.size(), off + static_cast<size_t>(c.optim.batch_size));
      Tape tape;
      auto bp = student.bind(tape, true);
      std::optional<distill::Predictor::Bound> pb;
      if (predictor) pb = predictor->bind(tape, true);
      int stage = use_fsd ? stage_pick(stage_eng) : 1;

      std::vector<Var> logit_rows, clip_ls;
      std::vector<int> labels, gates;
      for (size_t i = off; i < end; ++i) {
        int64_t ci = order[i];
        const auto& lc = train[static_cast<size_t>(ci)];
        auto r = student.forward_with_stages(tape, bp, lc.frames);
        logit_rows.push_back(r.logits);
        labels.push_back(lc.label);
        int g = 1;
        if (use_cl) g = collab::gate(teacher->confidence[static_cast<size_t>(ci)], teacher->theta);
        gates.push_back(g);
        if (use_fsd && g) {
          Var ls = distill::stage_spectrum_loss(
              tape, teacher->spectra[static_cast<size_t>(ci)], r.stage_feats, stage, *pb,
              c.band_mode());
          clip_ls.push_back(ls);
        }
      }
      Var logits = tape.concat_rows(logit_rows);
      Var l_cls = tape.cross_entropy(logits, labels);

      Var total = l_cls;
      double gate_frac =
          std::accumulate(gates.begin(), gates.end(), 0.0) / static_cast<double>(gates.size());
      Var l_s = nullptr, l_p = nullptr;
      if (is_kd) {
        Tensor tl({static_cast<int64_t>(labels.size()), classes});
        for (size_t i = off; i < end; ++i)
          for (int64_t j = 0; j < classes; ++j)
            tl[static_cast<int64_t>(i - off) * classes + j] =
                teacher->logits[static_cast<size_t>(order[i])][j];
        l_s = distill::softened_kd_loss(tape, logits, tl, c.kd_tau);
        total = tape.add(l_cls, l_s);
      } else if (is_distill) {
        l_s = use_fsd ? collab::masked_mean(tape, clip_ls, std::vector<int>(clip_ls.size(), 1))
                      : nullptr;
        if (use_pdd) {
          std::vector<Var> sk;
          for (int64_t s = 0; s < student.num_stages(); ++s)
            sk.push_back(bp.stage_kernels[static_cast<size_t>(s)].back());
          l_p = distill::pdd_loss_with_targets(tape, sk, pdd_targets);
        }
        total = collab::total_loss(tape, l_cls, l_s, l_p, fn_base, gate_frac);
      }

      try {
        tape.backward(total);
      } catch (const NumericError& e) {
        // abort the run but leave the last-good parameters on disk
        save_checkpoint((fs::path(c.out_dir) / "checkpoint").string(), student);
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                           "; last-good checkpoint saved)");
      }
      opt.step(bp.leaves, lr, c.optim.momentum, c.optim.clip_norm);
      if (pb) opt.step(pb->leaves, lr, c.optim.momentum, c.optim.clip_norm);

      cls_sum += l_cls->value[0];
      if (l_s) ls_sum += l_s->value[0];
      if (l_p) lp_sum += l_p->value[0];
      gate_sum += gate_frac;
      ++steps;
      for (size_t i = 0; i < labels.size(); ++i) {
        const double* row = logits->value.data() + static_cast<int64_t>(i) * classes;
        int64_t arg = 0;
        for (int64_t j = 1; j < classes; ++j)
          if (row[j] > row[arg]) arg = j;
        if (arg == labels[i]) ++hits;
        ++seen;
      }
      gate_seen += static_cast<int64_t>(gates.size());
    }
    MetricsRow r;
    r.epoch = epoch;
    r.loss_cls = steps ? cls_sum / static_cast<double>(steps) : 0.0;
    r.loss_s = steps ? ls_sum / static_cast<double>(steps) : 0.0;
    r.loss_p = steps ? lp_sum / static_cast<double>(steps) : 0.0;
    r.f_n = fn_base;
    r.gate_fraction = steps ? gate_sum / static_cast<double>(steps) : 1.0;
    r.train_top1 = seen ? static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
    r.val_top1 = evaluate(student, val).top1;
    rows.push_back(r);
  }

  TrainResult res;
  res.checkpoint_dir = (fs::path(c.out_dir) / "checkpoint").string();
  res.metrics_path = (fs::path(c.out_dir) / "metrics.csv").string();
  save_checkpoint(res.checkpoint_dir, student);
  write_metrics(res.metrics_path, rows);
  res.rows = std::move(rows);
  res.final_val_top1 = res.rows.empty() ? evaluate(student, val).top1 : res.rows.back().val_top1;
  return res;
}

// ---- analysis commands ----

inline void write_eval_csv(const std::string& path, const EvalResult& r) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write eval csv: " + path);
  f << "metric,value\n";
  f << "top1," << r.top1 << "\ntop5," << r.top5 << "\ncount," << r.count << '\n';
  for (size_t i = 0; i < r.per_class.size(); ++i)
    f << "class" << i << "_top1," << r.per_class[i] << '\n';
}

// Per-stage band-energy CSV (stage 0 = raw input) plus low/high temporal
// band reconstructions of the clip as per-frame PGMs.
inline void analyze_spectrum(const std::string& checkpoint_dir, const std::string& clip_path,
                             const std::string& out_dir) {
  auto model = load_checkpoint(checkpoint_dir);
  Tensor clip = io::load_tensor(clip_path);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create out dir: " + out_dir);

  Tape tape;
  auto r = model.forward_with_stages(tape, clip);
  std::ofstream csv((fs::path(out_dir) / "band_energy.csv").string());
  csv << "stage,bin,normalized_frequency,mean_energy\n";
  auto emit = [&](int stage, const Tensor& feats) {
    const int64_t t = feats.dims()[0];
    auto fs_ = spectral::magnitude_spectrum(feats, stage);
    const int64_t loc = fs_.values.size() / fs_.bands;
    for (int64_t k = 0; k < fs_.bands; ++k) {
      double e = 0.0;
      for (int64_t l = 0; l < loc; ++l) {
        double m = fs_.values[k * loc + l];
        e += m * m;
      }
      csv << stage << ',' << k << ',' << (static_cast<double>(k) / static_cast<double>(t)) << ','
          << e / static_cast<double>(loc) << '\n';
    }
  };
  emit(0, clip);
  for (size_t s = 0; s < r.stage_feats.size(); ++s)
    emit(static_cast<int>(s + 1), r.stage_feats[s]->value);

  // pixelwise temporal band reconstructions of the raw clip
  const int64_t t = clip.dims()[0], h = clip.dims()[1], w = clip.dims()[2];
  const int64_t loc = clip.size() / t;
  std::vector<double> lo(static_cast<size_t>(clip.size())), hi(static_cast<size_t>(clip.size()));
  std::vector<double> seq(static_cast<size_t>(t));
  for (int64_t l = 0; l < loc; ++l) {
    for (int64_t p = 0; p < t; ++p) seq[static_cast<size_t>(p)] = clip[p * loc + l];
    auto rl = spectral::band_reconstruct(seq, true);
    auto rh = spectral::band_reconstruct(seq, false);
    for (int64_t p = 0; p < t; ++p) {
      lo[static_cast<size_t>(p * loc + l)] = rl[static_cast<size_t>(p)];
      hi[static_cast<size_t>(p * loc + l)] = rh[static_cast<size_t>(p)];
    }
  }
  for (int64_t p = 0; p < t; ++p) {
    data::write_pgm((fs::path(out_dir) / ("low_" + std::to_string(p) + ".pgm")).string(),
                    lo.data() + p * loc, h, w);
    data::write_pgm((fs::path(out_dir) / ("high_" + std::to_string(p) + ".pgm")).string(),
                    hi.data() + p * loc, h, w);
  }
}

struct ParamAnalysis {
  double mean_kl_student = 0.0;
  double mean_kl_baseline = 0.0;  // only when a baseline checkpoint was given
  bool has_baseline = false;
};

inline ParamAnalysis analyze_params(const std::string& teacher_ckpt,
                                    const std::string& student_ckpt,
                                    const std::string& baseline_ckpt, const std::string& out_dir,
                                    int64_t bins = 32, uint64_t seed = 0) {
  auto teacher = load_checkpoint(teacher_ckpt);
  auto student = load_checkpoint(student_ckpt);
  std::optional<models::StagedBackbone> baseline;
  if (!baseline_ckpt.empty()) baseline.emplace(load_checkpoint(baseline_ckpt));
  std::error_code ec;
  fs::create_directories(out_dir, ec);

  std::ofstream csv((fs::path(out_dir) / "param_distributions.csv").string());
  csv << "role,group,bin,probability\n";
  std::ofstream klcsv((fs::path(out_dir) / "param_kl.csv").string());
  klcsv << "group,kl_student,kl_baseline\n";

  ParamAnalysis res;
  res.has_baseline = baseline.has_value();
  const int64_t stages = student.num_stages();
  auto emit = [&](const char* role, int64_t g, const distill::ParameterDistribution& pd) {
    for (int64_t b = 0; b < pd.bins; ++b)
      csv << role << ',' << (g + 1) << ',' << b << ',' << pd.probs[static_cast<size_t>(b)] << '\n';
  };
  for (int64_t g = 0; g < stages; ++g) {
    const Tensor& tk = teacher.stage_kernel(g);
    const Tensor& sk = student.stage_kernel(g);
    int cs = static_cast<int>(sk.dims()[3]);
    int ct = static_cast<int>(tk.dims()[3]);
    auto sel = distill::sample_kernels(ct, cs, seed_combine(seed, static_cast<uint64_t>(g)));
    auto pd_t = distill::parameter_distribution(distill::kernel_slices(tk, sel), bins);
    auto pd_s =
        distill::parameter_distribution(distill::kernel_slices(sk, distill::all_channels(sk)), bins);
    emit("teacher", g, pd_t);
    emit("student", g, pd_s);
    double kl_s = distill::kl_divergence(pd_s.probs, pd_t.probs);
    res.mean_kl_student += kl_s;
    double kl_b = 0.0;
    if (baseline) {
      const Tensor& bk = baseline->stage_kernel(g);
      auto pd_b = distill::parameter_distribution(
          distill::kernel_slices(bk, distill::all_channels(bk)), bins);
      emit("baseline", g, pd_b);
      kl_b = distill::kl_divergence(pd_b.probs, pd_t.probs);
      res.mean_kl_baseline += kl_b;
    }
    klcsv << (g + 1) << ',' << kl_s << ',' << (baseline ? std::to_string(kl_b) : std::string())
          << '\n';
  }
  res.mean_kl_student /= static_cast<double>(stages);
  if (baseline) res.mean_kl_baseline /= static_cast<double>(stages);
  return res;
}

}  // namespace fpcd::harness
