#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fpcd/harness.hpp"
#include "testutil.hpp"

using namespace fpcd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  EXPECT_TRUE(f.good()) << path;
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

struct HarnessEnv : ::testing::Environment {
  static inline fs::path root;
  static inline std::string dataset;
  static inline std::string teacher_ckpt;

  void SetUp() override {
    root = fs::temp_directory_path() / "fpcd_harness_test";
    fs::remove_all(root);
    fs::create_directories(root);
    data::DatasetConfig cfg;
    cfg.num_classes = 2;
    cfg.clips_per_class = 10;
    cfg.t = 4;
    cfg.h = 20;
    cfg.w = 20;
    cfg.master_seed = 21;
    dataset = (root / "data").string();
    data::generate_dataset(cfg, dataset);

    harness::RunConfig tc;
    tc.dataset = dataset;
    tc.out_dir = (root / "teacher").string();
    tc.widths = {2, 3, 4, 5};
    tc.optim.epochs = 2;
    tc.optim.lr = 0.05;
    tc.optim.batch_size = 8;
    tc.optim.decay_epochs = {};
    tc.seed = 1;
    auto r = harness::train_teacher(tc);
    teacher_ckpt = r.checkpoint_dir;
  }

  void TearDown() override { fs::remove_all(root); }
};

[[maybe_unused]] const auto* env =
    ::testing::AddGlobalTestEnvironment(new HarnessEnv);

harness::RunConfig student_config(const std::string& out, uint64_t seed) {
  harness::RunConfig c;
  c.dataset = HarnessEnv::dataset;
  c.out_dir = (HarnessEnv::root / out).string();
  c.teacher_checkpoint = HarnessEnv::teacher_ckpt;
  c.widths = {2, 2, 3, 4};
  c.optim.epochs = 3;
  c.optim.lr = 0.05;
  c.optim.batch_size = 8;
  c.optim.decay_epochs = {};
  c.schedule.n1 = 1;
  c.schedule.n2 = 2;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(HarnessConfig, JsonAndOverrides) {
  nlohmann::json j = {{"dataset", "d"},
                      {"optim", {{"lr", 0.5}, {"epochs", 7}}},
                      {"ablation", {{"fsd", "low"}, {"pdd", false}}}};
  harness::apply_override(j, "optim.lr=0.25");
  harness::apply_override(j, "out_dir=somewhere");
  harness::apply_override(j, "ablation.cl=false");
  harness::RunConfig c;
  harness::apply_json(c, j);
  EXPECT_EQ(c.dataset, "d");
  EXPECT_EQ(c.out_dir, "somewhere");
  EXPECT_DOUBLE_EQ(c.optim.lr, 0.25);
  EXPECT_EQ(c.optim.epochs, 7);
  EXPECT_EQ(c.fsd, "low");
  EXPECT_FALSE(c.pdd);
  EXPECT_FALSE(c.cl);
  EXPECT_THROW(harness::apply_override(j, "nokeyvalue"), ConfigError);

  harness::RunConfig bad;
  bad.dataset = "d";
  bad.out_dir = "o";
  bad.fsd = "sideways";
  EXPECT_THROW(bad.validate(harness::Mode::train_student_baseline), ConfigError);
  harness::RunConfig no_teacher;
  no_teacher.dataset = "d";
  no_teacher.out_dir = "o";
  EXPECT_THROW(no_teacher.validate(harness::Mode::distill_fpcd), ConfigError);
}

TEST(HarnessConfig, ScheduleResolution) {
  harness::RunConfig c;
  c.optim.epochs = 20;
  auto s = c.resolved_schedule();
  EXPECT_EQ(s.n1, 6);
  EXPECT_EQ(s.n2, 14);
  c.schedule.n1 = 2;
  c.schedule.n2 = 5;
  s = c.resolved_schedule();
  EXPECT_EQ(s.n1, 2);
  EXPECT_EQ(s.n2, 5);
}

TEST(Harness, TeacherMetricsAndCheckpoint) {
  std::string metrics = slurp((HarnessEnv::root / "teacher" / "metrics.csv").string());
  std::istringstream is(metrics);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "epoch,loss_cls,loss_s,loss_p,f_n,gate_fraction,train_top1,val_top1");
  int rows = 0;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 2);

  auto model = harness::load_checkpoint(HarnessEnv::teacher_ckpt);
  EXPECT_EQ(model.config().widths, (std::vector<int64_t>{2, 3, 4, 5}));
  EXPECT_EQ(model.config().convs_per_stage, 2);
  auto val = data::load_split(HarnessEnv::dataset, data::Split::val);
  auto ev = harness::evaluate(model, val);
  EXPECT_GE(ev.top1, 0.0);
  EXPECT_LE(ev.top1, 1.0);
  EXPECT_GE(ev.top5, ev.top1);
  EXPECT_EQ(ev.top5, 1.0);  // 2 classes -> top-2 always hits
}

TEST(Harness, CheckpointRoundTrip) {
  auto model = harness::load_checkpoint(HarnessEnv::teacher_ckpt);
  std::string dir = (HarnessEnv::root / "ckpt_copy").string();
  harness::save_checkpoint(dir, model);
  auto again = harness::load_checkpoint(dir);
  auto val = data::load_split(HarnessEnv::dataset, data::Split::val);
  Tensor a = harness::model_logits(model, val[0].frames);
  Tensor b = harness::model_logits(again, val[0].frames);
  for (int64_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_THROW(harness::load_checkpoint((HarnessEnv::root / "nope").string()), IoError);
}

TEST(Harness, TrainingIsDeterministic) {
  auto c1 = student_config("det1", 3);
  auto c2 = student_config("det2", 3);
  auto r1 = harness::train_student(c1, harness::Mode::train_student_baseline);
  auto r2 = harness::train_student(c2, harness::Mode::train_student_baseline);
  EXPECT_EQ(slurp(r1.metrics_path), slurp(r2.metrics_path));
  EXPECT_EQ(r1.final_val_top1, r2.final_val_top1);
}

TEST(Harness, FlagsOffDistillMatchesBaseline) {
  auto cb = student_config("base", 5);
  auto cd = student_config("alloff", 5);
  cd.fsd = "off";
  cd.pdd = false;
  cd.cl = false;
  auto rb = harness::train_student(cb, harness::Mode::train_student_baseline);
  auto rd = harness::train_student(cd, harness::Mode::distill_fpcd);
  EXPECT_EQ(slurp(rb.metrics_path), slurp(rd.metrics_path));
}

TEST(Harness, FullDistillRuns) {
  auto c = student_config("full", 7);
  auto r = harness::train_student(c, harness::Mode::distill_fpcd);
  EXPECT_EQ(r.rows.size(), 3u);
  auto sched = c.resolved_schedule();
  for (const auto& row : r.rows) {
    EXPECT_NEAR(row.f_n, collab::schedule_weight(row.epoch, sched, 1.0), 1e-12);
    EXPECT_GE(row.gate_fraction, 0.0);
    EXPECT_LE(row.gate_fraction, 1.0);
    EXPECT_GE(row.loss_cls, 0.0);
    EXPECT_GE(row.loss_p, 0.0);
  }
  EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "confidence_profile.csv"));
  EXPECT_TRUE(fs::exists(r.checkpoint_dir));
  // student checkpoint loads with student geometry
  auto m = harness::load_checkpoint(r.checkpoint_dir);
  EXPECT_EQ(m.config().convs_per_stage, 1);
}

TEST(Harness, SimpleKdRuns) {
  auto c = student_config("kd", 9);
  c.optim.epochs = 2;
  auto r = harness::train_student(c, harness::Mode::distill_simple_kd);
  EXPECT_EQ(r.rows.size(), 2u);
  for (const auto& row : r.rows) EXPECT_GE(row.loss_s, -1e-9);
}

TEST(Harness, AnalyzeSpectrumOutputs) {
  std::string out = (HarnessEnv::root / "spec").string();
  auto entries = data::read_manifest((fs::path(HarnessEnv::dataset) / "manifest.tsv").string());
  std::string clip = (fs::path(HarnessEnv::dataset) / entries[0].path).string();
  harness::analyze_spectrum(HarnessEnv::teacher_ckpt, clip, out);
  std::string csv = slurp((fs::path(out) / "band_energy.csv").string());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "stage,bin,normalized_frequency,mean_energy");
  // stage 0 (input) through stage 4, K=3 bins each at T=4
  int lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  EXPECT_EQ(lines, 1 + 5 * 3);
  for (int f = 0; f < 4; ++f) {
    EXPECT_TRUE(fs::exists(fs::path(out) / ("low_" + std::to_string(f) + ".pgm")));
    EXPECT_TRUE(fs::exists(fs::path(out) / ("high_" + std::to_string(f) + ".pgm")));
  }
}

TEST(Harness, AnalyzeParamsOutputs) {
  auto c = student_config("ap_student", 11);
  c.optim.epochs = 1;
  auto r = harness::train_student(c, harness::Mode::train_student_baseline);
  std::string out = (HarnessEnv::root / "params").string();
  auto res = harness::analyze_params(HarnessEnv::teacher_ckpt, r.checkpoint_dir,
                                     r.checkpoint_dir, out, 4, 1);
  EXPECT_TRUE(res.has_baseline);
  EXPECT_GE(res.mean_kl_student, 0.0);
  EXPECT_NEAR(res.mean_kl_student, res.mean_kl_baseline, 1e-12);  // same checkpoint twice
  std::string csv = slurp((fs::path(out) / "param_distributions.csv").string());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "role,group,bin,probability");
  EXPECT_TRUE(fs::exists(fs::path(out) / "param_kl.csv"));
}
