#pragma once

// Deterministic synthetic video generator. Two class regimes:
//  - temporal: a bright shape moves along a class-specific direction; each
//    frame carries a short fading trail so motion direction is decodable
//    per frame (the consensus backbone is frame-order invariant).
//  - scene: the background texture indexes the class; shape motion random.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fpcd/error.hpp"
#include "fpcd/rng.hpp"
#include "fpcd/tensor.hpp"
#include "fpcd/tensor_io.hpp"

namespace fpcd::data {

enum class Regime { temporal, scene };

inline Regime regime_from_string(const std::string& s) {
  if (s == "temporal") return Regime::temporal;
  if (s == "scene") return Regime::scene;
  throw ConfigError("unknown regime: " + s);
}

inline std::string to_string(Regime r) { return r == Regime::temporal ? "temporal" : "scene"; }

struct DatasetConfig {
  Regime regime = Regime::temporal;
  int num_classes = 8;
  int clips_per_class = 250;
  int64_t t = 8, h = 32, w = 32;
  double sigma = 0.05;
  uint64_t master_seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("dataset: num_classes < 2");
    if (t < 2) throw ConfigError("dataset: T < 2");
    if (h < 16 || w < 16) throw ConfigError("dataset: frames too small");
    if (clips_per_class < 1) throw ConfigError("dataset: clips_per_class < 1");
  }
};

struct VideoClip {
  Tensor frames;  // [T,H,W,1], values in [0,1]
  int label = 0;
  uint64_t instance_seed = 0;
};

namespace detail {

struct ShapeSpec {
  bool disc = false;
  double half = 3.0;  // half-size / radius
};

inline void stamp(Tensor& frame, int64_t h, int64_t w, double cy, double cx,
                  const ShapeSpec& sp, double intensity) {
  int64_t y0 = static_cast<int64_t>(std::floor(cy - sp.half - 1));
  int64_t y1 = static_cast<int64_t>(std::ceil(cy + sp.half + 1));
  for (int64_t y = std::max<int64_t>(0, y0); y <= std::min(h - 1, y1); ++y)
    for (int64_t x = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - sp.half - 1)));
         x <= std::min(w - 1, static_cast<int64_t>(std::ceil(cx + sp.half + 1))); ++x) {
      double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      bool inside = sp.disc ? (dy * dy + dx * dx <= sp.half * sp.half)
                            : (std::fabs(dy) <= sp.half && std::fabs(dx) <= sp.half);
      if (inside) {
        double& px = frame[y * w + x];
        px = std::max(px, intensity);
      }
    }
}

}  // namespace detail

inline VideoClip generate_clip(const DatasetConfig& cfg, int class_id, uint64_t instance_seed) {
  cfg.validate();
  if (class_id < 0 || class_id >= cfg.num_classes)
    throw IndexError("generate_clip: class_id out of range");
  auto eng = make_engine(cfg.master_seed, 0x636c6970ULL, static_cast<uint64_t>(class_id),
                         instance_seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  const int64_t t = cfg.t, h = cfg.h, w = cfg.w;
  const double pi = std::numbers::pi;

  // Background: base level plus two sinusoidal gratings. In the scene regime
  // the first grating's orientation and frequency encode the class.
  double g1_theta, g1_freq;
  if (cfg.regime == Regime::scene) {
    g1_theta = pi * static_cast<double>(class_id) / static_cast<double>(cfg.num_classes);
    g1_freq = 2.0 + static_cast<double>(class_id % 4);
  } else {
    g1_theta = uni(eng) * pi;
    g1_freq = 1.0 + 3.0 * uni(eng);
  }
  double g1_phase = uni(eng) * 2.0 * pi;
  double g2_theta = uni(eng) * pi;
  double g2_freq = 1.0 + 3.0 * uni(eng);
  double g2_phase = uni(eng) * 2.0 * pi;
  // In the scene regime the class-coding grating must stay salient against
  // the pixel noise and the full-intensity distractor shape.
  double g1_amp = cfg.regime == Regime::scene ? 0.32 : 0.08;
  double g2_amp = cfg.regime == Regime::scene ? 0.05 : 0.08;

  Tensor bg({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double u1 = (std::cos(g1_theta) * x + std::sin(g1_theta) * y) / static_cast<double>(w);
      double u2 = (std::cos(g2_theta) * x + std::sin(g2_theta) * y) / static_cast<double>(w);
      bg[y * w + x] = 0.2 + g1_amp * std::sin(2.0 * pi * g1_freq * u1 + g1_phase) +
                      g2_amp * std::sin(2.0 * pi * g2_freq * u2 + g2_phase);
    }

  detail::ShapeSpec sp;
  sp.disc = uni(eng) < 0.5;
  sp.half = 3.0 + 1.0 * uni(eng);

  // Temporal regime: both the heading and the speed index the class, so the
  // trail geometry (orientation + ghost spacing) is decodable per frame and
  // the temporal frequency content of moving-edge responses is
  // class-specific.
  double angle, speed;
  if (cfg.regime == Regime::temporal) {
    angle = 2.0 * pi * static_cast<double>(class_id) / static_cast<double>(cfg.num_classes) +
            (uni(eng) - 0.5) * 0.15;
    speed = 1.5 + 1.1 * static_cast<double>(class_id) / static_cast<double>(cfg.num_classes) +
            0.15 * uni(eng);
  } else {
    angle = uni(eng) * 2.0 * pi;
    speed = 1.6 + 0.6 * uni(eng);
  }
  double vx = speed * std::cos(angle), vy = speed * std::sin(angle);

  // Keep the whole trajectory inside the frame.
  double margin = sp.half + 1.0;
  double span_x = vx * static_cast<double>(t - 1), span_y = vy * static_cast<double>(t - 1);
  double lo_x = margin + std::max(0.0, -span_x), hi_x = (w - 1 - margin) - std::max(0.0, span_x);
  double lo_y = margin + std::max(0.0, -span_y), hi_y = (h - 1 - margin) - std::max(0.0, span_y);
  if (lo_x > hi_x || lo_y > hi_y) throw ConfigError("generate_clip: frame too small for motion");
  double sx = lo_x + (hi_x - lo_x) * uni(eng);
  double sy = lo_y + (hi_y - lo_y) * uni(eng);

  auto noise_eng = make_engine(cfg.master_seed, 0x6e6f6973ULL, static_cast<uint64_t>(class_id),
                               instance_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  VideoClip clip;
  clip.label = class_id;
  clip.instance_seed = instance_seed;
  clip.frames = Tensor({t, h, w, 1});
  Tensor frame({h, w});
  for (int64_t f = 0; f < t; ++f) {
    frame = bg;
    double cx = sx + vx * static_cast<double>(f);
    double cy = sy + vy * static_cast<double>(f);
    // fading trail behind the head encodes the motion direction per frame
    detail::stamp(frame, h, w, cy - 2.0 * vy, cx - 2.0 * vx, sp, 0.55);
    detail::stamp(frame, h, w, cy - vy, cx - vx, sp, 0.75);
    detail::stamp(frame, h, w, cy, cx, sp, 1.0);
    for (int64_t i = 0; i < h * w; ++i) {
      double v = frame[i] + cfg.sigma * gauss(noise_eng);
      clip.frames[f * h * w + i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return clip;
}

// ---- on-disk dataset ----

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split: " + s);
}

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int label = 0;
  Split split = Split::train;
};

// 70/15/15 by instance seed, class-balanced; the 15% remainder is spread
// over the leading classes so the totals come out exact.
inline Split split_of(const DatasetConfig& cfg, int class_id, uint64_t instance_seed) {
  const int n = cfg.clips_per_class;
  const int train_n = (n * 70) / 100;
  const int base_val = (n * 15) / 100;
  const int total_val = (cfg.num_classes * n * 15) / 100;
  const int extra = total_val - cfg.num_classes * base_val;
  const int val_n = base_val + (class_id < extra ? 1 : 0);
  const auto i = static_cast<int>(instance_seed);
  if (i < train_n) return Split::train;
  if (i < train_n + val_n) return Split::val;
  return Split::test;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest: " + path);
  for (const auto& e : entries)
    f << e.path << '\t' << e.label << '\t' << to_string(e.split) << '\n';
  if (!f) throw IoError("manifest write failed: " + path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto t1 = line.find('\t');
    auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw IoError("malformed manifest line in " + path + ": " + line);
    ManifestEntry e;
    e.path = line.substr(0, t1);
    e.label = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
    e.split = split_from_string(line.substr(t2 + 1));
    out.push_back(std::move(e));
  }
  return out;
}

// Writes one FPCD tensor file per clip plus manifest.tsv; also dumps the
// generating config as dataset.json-ish key=value lines for reloading.
inline std::vector<ManifestEntry> generate_dataset(const DatasetConfig& cfg,
                                                   const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "clips", ec);
  if (ec) throw IoError("cannot create dataset dir: " + out_dir);
  std::vector<ManifestEntry> entries;
  for (int c = 0; c < cfg.num_classes; ++c)
    for (int i = 0; i < cfg.clips_per_class; ++i) {
      auto clip = generate_clip(cfg, c, static_cast<uint64_t>(i));
      std::string rel = "clips/c" + std::to_string(c) + "_i" + std::to_string(i) + ".fpcd";
      io::save_tensor((fs::path(out_dir) / rel).string(), clip.frames);
      entries.push_back({rel, c, split_of(cfg, c, static_cast<uint64_t>(i))});
    }
  write_manifest((fs::path(out_dir) / "manifest.tsv").string(), entries);
  std::ofstream meta((fs::path(out_dir) / "config.tsv").string());
  meta << "regime\t" << to_string(cfg.regime) << "\nnum_classes\t" << cfg.num_classes
       << "\nclips_per_class\t" << cfg.clips_per_class << "\nT\t" << cfg.t << "\nH\t" << cfg.h
       << "\nW\t" << cfg.w << "\nsigma\t" << cfg.sigma << "\nmaster_seed\t" << cfg.master_seed
       << "\n";
  return entries;
}

struct LoadedClip {
  Tensor frames;
  int label = 0;
};

inline std::vector<LoadedClip> load_split(const std::string& dataset_dir, Split split) {
  namespace fs = std::filesystem;
  auto entries = read_manifest((fs::path(dataset_dir) / "manifest.tsv").string());
  std::vector<LoadedClip> out;
  for (const auto& e : entries)
    if (e.split == split)
      out.push_back({io::load_tensor((fs::path(dataset_dir) / e.path).string()), e.label});
  if (out.empty()) throw ConfigError("no clips for split in " + dataset_dir);
  return out;
}

// 8-bit binary PGM, min-max normalized.
inline void write_pgm(const std::string& path, const double* img, int64_t h, int64_t w) {
  double lo = img[0], hi = img[0];
  for (int64_t i = 0; i < h * w; ++i) {
    lo = std::min(lo, img[i]);
    hi = std::max(hi, img[i]);
  }
  double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write pgm: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (int64_t i = 0; i < h * w; ++i) {
    unsigned char b = static_cast<unsigned char>(std::lround((img[i] - lo) * scale));
    f.write(reinterpret_cast<const char*>(&b), 1);
  }
}

}  // namespace fpcd::data
