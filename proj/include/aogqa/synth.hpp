#pragma once

// Synthetic feature volumes: each part template is a fixed constellation of
// isotropic Gaussian bumps placed relative to the part center, on top of
// uniform background noise. Used as a desk-scale stand-in for CNN activations.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "annotation.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "random.hpp"

namespace aogqa {

struct SynthLayer {
  int layer = 0;
  int channels = 1;
  float stride_px = 16.0f;
  float rf_size_px = 32.0f;
  float offset_px = 8.0f;
};

struct SynthBump {
  int layer = 0;
  int channel = 0;
  double dx = 0.0;  // px from part center
  double dy = 0.0;
  double amplitude = 1.0;
};

struct SynthTemplate {
  std::string label;
  double frequency = 1.0;
  double box_w = 48.0;
  double box_h = 48.0;
  std::vector<SynthBump> bumps;
};

struct SynthConfig {
  int image_count = 20;
  int image_w = 224;
  int image_h = 224;
  std::vector<SynthLayer> layers{SynthLayer{}};
  std::vector<SynthTemplate> templates;
  double bump_sigma_cells = 1.5;
  double noise = 0.0;             // uniform [0, noise) added to every cell
  double center_jitter_px = 0.0;  // part center uniform in image center +- jitter
  double bump_jitter_px = 0.0;    // per-bump positional jitter
  double part_absent_fraction = 0.0;
  double flip_fraction = 0.0;
  double outlier_fraction = 0.0;   // objects whose part sits away from the bump constellation
  double outlier_shift_px = 0.0;   // distance of that displacement
  double outlier_clutter = 0.0;    // amplitude of extra top-layer bumps on those objects
  int outlier_clutter_bumps = 4;
  std::string id_prefix = "img";

  void validate() const {
    if (image_count <= 0) throw ConfigError("synth: image_count must be > 0");
    if (templates.empty()) throw ConfigError("synth: at least one template is required");
    if (layers.empty()) throw ConfigError("synth: at least one layer is required");
    if (image_w <= 0 || image_h <= 0) throw ConfigError("synth: image size must be positive");
    if (bump_sigma_cells <= 0.0) throw ConfigError("synth: bump_sigma_cells must be > 0");
    if (noise < 0.0) throw ConfigError("synth: noise must be >= 0");
    double total = 0.0;
    for (const auto& t : templates) {
      if (t.frequency < 0.0) throw ConfigError("synth: template frequency must be >= 0");
      if (t.box_w <= 0.0 || t.box_h <= 0.0) throw ConfigError("synth: template box must be non-degenerate");
      if (t.box_w > image_w || t.box_h > image_h) throw ConfigError("synth: template box larger than image");
      for (const auto& b : t.bumps) {
        bool ok = false;
        for (const auto& l : layers) ok = ok || (l.layer == b.layer && b.channel >= 0 && b.channel < l.channels);
        if (!ok) throw ConfigError("synth: bump references a missing slice in template '" + t.label + "'");
      }
      total += t.frequency;
    }
    if (!(total > 0.0)) throw ConfigError("synth: template frequencies sum to zero");
    for (const auto& l : layers)
      if (l.channels <= 0 || l.stride_px <= 0.0f || l.rf_size_px < l.stride_px)
        throw ConfigError("synth: invalid layer geometry");
  }

  /// The benchmark dataset used for the active-vs-random annotation-efficiency comparison.
  static SynthConfig standard_benchmark() {
    SynthConfig c;
    c.image_count = 200;
    c.image_w = 224;
    c.image_h = 224;
    c.layers = {SynthLayer{0, 8, 8.0f, 24.0f, 4.0f}, SynthLayer{1, 16, 16.0f, 48.0f, 8.0f}};
    c.templates = {
        SynthTemplate{"frontal", 0.6, 56.0, 48.0,
                      {{1, 0, 0.0, -16.0, 1.0}, {1, 1, -24.0, 16.0, 1.0}, {1, 2, 24.0, 16.0, 1.0},
                       {0, 0, 0.0, 0.0, 1.0}}},
        SynthTemplate{"profile", 0.3, 48.0, 56.0,
                      {{1, 3, -16.0, 0.0, 1.0}, {1, 4, 16.0, -24.0, 1.0}, {1, 5, 16.0, 24.0, 1.0},
                       {0, 1, 0.0, 0.0, 1.0}}},
        SynthTemplate{"rear", 0.1, 64.0, 40.0,
                      {{1, 6, -24.0, 0.0, 1.0}, {1, 7, 24.0, 0.0, 1.0}, {1, 8, 0.0, 16.0, 1.0},
                       {0, 2, 0.0, 0.0, 1.0}}},
    };
    c.bump_sigma_cells = 1.5;
    c.noise = 0.5;
    c.center_jitter_px = 40.0;
    c.bump_jitter_px = 8.0;
    c.part_absent_fraction = 0.05;
    c.outlier_fraction = 0.3;
    c.outlier_shift_px = 40.0;
    c.outlier_clutter = 2.0;
    return c;
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.layers)
    layers.push_back({{"layer", l.layer}, {"channels", l.channels}, {"stride_px", l.stride_px},
                      {"rf_size_px", l.rf_size_px}, {"offset_px", l.offset_px}});
  nlohmann::json templates = nlohmann::json::array();
  for (const auto& t : c.templates) {
    nlohmann::json bumps = nlohmann::json::array();
    for (const auto& b : t.bumps)
      bumps.push_back({{"layer", b.layer}, {"channel", b.channel}, {"dx", b.dx}, {"dy", b.dy},
                       {"amplitude", b.amplitude}});
    templates.push_back({{"label", t.label}, {"frequency", t.frequency}, {"box_w", t.box_w}, {"box_h", t.box_h},
                         {"bumps", bumps}});
  }
  return {{"image_count", c.image_count},
          {"image_w", c.image_w},
          {"image_h", c.image_h},
          {"layers", layers},
          {"templates", templates},
          {"bump_sigma_cells", c.bump_sigma_cells},
          {"noise", c.noise},
          {"center_jitter_px", c.center_jitter_px},
          {"bump_jitter_px", c.bump_jitter_px},
          {"part_absent_fraction", c.part_absent_fraction},
          {"flip_fraction", c.flip_fraction},
          {"outlier_fraction", c.outlier_fraction},
          {"outlier_shift_px", c.outlier_shift_px},
          {"outlier_clutter", c.outlier_clutter},
          {"outlier_clutter_bumps", c.outlier_clutter_bumps},
          {"id_prefix", c.id_prefix}};
}

/// Missing keys keep the defaults of `base`.
inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {}) {
  try {
    base.image_count = j.value("image_count", base.image_count);
    base.image_w = j.value("image_w", base.image_w);
    base.image_h = j.value("image_h", base.image_h);
    if (j.contains("layers")) {
      base.layers.clear();
      for (const auto& l : j.at("layers"))
        base.layers.push_back({l.at("layer").get<int>(), l.at("channels").get<int>(), l.value("stride_px", 16.0f),
                               l.value("rf_size_px", 32.0f), l.value("offset_px", 8.0f)});
    }
    if (j.contains("templates")) {
      base.templates.clear();
      for (const auto& t : j.at("templates")) {
        SynthTemplate st{t.at("label").get<std::string>(), t.value("frequency", 1.0), t.value("box_w", 48.0),
                         t.value("box_h", 48.0), {}};
        for (const auto& b : t.value("bumps", nlohmann::json::array()))
          st.bumps.push_back({b.at("layer").get<int>(), b.at("channel").get<int>(), b.value("dx", 0.0),
                              b.value("dy", 0.0), b.value("amplitude", 1.0)});
        base.templates.push_back(std::move(st));
      }
    }
    base.bump_sigma_cells = j.value("bump_sigma_cells", base.bump_sigma_cells);
    base.noise = j.value("noise", base.noise);
    base.center_jitter_px = j.value("center_jitter_px", base.center_jitter_px);
    base.bump_jitter_px = j.value("bump_jitter_px", base.bump_jitter_px);
    base.part_absent_fraction = j.value("part_absent_fraction", base.part_absent_fraction);
    base.flip_fraction = j.value("flip_fraction", base.flip_fraction);
    base.outlier_fraction = j.value("outlier_fraction", base.outlier_fraction);
    base.outlier_shift_px = j.value("outlier_shift_px", base.outlier_shift_px);
    base.outlier_clutter = j.value("outlier_clutter", base.outlier_clutter);
    base.outlier_clutter_bumps = j.value("outlier_clutter_bumps", base.outlier_clutter_bumps);
    base.id_prefix = j.value("id_prefix", base.id_prefix);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  return base;
}

struct SynthOutput {
  Dataset dataset;
  GroundTruth truth;
  std::set<std::string> atypical;  // objects generated with a displaced part
};

namespace detail {

inline std::string synth_image_id(const std::string& prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", i);
  return prefix + buf;
}

inline int grid_cells(int image_px, float stride) {
  return std::max(1, static_cast<int>(std::floor(static_cast<double>(image_px) / stride)));
}

}  // namespace detail

/// Deterministic in (config, seed).
inline SynthOutput synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  double total_freq = 0.0;
  for (const auto& t : cfg.templates) total_freq += t.frequency;

  DatasetManifest manifest;
  manifest.category = "synthetic";
  std::vector<FeatureVolume> volumes;
  GroundTruth truth;
  std::set<std::string> atypical;

  const double sigma2 = 2.0 * cfg.bump_sigma_cells * cfg.bump_sigma_cells;
  int top_layer = cfg.layers.front().layer, top_channels = cfg.layers.front().channels;
  for (const auto& l : cfg.layers)
    if (l.layer > top_layer) top_layer = l.layer, top_channels = l.channels;
  auto add_bump = [&](FeatureVolume& v, int layer, int channel, double bx, double by, double amplitude) {
    for (auto& s : v.slices) {
      if (s.meta.layer != layer || s.meta.channel != channel) continue;
      const double gx = (bx - s.meta.offset_px) / s.meta.stride_px;
      const double gy = (by - s.meta.offset_px) / s.meta.stride_px;
      for (int r = 0; r < s.meta.grid_h; ++r)
        for (int c = 0; c < s.meta.grid_w; ++c) {
          const double d2 = (r - gy) * (r - gy) + (c - gx) * (c - gx);
          s.at({r, c}) += static_cast<float>(amplitude * std::exp(-d2 / sigma2));
        }
    }
  };
  for (int i = 0; i < cfg.image_count; ++i) {
    FeatureVolume v;
    v.image_id = detail::synth_image_id(cfg.id_prefix, i);
    v.image_w = static_cast<std::uint32_t>(cfg.image_w);
    v.image_h = static_cast<std::uint32_t>(cfg.image_h);
    for (const auto& l : cfg.layers)
      for (int ch = 0; ch < l.channels; ++ch) {
        Slice s;
        s.meta = {l.layer, ch, detail::grid_cells(cfg.image_h, l.stride_px), detail::grid_cells(cfg.image_w, l.stride_px),
                  l.stride_px, l.rf_size_px, l.offset_px};
        s.values.assign(static_cast<std::size_t>(s.meta.grid_h) * s.meta.grid_w, 0.0f);
        v.slices.push_back(std::move(s));
      }

    const bool absent = rng.uniform01() < cfg.part_absent_fraction;
    std::optional<PartAnnotation> gt;
    if (!absent) {
      double pick = rng.uniform01() * total_freq;
      std::size_t ti = 0;
      for (; ti + 1 < cfg.templates.size(); ++ti) {
        if (pick < cfg.templates[ti].frequency) break;
        pick -= cfg.templates[ti].frequency;
      }
      const auto& tpl = cfg.templates[ti];
      const double half_w = tpl.box_w / 2.0, half_h = tpl.box_h / 2.0;
      Point center{cfg.image_w / 2.0 + rng.uniform(-cfg.center_jitter_px, cfg.center_jitter_px),
                   cfg.image_h / 2.0 + rng.uniform(-cfg.center_jitter_px, cfg.center_jitter_px)};
      center.x = std::clamp(center.x, half_w, cfg.image_w - half_w);
      center.y = std::clamp(center.y, half_h, cfg.image_h - half_h);
      for (const auto& b : tpl.bumps)
        add_bump(v, b.layer, b.channel, center.x + b.dx + rng.uniform(-cfg.bump_jitter_px, cfg.bump_jitter_px),
                 center.y + b.dy + rng.uniform(-cfg.bump_jitter_px, cfg.bump_jitter_px), b.amplitude);
      Point part = center;
      if (cfg.outlier_fraction > 0.0 && rng.uniform01() < cfg.outlier_fraction) {
        const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        part.x = std::clamp(center.x + cfg.outlier_shift_px * std::cos(angle), half_w, cfg.image_w - half_w);
        part.y = std::clamp(center.y + cfg.outlier_shift_px * std::sin(angle), half_h, cfg.image_h - half_h);
        atypical.insert(v.image_id);
        for (int k = 0; k < cfg.outlier_clutter_bumps && cfg.outlier_clutter > 0.0; ++k) {
          const int ch = static_cast<int>(rng.index(static_cast<std::size_t>(top_channels)));
          add_bump(v, top_layer, ch, rng.uniform(0.0, cfg.image_w), rng.uniform(0.0, cfg.image_h), cfg.outlier_clutter);
        }
      }
      gt = PartAnnotation{v.image_id, Box::centered(part, tpl.box_w, tpl.box_h), tpl.label, false};
    }
    if (cfg.noise > 0.0)
      for (auto& s : v.slices)
        for (auto& x : s.values) x += static_cast<float>(rng.uniform(0.0, cfg.noise));

    if (gt && cfg.flip_fraction > 0.0 && rng.uniform01() < cfg.flip_fraction) {
      v = mirror_volume(v);
      gt->part_box = mirror_box(gt->part_box, cfg.image_w);
      gt->flipped = true;
    }
    truth.by_image[v.image_id] = gt;
    manifest.entries.push_back({v.image_id, v.image_id + ".aogf", std::nullopt});
    volumes.push_back(std::move(v));
  }
  return {Dataset(std::move(manifest), std::move(volumes)), std::move(truth), std::move(atypical)};
}

}  // namespace aogqa
