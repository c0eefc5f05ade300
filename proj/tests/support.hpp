#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "aogqa/active_qa.hpp"
#include "aogqa/aog.hpp"
#include "aogqa/feature_store.hpp"
#include "aogqa/random.hpp"
#include "aogqa/synth.hpp"

namespace aogqa::testing {

inline Slice make_slice(int layer, int channel, int grid_h, int grid_w, float stride, float rf, float offset,
                        std::vector<float> values = {}) {
  Slice s;
  s.meta = {layer, channel, grid_h, grid_w, stride, rf, offset};
  if (values.empty()) values.assign(static_cast<std::size_t>(grid_h) * grid_w, 0.0f);
  s.values = std::move(values);
  return s;
}

inline FeatureVolume make_volume(std::string id, std::uint32_t w, std::uint32_t h, std::vector<Slice> slices) {
  FeatureVolume v;
  v.image_id = std::move(id);
  v.image_w = w;
  v.image_h = h;
  v.slices = std::move(slices);
  return v;
}

/// Volume with `channels` random slices per layer; layer l has stride 8 * 2^l.
inline FeatureVolume random_volume(Rng& rng, const std::string& id, int layers, int channels, std::uint32_t size = 64) {
  std::vector<Slice> slices;
  for (int l = 0; l < layers; ++l) {
    const float stride = 8.0f * static_cast<float>(1 << l);
    const int g = std::max(1, static_cast<int>(size / stride));
    for (int c = 0; c < channels; ++c) {
      auto s = make_slice(l, c, g, g, stride, 2.0f * stride, stride / 2.0f);
      for (auto& x : s.values) x = static_cast<float>(rng.uniform(0.0, 4.0));
      slices.push_back(std::move(s));
    }
  }
  return make_volume(id, size, size, std::move(slices));
}

/// Score of a template by enumeration: every unit of every window, then every
/// integer center covering the votes.
inline double enumerate_template(const FeatureVolume& v, const PartTemplate& t, const ChannelStats& stats,
                                 double w_def) {
  std::vector<Point> unit_pos;
  double unit_sum = 0.0;
  for (const auto& p : t.patterns) {
    const Slice& s = v.slice(p.key());
    double best = -std::numeric_limits<double>::infinity();
    GridPos arg{};
    for (int r = 0; r < s.meta.grid_h; ++r)
      for (int c = 0; c < s.meta.grid_w; ++c) {
        if (std::abs(r - p.mu.row) > p.window_radius || std::abs(c - p.mu.col) > p.window_radius) continue;
        const auto& m = stats.at(p.key());
        const double z = m.stddev > 0.0 ? (s.at({r, c}) - m.mean) / m.stddev : 0.0;
        const double dr = r - p.mu.row, dc = c - p.mu.col;
        const double sc = z - w_def * (dr * dr + dc * dc) / ((p.window_radius + 1.0) * (p.window_radius + 1.0));
        if (sc > best) {
          best = sc;
          arg = {r, c};
        }
      }
    unit_sum += best;
    unit_pos.push_back({s.meta.offset_px + arg.col * s.meta.stride_px, s.meta.offset_px + arg.row * s.meta.stride_px});
  }
  double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
  for (std::size_t k = 0; k < unit_pos.size(); ++k) {
    const Point vote{unit_pos[k].x - t.patterns[k].delta_bar.x, unit_pos[k].y - t.patterns[k].delta_bar.y};
    lo_x = std::min(lo_x, vote.x), hi_x = std::max(hi_x, vote.x);
    lo_y = std::min(lo_y, vote.y), hi_y = std::max(hi_y, vote.y);
  }
  double best = -std::numeric_limits<double>::infinity();
  for (int x = static_cast<int>(std::floor(lo_x)) - 1; x <= static_cast<int>(std::ceil(hi_x)) + 1; ++x)
    for (int y = static_cast<int>(std::floor(lo_y)) - 1; y <= static_cast<int>(std::ceil(hi_y)) + 1; ++y) {
      double sc = unit_sum;
      for (std::size_t k = 0; k < unit_pos.size(); ++k) {
        const auto& p = t.patterns[k];
        const double ex = unit_pos[k].x - x - p.delta_bar.x, ey = unit_pos[k].y - y - p.delta_bar.y;
        sc -= (ex * ex + ey * ey) / (2.0 * p.sigma_s * p.sigma_s);
      }
      best = std::max(best, sc);
    }
  return best;
}

inline double enumerate_parse(const FeatureVolume& v, const AndOrGraph& aog, const ChannelStats& stats) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& t : aog.templates) best = std::max(best, enumerate_template(v, t, stats, aog.config.w_def));
  return best;
}

/// Random AOG over `v`'s slices: up to 3 templates, up to 4 patterns, windows up to 3x3.
inline AndOrGraph random_aog(Rng& rng, const FeatureVolume& v) {
  AndOrGraph aog;
  aog.part_name = "part";
  const int templates = 1 + static_cast<int>(rng.index(3));
  for (int t = 0; t < templates; ++t) {
    PartTemplate pt;
    pt.template_id = t;
    pt.label = "t" + std::to_string(t);
    pt.region_w = rng.uniform(8.0, 32.0);
    pt.region_h = rng.uniform(8.0, 32.0);
    const int patterns = 1 + static_cast<int>(rng.index(4));
    const double sigma = rng.uniform(5.0, 30.0);
    for (int k = 0; k < patterns; ++k) {
      const auto& s = v.slices[rng.index(v.slices.size())];
      LatentPattern p;
      p.pattern_id = t * 100000 + k;
      p.layer = s.meta.layer;
      p.channel = s.meta.channel;
      p.mu = {static_cast<int>(rng.index(static_cast<std::uint64_t>(s.meta.grid_h))),
              static_cast<int>(rng.index(static_cast<std::uint64_t>(s.meta.grid_w)))};
      p.window_radius = static_cast<int>(rng.index(2));
      p.delta_bar = {rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0)};
      p.sigma_s = sigma;
      pt.patterns.push_back(p);
    }
    aog.templates.push_back(pt);
  }
  return aog;
}

/// Small three-template world that keeps QA tests fast.
inline SynthConfig tiny_config(int images = 40) {
  SynthConfig c;
  c.image_count = images;
  c.image_w = 96;
  c.image_h = 96;
  c.layers = {SynthLayer{0, 4, 8.0f, 16.0f, 4.0f}, SynthLayer{1, 6, 16.0f, 32.0f, 8.0f}};
  c.templates = {
      SynthTemplate{"a", 0.5, 24.0, 24.0, {{1, 0, -16.0, 0.0, 1.0}, {1, 1, 16.0, 0.0, 1.0}, {0, 0, 0.0, 0.0, 1.0}}},
      SynthTemplate{"b", 0.3, 24.0, 24.0, {{1, 2, 0.0, -16.0, 1.0}, {1, 3, 0.0, 16.0, 1.0}, {0, 1, 0.0, 0.0, 1.0}}},
      SynthTemplate{"c", 0.2, 24.0, 24.0, {{1, 4, -16.0, 16.0, 1.0}, {1, 5, 16.0, -16.0, 1.0}, {0, 2, 0.0, 0.0, 1.0}}},
  };
  c.noise = 0.2;
  c.center_jitter_px = 12.0;
  c.bump_jitter_px = 2.0;
  c.part_absent_fraction = 0.1;
  return c;
}

inline MiningConfig tiny_mining() {
  MiningConfig m;
  m.n = 3;
  m.window_radius = 2;
  return m;
}

struct TinyWorld {
  std::shared_ptr<const QaEnvironment> env;
  GroundTruth truth;
};

inline TinyWorld tiny_world(std::uint64_t seed, int images = 40, double alpha = 4.0) {
  auto data = synth_generate(tiny_config(images), seed);
  return {std::make_shared<const QaEnvironment>(std::move(data.dataset), std::nullopt, tiny_mining(), alpha),
          std::move(data.truth)};
}

inline QaConfig tiny_qa(std::uint64_t seed = 1) {
  QaConfig c;
  c.seed = seed;
  c.mining = tiny_mining();
  return c;
}

}  // namespace aogqa::testing
