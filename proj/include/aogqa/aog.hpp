#pragma once

// Four-layer And-Or graph and hierarchical part parsing.
//
//   semantic part (OR)  ->  part templates (AND)  ->  latent patterns (OR)  ->  CNN units
//
// Parsing is bottom-up: every latent pattern independently picks its best
// unit inside its deformation window, each template places the part center at
// the argmax of its summed spatial-compatibility terms, and the semantic part
// keeps the best-scoring template.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "feature_store.hpp"
#include "geometry.hpp"
#include "parallel.hpp"

namespace aogqa {

/// Mining and scoring hyper-parameters. Echoed into every AndOrGraph.
struct MiningConfig {
  int n = 32;                          // latent patterns per template
  int window_radius = 4;               // deformation window is (2r+1)^2 cells
  double sigma_s_fraction = 0.15;      // sigma_s = fraction * image diagonal
  double w_def = 0.5;                  // deformation penalty weight in unit scores
  double local_weight = 1.0;           // weight of the all-image S^local mean in the mining objective
  int candidate_stride = 1;            // mu grid step, in cells
  int refinement_iterations = 1;

  bool operator==(const MiningConfig&) const = default;

  void validate() const {
    if (n < 1) throw ConfigError("mining: n must be >= 1");
    if (window_radius < 0) throw ConfigError("mining: window_radius must be >= 0");
    if (!(sigma_s_fraction > 0.0)) throw ConfigError("mining: sigma_s_fraction must be > 0");
    if (candidate_stride < 1) throw ConfigError("mining: candidate_stride must be >= 1");
    if (refinement_iterations < 0) throw ConfigError("mining: refinement_iterations must be >= 0");
  }
};

struct LatentPattern {
  int pattern_id = 0;
  int layer = 0;
  int channel = 0;
  GridPos mu;
  int window_radius = 0;
  Point delta_bar;  // mean displacement template center -> pattern unit, px
  double sigma_s = 1.0;

  bool operator==(const LatentPattern&) const = default;
  SliceKey key() const { return {layer, channel}; }
};

/// Rectangle of grid cells [row0, row1] x [col0, col1], inclusive.
struct GridWindow {
  int row0 = 0, row1 = -1, col0 = 0, col1 = -1;
  bool empty() const { return row1 < row0 || col1 < col0; }
  int size() const { return empty() ? 0 : (row1 - row0 + 1) * (col1 - col0 + 1); }
  bool contains(GridPos p) const { return p.row >= row0 && p.row <= row1 && p.col >= col0 && p.col <= col1; }
};

/// The pattern's unit children: the square around mu clipped to the slice.
inline GridWindow pattern_window(const SliceMeta& meta, GridPos mu, int radius) {
  return {std::max(0, mu.row - radius), std::min(meta.grid_h - 1, mu.row + radius), std::max(0, mu.col - radius),
          std::min(meta.grid_w - 1, mu.col + radius)};
}

struct PartTemplate {
  int template_id = 0;
  std::string label;
  std::vector<LatentPattern> patterns;
  double region_w = 1.0;
  double region_h = 1.0;
  int support_count = 0;

  bool operator==(const PartTemplate&) const = default;
};

struct AndOrGraph {
  std::string part_name;
  std::vector<PartTemplate> templates;
  MiningConfig config;

  bool operator==(const AndOrGraph&) const = default;

  bool empty() const { return templates.empty(); }

  const PartTemplate* find_label(const std::string& label) const {
    for (const auto& t : templates)
      if (t.label == label) return &t;
    return nullptr;
  }

  const PartTemplate* find_id(int id) const {
    for (const auto& t : templates)
      if (t.template_id == id) return &t;
    return nullptr;
  }

  int next_template_id() const {
    int id = 0;
    for (const auto& t : templates) id = std::max(id, t.template_id + 1);
    return id;
  }

  std::size_t pattern_count() const {
    std::size_t n = 0;
    for (const auto& t : templates) n += t.patterns.size();
    return n;
  }
};

struct PatternParse {
  int pattern_id = 0;
  GridPos unit;
  double unit_score = 0.0;
  double spatial_score = 0.0;
  Point unit_center;  // unclipped receptive-field center
  Box region;         // receptive field of the chosen unit, clipped
  bool operator==(const PatternParse&) const = default;
};

struct ParseGraph {
  std::string image_id;
  int template_id = -1;
  Point part_center;
  Box part_box;
  double part_score = -std::numeric_limits<double>::infinity();
  std::vector<PatternParse> patterns;
  bool operator==(const ParseGraph&) const = default;
};

// ---------------------------------------------------------------------------
// Terminal and OR scoring
// ---------------------------------------------------------------------------

namespace detail {

inline double deformation_penalty(const LatentPattern& p, GridPos pos, double w_def) {
  const double dr = pos.row - p.mu.row, dc = pos.col - p.mu.col;
  const double denom = static_cast<double>(p.window_radius + 1) * (p.window_radius + 1);
  return w_def * (dr * dr + dc * dc) / denom;
}

}  // namespace detail

/// z-scored activation minus a quadratic deformation penalty normalised by the window size.
inline double score_unit(const FeatureVolume& v, const LatentPattern& p, GridPos pos, const ChannelStats& stats,
                         double w_def = 0.5) {
  const Slice& s = v.slice(p.key());
  if (!pattern_window(s.meta, p.mu, p.window_radius).contains(pos))
    throw BoundsError("unit outside the deformation window of pattern " + std::to_string(p.pattern_id));
  return stats.z(p.key(), s.at(pos)) - detail::deformation_penalty(p, pos, w_def);
}

struct UnitChoice {
  GridPos pos;
  double score = 0.0;
};

/// Best unit in the window; ties go to the smallest (row, col).
inline UnitChoice parse_pattern(const FeatureVolume& v, const LatentPattern& p, const ChannelStats& stats,
                                double w_def = 0.5) {
  const Slice& s = v.slice(p.key());
  const auto win = pattern_window(s.meta, p.mu, p.window_radius);
  if (win.empty()) throw PreconditionError("empty deformation window for pattern " + std::to_string(p.pattern_id));
  const auto& m = stats.at(p.key());
  const double inv_std = m.stddev > 0.0 ? 1.0 / m.stddev : 0.0;
  UnitChoice best{{win.row0, win.col0}, -std::numeric_limits<double>::infinity()};
  for (int r = win.row0; r <= win.row1; ++r)
    for (int c = win.col0; c <= win.col1; ++c) {
      const GridPos pos{r, c};
      const double z = m.stddev > 0.0 ? (s.at(pos) - m.mean) * inv_std : 0.0;
      const double score = z - detail::deformation_penalty(p, pos, w_def);
      if (score > best.score) best = {pos, score};
    }
  return best;
}

// ---------------------------------------------------------------------------
// AND nodes
// ---------------------------------------------------------------------------

/// Log-compatibility of a pattern unit with a part center: isotropic Gaussian around delta_bar.
inline double spatial_compat(Point part_center, Point pattern_pos, const LatentPattern& p) {
  const Point residual = (pattern_pos - part_center) - p.delta_bar;
  return -squared_norm(residual) / (2.0 * p.sigma_s * p.sigma_s);
}

namespace detail {

/// Integer maximiser of sum_k -w_k (x - v_k)^2, i.e. the weighted mean rounded,
/// with exact halves resolved to the smaller coordinate.
inline double best_pixel(double weighted_mean) { return std::ceil(weighted_mean - 0.5); }

}  // namespace detail

struct TemplateParse {
  Point center;
  Box box;
  double score = 0.0;
  std::vector<PatternParse> patterns;
};

/// Parses one template: independent pattern parses, then the pixel center
/// maximising the summed spatial terms.
inline TemplateParse parse_template(const FeatureVolume& v, const PartTemplate& t, const ChannelStats& stats,
                                    double w_def = 0.5) {
  if (t.patterns.empty()) throw PreconditionError("template '" + t.label + "' has no latent patterns");
  TemplateParse out;
  out.patterns.reserve(t.patterns.size());
  double wsum = 0.0, wx = 0.0, wy = 0.0;
  for (const auto& p : t.patterns) {
    const auto choice = parse_pattern(v, p, stats, w_def);
    const auto& meta = v.slice(p.key()).meta;
    const auto field = unit_to_image(meta, choice.pos, v.image_w, v.image_h);
    const double w = 1.0 / (p.sigma_s * p.sigma_s);
    const Point vote = field.center - p.delta_bar;
    wsum += w;
    wx += w * vote.x;
    wy += w * vote.y;
    out.patterns.push_back({p.pattern_id, choice.pos, choice.score, 0.0, field.center, field.field});
  }
  out.center = {detail::best_pixel(wx / wsum), detail::best_pixel(wy / wsum)};
  out.box = clip_box(Box::centered(out.center, t.region_w, t.region_h), v.image_w, v.image_h);
  out.score = 0.0;
  for (std::size_t k = 0; k < t.patterns.size(); ++k) {
    auto& rec = out.patterns[k];
    rec.spatial_score = spatial_compat(out.center, rec.unit_center, t.patterns[k]);
    out.score += rec.unit_score + rec.spatial_score;
  }
  return out;
}

/// Sum of pattern scores at a fixed part center (the template score with the
/// part region pinned, used when mining from annotations).
inline double template_score_at(const FeatureVolume& v, const PartTemplate& t, Point center,
                                const ChannelStats& stats, double w_def = 0.5) {
  double score = 0.0;
  for (const auto& p : t.patterns) {
    const auto choice = parse_pattern(v, p, stats, w_def);
    score += choice.score + spatial_compat(center, unit_center(v.slice(p.key()).meta, choice.pos), p);
  }
  return score;
}

// ---------------------------------------------------------------------------
// Semantic OR node
// ---------------------------------------------------------------------------

/// Full parse; the best template wins, ties to the smallest template_id.
inline ParseGraph parse(const FeatureVolume& v, const AndOrGraph& aog, const ChannelStats& stats) {
  if (aog.empty()) throw EmptyModelError("AOG for '" + aog.part_name + "' has no part templates");
  ParseGraph best;
  best.image_id = v.image_id;
  for (const auto& t : aog.templates) {
    auto tp = parse_template(v, t, stats, aog.config.w_def);
    const bool better = tp.score > best.part_score || (tp.score == best.part_score && t.template_id < best.template_id);
    if (best.template_id < 0 || better) {
      best.template_id = t.template_id;
      best.part_center = tp.center;
      best.part_box = tp.box;
      best.part_score = tp.score;
      best.patterns = std::move(tp.patterns);
    }
  }
  return best;
}

/// L(I, theta): the overall inference score.
inline double inference_score(const FeatureVolume& v, const AndOrGraph& aog, const ChannelStats& stats) {
  return parse(v, aog, stats).part_score;
}

inline std::vector<ParseGraph> parse_all(std::span<const FeatureVolume> volumes, const AndOrGraph& aog,
                                         const ChannelStats& stats) {
  std::vector<ParseGraph> out(volumes.size());
  parallel_for(volumes.size(), [&](std::size_t i) { out[i] = parse(volumes[i], aog, stats); });
  return out;
}

/// Mirror image of a graph: windows and displacements reflected horizontally.
/// Grid widths are taken from `geometry`, any volume carrying the referenced slices.
inline AndOrGraph mirror_aog(const AndOrGraph& aog, const FeatureVolume& geometry) {
  AndOrGraph out = aog;
  for (auto& t : out.templates)
    for (auto& p : t.patterns) {
      const auto& meta = geometry.slice(p.key()).meta;
      p.mu.col = meta.grid_w - 1 - p.mu.col;
      p.delta_bar.x = -p.delta_bar.x;
    }
  return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline constexpr int kAogSchemaVersion = 1;

inline nlohmann::json to_json(const MiningConfig& c) {
  return {{"n", c.n},
          {"window_radius", c.window_radius},
          {"sigma_s_fraction", c.sigma_s_fraction},
          {"w_def", c.w_def},
          {"local_weight", c.local_weight},
          {"candidate_stride", c.candidate_stride},
          {"refinement_iterations", c.refinement_iterations}};
}

inline MiningConfig mining_config_from_json(const nlohmann::json& j, MiningConfig c = {}) {
  c.n = j.value("n", c.n);
  c.window_radius = j.value("window_radius", c.window_radius);
  c.sigma_s_fraction = j.value("sigma_s_fraction", c.sigma_s_fraction);
  c.w_def = j.value("w_def", c.w_def);
  c.local_weight = j.value("local_weight", c.local_weight);
  c.candidate_stride = j.value("candidate_stride", c.candidate_stride);
  c.refinement_iterations = j.value("refinement_iterations", c.refinement_iterations);
  return c;
}

inline nlohmann::json to_json(const PartTemplate& t) {
  nlohmann::json patterns = nlohmann::json::array();
  for (const auto& p : t.patterns)
    patterns.push_back({{"pattern_id", p.pattern_id},
                        {"layer", p.layer},
                        {"channel", p.channel},
                        {"mu", {p.mu.row, p.mu.col}},
                        {"window_radius", p.window_radius},
                        {"delta_bar", {p.delta_bar.x, p.delta_bar.y}},
                        {"sigma_s", p.sigma_s}});
  return {{"template_id", t.template_id}, {"label", t.label},     {"region_w", t.region_w},
          {"region_h", t.region_h},       {"support_count", t.support_count}, {"patterns", patterns}};
}

inline nlohmann::json to_json(const AndOrGraph& aog) {
  nlohmann::json templates = nlohmann::json::array();
  for (const auto& t : aog.templates) templates.push_back(to_json(t));
  return {{"schema_version", kAogSchemaVersion},
          {"part_name", aog.part_name},
          {"config", to_json(aog.config)},
          {"templates", templates}};
}

inline AndOrGraph aog_from_json(const nlohmann::json& j) {
  AndOrGraph aog;
  try {
    if (j.at("schema_version").get<int>() != kAogSchemaVersion)
      throw FormatError("unsupported AOG schema_version " + j.at("schema_version").dump());
    aog.part_name = j.at("part_name").get<std::string>();
    aog.config = mining_config_from_json(j.at("config"));
    for (const auto& jt : j.at("templates")) {
      PartTemplate t;
      t.template_id = jt.at("template_id").get<int>();
      t.label = jt.at("label").get<std::string>();
      t.region_w = jt.at("region_w").get<double>();
      t.region_h = jt.at("region_h").get<double>();
      t.support_count = jt.at("support_count").get<int>();
      for (const auto& jp : jt.at("patterns")) {
        LatentPattern p;
        p.pattern_id = jp.at("pattern_id").get<int>();
        p.layer = jp.at("layer").get<int>();
        p.channel = jp.at("channel").get<int>();
        p.mu = {jp.at("mu").at(0).get<int>(), jp.at("mu").at(1).get<int>()};
        p.window_radius = jp.at("window_radius").get<int>();
        p.delta_bar = {jp.at("delta_bar").at(0).get<double>(), jp.at("delta_bar").at(1).get<double>()};
        p.sigma_s = jp.at("sigma_s").get<double>();
        if (p.window_radius < 0 || !(p.sigma_s > 0.0)) throw FormatError("invalid latent pattern parameters");
        t.patterns.push_back(p);
      }
      if (aog.find_label(t.label) != nullptr) throw FormatError("duplicate template label '" + t.label + "'");
      aog.templates.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("AOG document: ") + e.what());
  }
  return aog;
}

inline nlohmann::json to_json(const ParseGraph& pg) {
  nlohmann::json patterns = nlohmann::json::array();
  for (const auto& r : pg.patterns)
    patterns.push_back({{"pattern_id", r.pattern_id},
                        {"unit", {r.unit.row, r.unit.col}},
                        {"unit_score", r.unit_score},
                        {"spatial_score", r.spatial_score},
                        {"region", {r.region.x, r.region.y, r.region.w, r.region.h}}});
  return {{"image_id", pg.image_id},
          {"template_id", pg.template_id},
          {"part_center", {pg.part_center.x, pg.part_center.y}},
          {"part_box", {pg.part_box.x, pg.part_box.y, pg.part_box.w, pg.part_box.h}},
          {"part_score", pg.part_score},
          {"patterns", patterns}};
}

}  // namespace aogqa
