#pragma once

// Latent-pattern mining. For one template label the objective is
//
//   mean over annotated images of the template score with the part box pinned
//   to the annotation  +  local_weight * mean over all images of S^local,
//
// where S^local sums pattern scores without spatial terms. One candidate
// pattern exists per conv-slice (its mu picked on the candidate grid), and the
// objective is additive over patterns, so greedy selection of the n best
// candidates is exact.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "annotation.hpp"
#include "aog.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "parallel.hpp"

namespace aogqa {

inline constexpr int kPatternIdStride = 100000;

/// Mean over all dataset images of the best unit score of a pattern centred at
/// each grid cell, per slice. Independent of annotations, so it is computed
/// once per (dataset, stats, window radius, w_def).
class LocalScoreTable {
 public:
  LocalScoreTable() = default;

  LocalScoreTable(const Dataset& dataset, const ChannelStats& stats, int window_radius, double w_def) {
    if (dataset.empty()) return;
    const auto& ref = dataset[0];
    std::vector<const SliceMeta*> metas;
    for (const auto& s : ref.slices) metas.push_back(&s.meta);
    std::vector<std::vector<double>> tables(metas.size());
    parallel_for(metas.size(), [&](std::size_t k) {
      const SliceMeta& meta = *metas[k];
      const SliceKey key = meta.key();
      const auto& m = stats.at(key);
      std::vector<double> sum(static_cast<std::size_t>(meta.grid_h) * meta.grid_w, 0.0);
      std::vector<double> z(sum.size());
      const double denom = static_cast<double>(window_radius + 1) * (window_radius + 1);
      for (const auto& v : dataset.volumes()) {
        const Slice& s = v.slice(key);
        for (std::size_t i = 0; i < z.size(); ++i)
          z[i] = m.stddev > 0.0 ? (s.values[i] - m.mean) / m.stddev : 0.0;
        for (int r = 0; r < meta.grid_h; ++r)
          for (int c = 0; c < meta.grid_w; ++c) {
            const auto win = pattern_window(meta, {r, c}, window_radius);
            double best = -std::numeric_limits<double>::infinity();
            for (int rr = win.row0; rr <= win.row1; ++rr)
              for (int cc = win.col0; cc <= win.col1; ++cc) {
                const double d2 = static_cast<double>((rr - r) * (rr - r) + (cc - c) * (cc - c));
                best = std::max(best, z[static_cast<std::size_t>(rr) * meta.grid_w + cc] - w_def * d2 / denom);
              }
            sum[static_cast<std::size_t>(r) * meta.grid_w + c] += best;
          }
      }
      for (auto& x : sum) x /= static_cast<double>(dataset.size());
      tables[k] = std::move(sum);
    });
    for (std::size_t k = 0; k < metas.size(); ++k) table_[metas[k]->key()] = {metas[k]->grid_w, std::move(tables[k])};
  }

  double at(SliceKey key, GridPos mu) const {
    auto it = table_.find(key);
    if (it == table_.end()) throw MissingSliceError("no local-score table for slice");
    return it->second.values[static_cast<std::size_t>(mu.row) * it->second.grid_w + mu.col];
  }

 private:
  struct Entry {
    int grid_w = 0;
    std::vector<double> values;
  };
  std::map<SliceKey, Entry> table_;
};

/// Everything mining needs that does not change between QA steps.
class MiningContext {
 public:
  MiningContext(const Dataset& dataset, const ChannelStats& stats, MiningConfig cfg)
      : dataset_(&dataset), stats_(&stats), cfg_(cfg) {
    cfg_.validate();
    local_ = LocalScoreTable(dataset, stats, cfg_.window_radius, cfg_.w_def);
  }

  const Dataset& dataset() const { return *dataset_; }
  const ChannelStats& stats() const { return *stats_; }
  const MiningConfig& config() const { return cfg_; }
  const LocalScoreTable& local_scores() const { return local_; }

 private:
  const Dataset* dataset_;
  const ChannelStats* stats_;
  MiningConfig cfg_;
  LocalScoreTable local_;
};

/// A candidate pattern and its objective contribution.
struct ScoredCandidate {
  LatentPattern pattern;
  double annotated_term = 0.0;  // mean annotated-image score (unit + spatial)
  double local_term = 0.0;      // local_weight * mean all-image unit score
  double objective() const { return annotated_term + local_term; }
};

namespace detail {

/// An annotation resolved against its (possibly mirrored) volume.
struct AnnotatedView {
  FeatureVolume volume;
  Point center;
  Box box;
};

inline std::vector<AnnotatedView> resolve_annotations(std::span<const PartAnnotation> annots, const Dataset& dataset) {
  std::vector<AnnotatedView> views;
  views.reserve(annots.size());
  for (const auto& a : annots) {
    if (!dataset.contains(a.image_id))
      throw IoError("dataset has no feature volume for annotated image '" + a.image_id + "'");
    const auto& v = dataset.volume(a.image_id);
    a.validate(v.image_w, v.image_h);
    AnnotatedView view{a.flipped ? mirror_volume(v) : v, {}, a.flipped ? mirror_box(a.part_box, v.image_w) : a.part_box};
    view.center = view.box.center();
    bool covered = false;
    for (const auto& s : view.volume.slices) covered = covered || grid_covers(s.meta, view.center);
    if (!covered)
      throw PreconditionError("annotation on '" + a.image_id + "' rejected: part center (" +
                              std::to_string(view.center.x) + ", " + std::to_string(view.center.y) +
                              ") lies outside every slice grid");
    views.push_back(std::move(view));
  }
  return views;
}

/// Re-estimates delta_bar from the current best units; returns the mean annotated term.
inline double fit_displacement(LatentPattern& p, const std::vector<AnnotatedView>& views, const ChannelStats& stats,
                               double w_def, std::vector<GridPos>* units = nullptr) {
  Point sum;
  std::vector<std::pair<Point, double>> picks;
  picks.reserve(views.size());
  if (units) units->clear();
  for (const auto& view : views) {
    const auto choice = parse_pattern(view.volume, p, stats, w_def);
    const Point c = unit_center(view.volume.slice(p.key()).meta, choice.pos);
    sum = sum + (c - view.center);
    picks.emplace_back(c, choice.score);
    if (units) units->push_back(choice.pos);
  }
  const double n = static_cast<double>(views.size());
  p.delta_bar = {sum.x / n, sum.y / n};
  double term = 0.0;
  for (std::size_t i = 0; i < views.size(); ++i)
    term += picks[i].second + spatial_compat(views[i].center, picks[i].first, p);
  return term / n;
}

inline bool candidate_before(const ScoredCandidate& a, const ScoredCandidate& b) {
  if (a.objective() != b.objective()) return a.objective() > b.objective();
  return std::tie(a.pattern.layer, a.pattern.channel, a.pattern.mu) <
         std::tie(b.pattern.layer, b.pattern.channel, b.pattern.mu);
}

}  // namespace detail

/// Best candidate pattern per conv-slice, sorted by objective (ties: (layer, channel, mu)).
inline std::vector<ScoredCandidate> rank_candidates(std::span<const PartAnnotation> annots, const MiningContext& ctx) {
  if (annots.empty()) throw PreconditionError("mining needs at least one annotation");
  const auto& cfg = ctx.config();
  const auto views = detail::resolve_annotations(annots, ctx.dataset());
  const auto& ref = views.front().volume;
  const double diag = std::hypot(static_cast<double>(ref.image_w), static_cast<double>(ref.image_h));
  const double sigma_s = cfg.sigma_s_fraction * diag;

  std::vector<SliceKey> keys;
  for (const auto& s : ref.slices) keys.push_back(s.meta.key());
  std::sort(keys.begin(), keys.end());

  std::vector<ScoredCandidate> best(keys.size());
  parallel_for(keys.size(), [&](std::size_t k) {
    const auto& meta = ref.slice(keys[k]).meta;
    bool have = false;
    for (int r = 0; r < meta.grid_h; r += cfg.candidate_stride)
      for (int c = 0; c < meta.grid_w; c += cfg.candidate_stride) {
        ScoredCandidate cand;
        cand.pattern = {0, keys[k].layer, keys[k].channel, {r, c}, cfg.window_radius, {}, sigma_s};
        cand.annotated_term = detail::fit_displacement(cand.pattern, views, ctx.stats(), cfg.w_def);
        cand.local_term = cfg.local_weight * ctx.local_scores().at(keys[k], {r, c});
        if (!have || cand.objective() > best[k].objective()) {
          best[k] = cand;
          have = true;
        }
      }
  });
  std::sort(best.begin(), best.end(), detail::candidate_before);
  return best;
}

/// Builds one part template from the annotations carrying its label.
inline PartTemplate mine_template(const std::string& label, std::span<const PartAnnotation> annots,
                                  const MiningContext& ctx, int template_id = 0) {
  if (annots.empty()) throw PreconditionError("mine_template('" + label + "') needs at least one annotation");
  const auto& cfg = ctx.config();
  const auto ranked = rank_candidates(annots, ctx);

  // Additive objective: each greedy step adds the best remaining candidate.
  PartTemplate t;
  t.template_id = template_id;
  t.label = label;
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(cfg.n), ranked.size());
  for (std::size_t k = 0; k < keep; ++k) {
    LatentPattern p = ranked[k].pattern;
    p.pattern_id = template_id * kPatternIdStride + static_cast<int>(k);
    t.patterns.push_back(p);
  }

  const auto views = detail::resolve_annotations(annots, ctx.dataset());
  for (int it = 0; it < cfg.refinement_iterations; ++it) {
    for (auto& p : t.patterns) {
      std::vector<GridPos> units;
      detail::fit_displacement(p, views, ctx.stats(), cfg.w_def, &units);
      double rs = 0.0, cs = 0.0;
      for (const auto& u : units) {
        rs += u.row;
        cs += u.col;
      }
      const auto& meta = views.front().volume.slice(p.key()).meta;
      const double n = static_cast<double>(units.size());
      p.mu = {std::clamp(static_cast<int>(std::lround(rs / n)), 0, meta.grid_h - 1),
              std::clamp(static_cast<int>(std::lround(cs / n)), 0, meta.grid_w - 1)};
      detail::fit_displacement(p, views, ctx.stats(), cfg.w_def);
    }
  }

  double w = 0.0, h = 0.0;
  for (const auto& a : annots) {
    w += a.part_box.w;
    h += a.part_box.h;
  }
  t.region_w = w / static_cast<double>(annots.size());
  t.region_h = h / static_cast<double>(annots.size());
  t.support_count = static_cast<int>(annots.size());
  return t;
}

/// Re-mines an existing branch from its enlarged annotation set; the template id is kept.
inline PartTemplate refine_template(const PartTemplate& t, std::span<const PartAnnotation> annots,
                                    const MiningContext& ctx) {
  return mine_template(t.label, annots, ctx, t.template_id);
}

/// Mean template score on its annotated images with the part center pinned to the annotation.
inline double mean_annotated_score(const PartTemplate& t, std::span<const PartAnnotation> annots,
                                   const MiningContext& ctx) {
  const auto views = detail::resolve_annotations(annots, ctx.dataset());
  double sum = 0.0;
  for (const auto& v : views) sum += template_score_at(v.volume, t, v.center, ctx.stats(), ctx.config().w_def);
  return sum / static_cast<double>(views.size());
}

/// Adds a branch for a new label or refines the branch of a known one. `log`
/// holds every annotation placed so far, including `annot`.
inline AndOrGraph grow_aog(const AndOrGraph& aog, const PartAnnotation& annot, std::span<const PartAnnotation> log,
                           const MiningContext& ctx) {
  std::vector<PartAnnotation> same;
  bool seen = false;
  for (const auto& a : log) {
    if (a.template_label != annot.template_label) continue;
    same.push_back(a);
    seen = seen || a == annot;
  }
  if (!seen) same.push_back(annot);

  AndOrGraph out = aog;
  out.config = ctx.config();
  for (auto& t : out.templates)
    if (t.label == annot.template_label) {
      t = refine_template(t, same, ctx);
      return out;
    }
  out.templates.push_back(mine_template(annot.template_label, same, ctx, aog.next_template_id()));
  return out;
}

/// Builds a whole AOG from an annotation set, one branch per label in first-seen order.
inline AndOrGraph build_aog(const std::string& part_name, std::span<const PartAnnotation> annots,
                            const MiningContext& ctx) {
  AndOrGraph aog;
  aog.part_name = part_name;
  aog.config = ctx.config();
  std::vector<std::string> labels;
  for (const auto& a : annots)
    if (std::find(labels.begin(), labels.end(), a.template_label) == labels.end()) labels.push_back(a.template_label);
  for (const auto& label : labels) {
    std::vector<PartAnnotation> same;
    for (const auto& a : annots)
      if (a.template_label == label) same.push_back(a);
    aog.templates.push_back(mine_template(label, same, ctx, aog.next_template_id()));
  }
  return aog;
}

}  // namespace aogqa
