#pragma once

// Part-localization metrics and the active-vs-random annotation-efficiency
// comparison. Objects are assumed pre-cropped, so the object diagonal is the
// image diagonal.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "active_qa.hpp"
#include "annotation.hpp"
#include "aog.hpp"
#include "synth.hpp"

namespace aogqa {

/// Center distance over the image diagonal.
inline double normalized_distance(Point pred, Point gt, double image_w, double image_h) {
  if (!(image_w > 0.0 && image_h > 0.0)) throw PreconditionError("image dimensions must be positive");
  return std::sqrt(squared_norm(pred - gt)) / std::hypot(image_w, image_h);
}

/// Correct localization under IoU >= 0.5.
inline bool pcp_hit(const Box& pred, const Box& gt) { return intersection_over_union(pred, gt) >= 0.5; }

struct LocalizationRow {
  std::string image_id;
  Box pred_box;
  Point pred_center;
  Box gt_box;
  Point gt_center;
  double norm_dist = 0.0;
  bool pcp = false;
};

struct LocalizationReport {
  std::vector<LocalizationRow> rows;
  std::size_t part_free = 0;                // images excluded because the part is absent
  std::optional<double> mean_norm_dist;     // undefined for an empty report
  std::optional<double> pcp_percent;

  void recompute_aggregates() {
    if (rows.empty()) {
      mean_norm_dist.reset();
      pcp_percent.reset();
      return;
    }
    double d = 0.0;
    std::size_t hits = 0;
    for (const auto& r : rows) {
      d += r.norm_dist;
      hits += r.pcp ? 1 : 0;
    }
    mean_norm_dist = d / static_cast<double>(rows.size());
    pcp_percent = 100.0 * static_cast<double>(hits) / static_cast<double>(rows.size());
  }
};

inline LocalizationReport evaluate(const AndOrGraph& aog, std::span<const FeatureVolume> volumes, const GroundTruth& gt,
                                   const ChannelStats& stats) {
  if (aog.empty()) throw EmptyModelError("cannot evaluate an AOG without part templates");
  LocalizationReport report;
  std::vector<const FeatureVolume*> todo;
  std::string missing;
  for (const auto& v : volumes) {
    auto it = gt.by_image.find(v.image_id);
    if (it == gt.by_image.end()) {
      missing += (missing.empty() ? "" : ", ") + v.image_id;
      continue;
    }
    if (!it->second)
      ++report.part_free;
    else
      todo.push_back(&v);
  }
  if (!missing.empty()) throw PreconditionError("no ground truth for: " + missing);
  report.rows.resize(todo.size());
  parallel_for(todo.size(), [&](std::size_t i) {
    const auto& v = *todo[i];
    const auto& truth = *gt.by_image.at(v.image_id);
    const auto pg = parse(v, aog, stats);
    auto& row = report.rows[i];
    row.image_id = v.image_id;
    row.pred_box = pg.part_box;
    row.pred_center = pg.part_box.center();
    row.gt_box = truth.part_box;
    row.gt_center = truth.part_box.center();
    row.norm_dist = normalized_distance(row.pred_center, row.gt_center, v.image_w, v.image_h);
    row.pcp = pcp_hit(row.pred_box, row.gt_box);
  });
  report.recompute_aggregates();
  return report;
}

inline nlohmann::json to_json(const LocalizationReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"image_id", row.image_id},
                    {"pred_box", box_to_json(row.pred_box)},
                    {"gt_box", box_to_json(row.gt_box)},
                    {"norm_dist", row.norm_dist},
                    {"pcp_hit", row.pcp}});
  nlohmann::json j{{"rows", rows}, {"count", r.rows.size()}, {"part_free", r.part_free}};
  j["mean_norm_dist"] = r.mean_norm_dist ? nlohmann::json(*r.mean_norm_dist) : nlohmann::json(nullptr);
  j["pcp_percent"] = r.pcp_percent ? nlohmann::json(*r.pcp_percent) : nlohmann::json(nullptr);
  return j;
}

inline std::string report_csv(const LocalizationReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "image_id,pred_x,pred_y,pred_w,pred_h,gt_x,gt_y,gt_w,gt_h,norm_dist,pcp_hit\n";
  for (const auto& row : r.rows)
    os << row.image_id << ',' << row.pred_box.x << ',' << row.pred_box.y << ',' << row.pred_box.w << ','
       << row.pred_box.h << ',' << row.gt_box.x << ',' << row.gt_box.y << ',' << row.gt_box.w << ',' << row.gt_box.h
       << ',' << row.norm_dist << ',' << (row.pcp ? 1 : 0) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Annotation-efficiency comparison
// ---------------------------------------------------------------------------

struct CurvePoint {
  int budget = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  bool operator==(const CurvePoint&) const = default;
};

struct EfficiencyCurve {
  std::string policy;
  std::vector<CurvePoint> points;
  bool operator==(const EfficiencyCurve&) const = default;
};

/// Per-seed outcome of one policy at one budget.
struct BudgetOutcome {
  double mean_norm_dist = 0.0;
  int templates = 0;
  int questions = 0;
  int annotations = 0;
  bool operator==(const BudgetOutcome&) const = default;
};

struct PolicyRun {
  SelectionPolicy policy = SelectionPolicy::active;
  std::vector<std::vector<BudgetOutcome>> per_seed;  // [seed][budget]
  EfficiencyCurve curve;
  bool operator==(const PolicyRun&) const = default;
};

struct PolicyComparison {
  std::vector<int> budgets;
  std::vector<std::uint64_t> seeds;
  PolicyRun first;
  PolicyRun second;
};

/// Mining sized to the four-bump constellations of the standard benchmark.
inline QaConfig benchmark_qa_config() {
  QaConfig qa;
  qa.mining.n = 4;
  return qa;
}

struct ComparisonConfig {
  SynthConfig data = SynthConfig::standard_benchmark();
  int held_out_images = 100;
  QaConfig qa = benchmark_qa_config();
  SelectionPolicy first = SelectionPolicy::active;
  SelectionPolicy second = SelectionPolicy::random;
};

inline const char* policy_name(SelectionPolicy p) { return p == SelectionPolicy::active ? "active" : "random"; }

namespace detail {

/// Runs one policy up to the largest budget, evaluating the AOG each time a budget is reached.
inline std::vector<BudgetOutcome> run_policy(const std::shared_ptr<const QaEnvironment>& env, const GroundTruth& truth,
                                             const Dataset& held_out, const GroundTruth& held_truth,
                                             const std::vector<int>& budgets, SelectionPolicy policy, QaConfig qa) {
  QaSession session(env, qa);
  session.set_clock([] { return std::int64_t{0}; });
  const auto oracle = make_ground_truth_oracle(truth);
  std::map<int, AndOrGraph> snapshots;
  std::map<int, int> questions;
  auto snapshot_due = [&](int annots) {
    for (int b : budgets)
      if (b <= annots && !snapshots.count(b)) {
        snapshots[b] = session.aog();
        questions[b] = session.step();
      }
  };
  const int max_budget = *std::max_element(budgets.begin(), budgets.end());
  if (max_budget > 0)
    run_loop(session, oracle, max_budget, policy,
             [&](const QaSession& s, const TraceStep&) { snapshot_due(static_cast<int>(s.annotations().size())); });
  snapshot_due(0);
  std::vector<BudgetOutcome> out;
  for (int b : budgets) {
    if (!snapshots.count(b)) {  // dataset exhausted before the budget was reached
      snapshots[b] = session.aog();
      questions[b] = session.step();
    }
    const auto& aog = snapshots[b];
    const auto report = evaluate(aog, held_out.volumes(), held_truth, env->stats());
    int annots = 0;
    for (const auto& t : aog.templates) annots += t.support_count;
    out.push_back({report.mean_norm_dist.value_or(0.0), static_cast<int>(aog.templates.size()), questions[b], annots});
  }
  return out;
}

inline EfficiencyCurve summarize(SelectionPolicy policy, const std::vector<int>& budgets,
                                 const std::vector<std::vector<BudgetOutcome>>& per_seed) {
  EfficiencyCurve c{policy_name(policy), {}};
  for (std::size_t b = 0; b < budgets.size(); ++b) {
    double sum = 0.0, sq = 0.0;
    for (const auto& s : per_seed) sum += s[b].mean_norm_dist;
    const double n = static_cast<double>(per_seed.size());
    const double mean = sum / n;
    for (const auto& s : per_seed) sq += (s[b].mean_norm_dist - mean) * (s[b].mean_norm_dist - mean);
    const double se = per_seed.size() > 1 ? std::sqrt(sq / (n - 1.0)) / std::sqrt(n) : 0.0;
    c.points.push_back({budgets[b], mean, se});
  }
  return c;
}

}  // namespace detail

/// Mean held-out normalized distance of two selection policies at each budget,
/// over one synthetic dataset per seed.
inline PolicyComparison compare_policies(const ComparisonConfig& cfg, std::vector<int> budgets,
                                         std::vector<std::uint64_t> seeds) {
  if (seeds.size() < 5) throw PreconditionError("compare_policies needs at least 5 seeds");
  if (budgets.empty()) throw PreconditionError("compare_policies needs at least one budget");
  std::sort(budgets.begin(), budgets.end());
  budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());
  if (budgets.front() < 1) throw EmptyModelError("budget 0 leaves the AOG empty; nothing to evaluate");

  PolicyComparison out{budgets, seeds, {cfg.first, {}, {}}, {cfg.second, {}, {}}};
  out.first.per_seed.resize(seeds.size());
  out.second.per_seed.resize(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const std::uint64_t seed = seeds[s];
    auto pool = synth_generate(cfg.data, seed);
    SynthConfig held_cfg = cfg.data;
    held_cfg.image_count = cfg.held_out_images;
    held_cfg.id_prefix = "held";
    auto held = synth_generate(held_cfg, seed ^ 0x9e3779b97f4a7c15ULL);
    auto env = std::make_shared<const QaEnvironment>(std::move(pool.dataset), std::nullopt, cfg.qa.mining,
                                                     cfg.qa.alpha);
    QaConfig qa = cfg.qa;
    qa.seed = seed;
    out.first.per_seed[s] = detail::run_policy(env, pool.truth, held.dataset, held.truth, budgets, cfg.first, qa);
    out.second.per_seed[s] = detail::run_policy(env, pool.truth, held.dataset, held.truth, budgets, cfg.second, qa);
  }
  out.first.curve = detail::summarize(cfg.first, budgets, out.first.per_seed);
  out.second.curve = detail::summarize(cfg.second, budgets, out.second.per_seed);
  return out;
}

inline std::string curves_csv(const std::vector<EfficiencyCurve>& curves) {
  std::ostringstream os;
  os.precision(17);
  os << "policy,budget,mean,stderr\n";
  for (const auto& c : curves)
    for (const auto& p : c.points) os << c.policy << ',' << p.budget << ',' << p.mean << ',' << p.stderr_ << '\n';
  return os.str();
}

}  // namespace aogqa
