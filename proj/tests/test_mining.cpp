#include <gtest/gtest.h>

#include <set>

#include "aogqa/mining.hpp"
#include "aogqa/synth.hpp"
#include "support.hpp"

using namespace aogqa;

namespace {

SynthConfig planted_config(double noise = 0.0) {
  SynthConfig c;
  c.image_count = 30;
  c.image_w = c.image_h = 128;
  c.layers = {SynthLayer{0, 4, 8.0f, 16.0f, 4.0f}, SynthLayer{1, 4, 16.0f, 32.0f, 8.0f}};
  c.templates = {SynthTemplate{"only", 1.0, 32.0, 32.0, {{1, 2, 16.0, -8.0, 1.0}}}};
  c.center_jitter_px = 24.0;
  c.noise = noise;
  return c;
}

std::vector<PartAnnotation> truth_list(const GroundTruth& gt, const std::string& label = {}, std::size_t limit = 1000) {
  std::vector<PartAnnotation> out;
  for (const auto& [id, a] : gt.by_image)
    if (a && (label.empty() || a->template_label == label) && out.size() < limit) out.push_back(*a);
  return out;
}

// Objective contribution of one pattern, recomputed from its definition.
double pattern_objective(LatentPattern p, const std::vector<PartAnnotation>& annots, const Dataset& d,
                         const ChannelStats& stats, const MiningConfig& cfg) {
  Point mean;
  for (const auto& a : annots) {
    const auto& v = d.volume(a.image_id);
    const auto u = parse_pattern(v, p, stats, cfg.w_def);
    mean = mean + (unit_center(v.slice(p.key()).meta, u.pos) - a.part_box.center());
  }
  p.delta_bar = {mean.x / annots.size(), mean.y / annots.size()};
  double annotated = 0.0;
  for (const auto& a : annots) {
    const auto& v = d.volume(a.image_id);
    const auto u = parse_pattern(v, p, stats, cfg.w_def);
    annotated += u.score + spatial_compat(a.part_box.center(), unit_center(v.slice(p.key()).meta, u.pos), p);
  }
  double local = 0.0;
  for (const auto& v : d.volumes()) local += parse_pattern(v, p, stats, cfg.w_def).score;
  return annotated / annots.size() + cfg.local_weight * local / d.size();
}

}  // namespace

TEST(MineTemplate, FindsThePlantedChannel) {
  const auto data = synth_generate(planted_config(), 5);
  const auto stats = channel_stats(data.dataset);
  MiningConfig cfg;
  cfg.n = 1;
  cfg.window_radius = 2;
  const MiningContext ctx(data.dataset, stats, cfg);
  const auto annots = truth_list(data.truth, "", 8);
  const auto t = mine_template("only", annots, ctx);
  ASSERT_EQ(t.patterns.size(), 1u);
  EXPECT_EQ(t.patterns[0].layer, 1);
  EXPECT_EQ(t.patterns[0].channel, 2);
  EXPECT_LE(std::abs(t.patterns[0].delta_bar.x - 16.0), 16.0);
  EXPECT_LE(std::abs(t.patterns[0].delta_bar.y + 8.0), 16.0);
  EXPECT_DOUBLE_EQ(t.region_w, 32.0);
  EXPECT_EQ(t.support_count, 8);
}

TEST(MineTemplate, GreedyPairMatchesExhaustivePair) {
  SynthConfig c = planted_config(0.6);
  c.image_count = 12;
  c.image_w = c.image_h = 64;
  c.layers = {SynthLayer{0, 4, 16.0f, 32.0f, 8.0f}};
  c.templates = {SynthTemplate{"t", 1.0, 24.0, 24.0, {{0, 1, 8.0, 0.0, 1.0}, {0, 3, -8.0, 0.0, 0.5}}}};
  c.center_jitter_px = 8.0;
  const auto data = synth_generate(c, 17);
  const auto stats = channel_stats(data.dataset);
  MiningConfig cfg;
  cfg.n = 2;
  cfg.window_radius = 1;
  cfg.refinement_iterations = 0;
  const MiningContext ctx(data.dataset, stats, cfg);
  const auto annots = truth_list(data.truth, "", 6);
  const auto t = mine_template("t", annots, ctx);
  ASSERT_EQ(t.patterns.size(), 2u);

  std::vector<std::pair<LatentPattern, double>> all;
  const auto& ref = data.dataset[0];
  const double sigma = cfg.sigma_s_fraction * std::hypot(64.0, 64.0);
  for (const auto& s : ref.slices)
    for (int r = 0; r < s.meta.grid_h; ++r)
      for (int col = 0; col < s.meta.grid_w; ++col) {
        LatentPattern p{0, s.meta.layer, s.meta.channel, {r, col}, cfg.window_radius, {}, sigma};
        all.emplace_back(p, pattern_objective(p, annots, data.dataset, stats, cfg));
      }
  double best = -1e300;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j)
      if (all[i].first.key() != all[j].first.key()) best = std::max(best, all[i].second + all[j].second);
  const double got = pattern_objective(t.patterns[0], annots, data.dataset, stats, cfg) +
                     pattern_objective(t.patterns[1], annots, data.dataset, stats, cfg);
  EXPECT_NEAR(got, best, 1e-9);
}

TEST(MineTemplate, PlantedChannelsAreCovered) {
  auto cfg = aogqa::testing::tiny_config(30);
  cfg.noise = 0.0;
  cfg.bump_jitter_px = 0.0;
  cfg.part_absent_fraction = 0.0;
  const auto data = synth_generate(cfg, 2);
  const auto stats = channel_stats(data.dataset);
  for (int n : {3, 5}) {
    MiningConfig mc = aogqa::testing::tiny_mining();
    mc.n = n;
    const MiningContext ctx(data.dataset, stats, mc);
    for (const auto& tpl : cfg.templates) {
      const auto annots = truth_list(data.truth, tpl.label, 5);
      ASSERT_FALSE(annots.empty());
      const auto t = mine_template(tpl.label, annots, ctx);
      EXPECT_EQ(t.patterns.size(), static_cast<std::size_t>(n));
      std::set<SliceKey> mined;
      for (const auto& p : t.patterns) mined.insert(p.key());
      for (const auto& b : tpl.bumps)
        EXPECT_TRUE(mined.count({b.layer, b.channel})) << tpl.label << " n=" << n << " misses " << b.channel;
    }
  }
}

TEST(MineTemplate, PatternCountIsCappedByCandidates) {
  const auto data = synth_generate(planted_config(0.3), 1);
  const auto stats = channel_stats(data.dataset);
  MiningConfig cfg;
  cfg.n = 32;
  const MiningContext ctx(data.dataset, stats, cfg);
  const auto t = mine_template("only", truth_list(data.truth, "", 3), ctx);
  EXPECT_EQ(t.patterns.size(), 8u);  // one candidate per slice
  std::set<int> ids;
  for (const auto& p : t.patterns) {
    ids.insert(p.pattern_id);
    const auto win = pattern_window(data.dataset[0].slice(p.key()).meta, p.mu, p.window_radius);
    EXPECT_FALSE(win.empty());
    EXPECT_LE(win.size(), 81);
  }
  EXPECT_EQ(ids.size(), t.patterns.size());
}

TEST(RefineTemplate, IdenticalAnnotationsGiveIdenticalTemplate) {
  const auto data = synth_generate(planted_config(0.4), 4);
  const auto stats = channel_stats(data.dataset);
  MiningConfig cfg;
  cfg.n = 3;
  cfg.window_radius = 2;
  const MiningContext ctx(data.dataset, stats, cfg);
  const auto annots = truth_list(data.truth, "", 6);
  const auto t = mine_template("only", annots, ctx, 7);
  EXPECT_EQ(refine_template(t, annots, ctx), t);
  auto more = truth_list(data.truth, "", 9);
  const auto r = refine_template(t, more, ctx);
  EXPECT_EQ(r.template_id, 7);
  EXPECT_EQ(r.support_count, t.support_count + 3);
}

TEST(RefineTemplate, ConsistentAnnotationDoesNotLowerAnnotatedScore) {
  auto cfg = aogqa::testing::tiny_config(30);
  cfg.noise = 0.0;
  cfg.bump_jitter_px = 0.0;
  cfg.part_absent_fraction = 0.0;
  const auto data = synth_generate(cfg, 6);
  const auto stats = channel_stats(data.dataset);
  const MiningContext ctx(data.dataset, stats, aogqa::testing::tiny_mining());
  const auto all = truth_list(data.truth, "a");
  ASSERT_GE(all.size(), 4u);
  for (std::size_t k = 1; k + 1 < all.size(); ++k) {
    const std::vector<PartAnnotation> before(all.begin(), all.begin() + k);
    const std::vector<PartAnnotation> after(all.begin(), all.begin() + k + 1);
    const auto t0 = mine_template("a", before, ctx);
    const auto t1 = refine_template(t0, after, ctx);
    EXPECT_GE(mean_annotated_score(t1, after, ctx), mean_annotated_score(t0, after, ctx) - 1e-9) << k;
  }
}

TEST(GrowAog, NewLabelAddsBranchKnownLabelRefines) {
  const auto world = aogqa::testing::tiny_world(3);
  const auto& ctx = world.env->mining();
  const auto a = truth_list(world.truth, "a", 3);
  const auto b = truth_list(world.truth, "b", 1);
  AndOrGraph empty;
  empty.part_name = "part";

  std::vector<PartAnnotation> log{a[0]};
  auto g1 = grow_aog(empty, a[0], log, ctx);
  EXPECT_EQ(g1.templates.size(), 1u);
  EXPECT_TRUE(empty.templates.empty());

  log.push_back(b[0]);
  auto g2 = grow_aog(g1, b[0], log, ctx);
  ASSERT_EQ(g2.templates.size(), 2u);
  EXPECT_EQ(g2.templates[1].template_id, 1);

  log.push_back(a[1]);
  const auto g3 = grow_aog(g2, a[1], log, ctx);
  ASSERT_EQ(g3.templates.size(), 2u);
  EXPECT_EQ(g3.templates[0].support_count, 2);
  EXPECT_EQ(to_json(g3.templates[1]).dump(), to_json(g2.templates[1]).dump());
  EXPECT_EQ(g2.templates[0], g1.templates[0]);
}

TEST(BuildAog, OneBranchPerLabelInFirstSeenOrder) {
  const auto world = aogqa::testing::tiny_world(5);
  auto annots = truth_list(world.truth, "c", 2);
  for (const auto& x : truth_list(world.truth, "a", 2)) annots.push_back(x);
  const auto aog = build_aog("head", annots, world.env->mining());
  ASSERT_EQ(aog.templates.size(), 2u);
  EXPECT_EQ(aog.templates[0].label, "c");
  EXPECT_EQ(aog.templates[1].label, "a");
  EXPECT_EQ(aog.part_name, "head");
}

TEST(Mining, FlippedAnnotationUsesMirroredVolume) {
  const auto data = synth_generate(planted_config(), 8);
  const auto stats = channel_stats(data.dataset);
  MiningConfig cfg;
  cfg.n = 1;
  cfg.window_radius = 2;
  const MiningContext ctx(data.dataset, stats, cfg);
  auto annots = truth_list(data.truth, "", 6);
  const auto plain = mine_template("only", annots, ctx);
  // The same objects described from the mirrored side mine the same pattern.
  for (auto& a : annots) {
    a.part_box = mirror_box(a.part_box, 128);
    a.flipped = true;
  }
  const auto flipped = mine_template("only", annots, ctx);
  EXPECT_EQ(flipped.patterns[0].key(), plain.patterns[0].key());
  EXPECT_NEAR(flipped.patterns[0].delta_bar.x, -plain.patterns[0].delta_bar.x, 16.0);
}

TEST(Mining, Errors) {
  auto v = aogqa::testing::make_volume("x", 100, 100, {aogqa::testing::make_slice(0, 0, 6, 6, 16, 32, 8)});
  for (auto& x : v.slices[0].values) x = 1.0f;
  v.slices[0].values[3] = 2.0f;
  const Dataset d({}, {v});
  const auto stats = channel_stats(d);
  const MiningContext ctx(d, stats, aogqa::testing::tiny_mining());
  EXPECT_THROW(mine_template("t", std::vector<PartAnnotation>{}, ctx), PreconditionError);
  const std::vector<PartAnnotation> outside{{"x", {97, 50, 2, 4}, "t", false}};
  EXPECT_THROW(mine_template("t", outside, ctx), PreconditionError);
  const std::vector<PartAnnotation> unknown{{"nope", {10, 10, 5, 5}, "t", false}};
  EXPECT_THROW(mine_template("t", unknown, ctx), IoError);
  const std::vector<PartAnnotation> out_of_bounds{{"x", {90, 90, 20, 20}, "t", false}};
  EXPECT_THROW(mine_template("t", out_of_bounds, ctx), PreconditionError);
  MiningConfig bad;
  bad.n = 0;
  EXPECT_THROW(MiningContext(d, stats, bad), ConfigError);
}
