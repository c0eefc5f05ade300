// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "aogqa/evaluation.hpp"
#include "aogqa/service.hpp"
#include "support.hpp"

using namespace aogqa;
using aogqa::testing::tiny_qa;
using aogqa::testing::tiny_world;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void criterion(const std::string& name, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << "[exception: " << e.what() << "] ";
  }
  o.detail << "(" << std::fixed << std::setprecision(1) << seconds_since(t0) << " s)";
  std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.str().c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

QaSession fixed_clock(QaSession s) {
  s.set_clock([] { return std::int64_t{1}; });
  return s;
}

void parse_optimality(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(20240501);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto v = aogqa::testing::random_volume(rng, "r", 2, 3);
    const auto stats = channel_stats(std::vector{v, aogqa::testing::random_volume(rng, "s", 2, 3)});
    const auto aog = aogqa::testing::random_aog(rng, v);
    worst = std::max(worst, std::abs(parse(v, aog, stats).part_score - aogqa::testing::enumerate_parse(v, aog, stats)));
  }
  const double t = seconds_since(t0);
  o.require(worst <= 1e-9, "parse score differs from enumeration");
  o.require(t < 60.0, "runtime >= 60 s");
  o.detail << "500 instances, max |engine - enumeration| = " << worst << ", " << t << " s ";
}

void kl_identities(Outcome& o) {
  Rng rng(7);
  double min_kl = 0.0, self_kl = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.index(20);
    std::vector<double> p(n), q(n);
    for (auto& x : p) x = rng.uniform01();
    for (auto& x : q) x = rng.uniform(1e-6, 1.0 - 1e-6);
    const double lambda = rng.uniform(0.01, 2.0);
    min_kl = std::min(min_kl, kl_loss(p, q, lambda));
    self_kl = std::max(self_kl, std::abs(kl_loss(q, q, lambda)));
  }
  o.require(min_kl >= 0.0, "negative kl_loss");
  o.require(self_kl <= 1e-12, "kl_loss(P,P) != 0");

  double worst = 0.0;
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const auto w = tiny_world(seed, 14);
    auto cfg = tiny_qa(seed);
    cfg.mode = KlMode::full_kl;
    QaSession s(w.env, cfg);
    run_loop(s, make_ground_truth_oracle(w.truth), 1 + static_cast<int>(seed % 3), SelectionPolicy::random);
    for (std::size_t i = 0; i < 14; ++i) {
      if (s.is_asked(i)) continue;
      const double want =
          kl_loss(s.prior(), s.estimate(), s.lambda()) - kl_loss(s.prior(), s.predicted_estimate(i), s.lambda());
      worst = std::max(worst, std::abs(s.predict_gain(i) - want));
      ++checked;
    }
  }
  o.require(worst <= 1e-12, "full-KL gain differs from the loss difference");
  o.detail << "min kl = " << min_kl << ", max |kl(P,P)| = " << self_kl << ", " << checked
           << " gains over 200 sessions, max |gain - (KL(P,Q) - KL(P,Q'))| = " << worst << " ";
}

void selection_invariances(Outcome& o) {
  int same = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const auto w = tiny_world(seed, 16);
    auto c1 = tiny_qa(seed), c2 = tiny_qa(seed);
    c2.beta = 0.1 + 0.37 * static_cast<double>(seed);
    QaSession a(w.env, c1), b(w.env, c2);
    const auto oracle = make_ground_truth_oracle(w.truth);
    const int budget = 1 + static_cast<int>(seed % 5);
    run_loop(a, oracle, budget, SelectionPolicy::random);
    run_loop(b, oracle, budget, SelectionPolicy::random);
    if (a.unasked_count() == 0 || a.select_question().image_id == b.select_question().image_id) ++same;
  }
  o.require(same == 100, "beta scaling changed the selected question");

  double mismatch_total = 0.0;
  int mismatch_pairs = 0;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const auto w = tiny_world(seed, 20);
    QaSession s(w.env, tiny_qa(seed));
    run_loop(s, make_ground_truth_oracle(w.truth), 5, SelectionPolicy::random);
    const auto& env = s.env();
    for (std::size_t i = 0; i < 20; ++i) {
      if (s.is_asked(i)) continue;
      const double delta_l = s.mean_annotated_score() - s.inference_score(i);
      double matched = 0.0;
      for (std::size_t j = 0; j < 20; ++j) {
        const double d = appearance_dist(env.descriptor(j), env.descriptor(i), s.assigned_template(j),
                                         s.assigned_template(i));
        const double term = s.prior()[j] * std::exp(-env.alpha() * d);
        if (s.assigned_template(j) != s.assigned_template(i)) {
          mismatch_total += std::abs(term);
          ++mismatch_pairs;
        } else {
          matched += term;
        }
      }
      o.require(std::abs(s.predict_gain(i) - s.lambda() * s.config().beta * delta_l * matched) <= 1e-12,
                "gain differs from the matched-template sum");
    }
  }
  o.require(mismatch_total == 0.0, "a template-mismatch term is nonzero");
  o.require(mismatch_pairs > 0, "no mismatched pairs exercised");

  int identical = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto w = tiny_world(seed, 30);
    const auto oracle = make_ground_truth_oracle(w.truth);
    for (auto policy : {SelectionPolicy::active, SelectionPolicy::random}) {
      QaSession a(w.env, tiny_qa(seed)), b(w.env, tiny_qa(seed));
      const auto ta = run_loop(a, oracle, 8, policy), tb = run_loop(b, oracle, 8, policy);
      bool bits = ta.size() == tb.size();
      for (std::size_t k = 0; bits && k < ta.size(); ++k)
        bits = ta[k] == tb[k] && std::memcmp(&ta[k].loss, &tb[k].loss, sizeof(double)) == 0 &&
               std::memcmp(&ta[k].question.predicted_gain, &tb[k].question.predicted_gain, sizeof(double)) == 0;
      identical += bits ? 1 : 0;
    }
  }
  o.require(identical == 20, "run_loop traces differ for a fixed seed");
  o.detail << "beta scaling kept " << same << "/100 selections, " << mismatch_pairs
           << " mismatched pairs with total weight " << mismatch_total << ", " << identical
           << "/20 traces bit-identical ";
}

void structural_growth(Outcome& o) {
  double window_sum = 0.0;
  int patterns_seen = 0, sessions = 0;
  auto check_session = [&](const QaSession& s, int n) {
    std::set<std::string> labels;
    for (const auto& a : s.annotations()) labels.insert(a.template_label);
    const auto& aog = s.aog();
    o.require(aog.templates.size() == labels.size(), "template count != distinct labels");
    const auto& ref = s.env().dataset()[0];
    const std::size_t candidates = ref.slices.size();
    for (const auto& t : aog.templates) {
      o.require(labels.count(t.label) == 1, "template without an annotated label");
      o.require(t.patterns.size() == std::min<std::size_t>(static_cast<std::size_t>(n), candidates),
                "pattern count != min(n, candidates)");
      for (const auto& p : t.patterns) {
        const auto& meta = ref.slice(p.key()).meta;
        const int side = 2 * p.window_radius + 1;
        const auto win = pattern_window(meta, p.mu, p.window_radius);
        int units = 0;
        for (int r = p.mu.row - p.window_radius; r <= p.mu.row + p.window_radius; ++r)
          for (int c = p.mu.col - p.window_radius; c <= p.mu.col + p.window_radius; ++c)
            units += (r >= 0 && r < meta.grid_h && c >= 0 && c < meta.grid_w) ? 1 : 0;
        o.require(win.size() == units, "window size disagrees with clipped count");
        o.require(units <= side * side, "window larger than (2r+1)^2");
        window_sum += units;
        ++patterns_seen;
      }
    }
    ++sessions;
  };

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto w = tiny_world(seed, 30);
    QaSession s(w.env, tiny_qa(seed));
    run_loop(s, make_ground_truth_oracle(w.truth), 8);
    check_session(s, tiny_qa().mining.n);
  }
  for (const int n : {4, 32}) {
    ComparisonConfig cfg;
    cfg.qa.mining.n = n;
    const auto data = synth_generate(cfg.data, 1000 + static_cast<std::uint64_t>(n));
    auto env = std::make_shared<const QaEnvironment>(data.dataset, std::nullopt, cfg.qa.mining, cfg.qa.alpha);
    QaSession s(env, cfg.qa);
    run_loop(s, make_ground_truth_oracle(data.truth), 10);
    check_session(s, n);
  }
  o.detail << sessions << " sessions, " << patterns_seen << " patterns, mean window "
           << window_sum / std::max(1, patterns_seen) << " units (default radius 4 caps it at 81) ";
}

void annotation_efficiency(Outcome& o) {
  const auto t0 = Clock::now();
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1000; s < 1020; ++s) seeds.push_back(s);
  const auto r = compare_policies(ComparisonConfig{}, {5, 10, 15, 20}, seeds);
  const double t = seconds_since(t0);
  for (std::size_t b = 0; b < r.budgets.size(); ++b) {
    const double a = r.first.curve.points[b].mean, x = r.second.curve.points[b].mean;
    o.detail << "budget " << r.budgets[b] << " active " << std::setprecision(4) << a << " random " << x << "; ";
    o.require(a <= x, "active worse than random at budget " + std::to_string(r.budgets[b]));
    if (r.budgets[b] == 10) {
      o.require(a <= 0.9 * x, "less than 10% gain at budget 10");
      int discovered = 0;
      for (const auto& per_seed : r.first.per_seed) discovered += per_seed[b].templates == 3 ? 1 : 0;
      o.detail << "all 3 templates by budget 10 in " << discovered << "/20 seeds; ";
      o.require(discovered >= 18, "templates discovered in < 90% of seeds");
    }
  }
  o.require(t < 600.0, "benchmark took >= 10 min");
  o.detail << std::fixed << std::setprecision(1) << t << " s benchmark ";
}

void metrics(Outcome& o) {
  o.require(normalized_distance({3, 4}, {3, 4}, 100, 100) == 0.0, "pred = gt is not 0");
  o.require(std::abs(normalized_distance({50, 50}, {80, 90}, 100, 100) - 50.0 / 141.4213562373095) <= 1e-9,
            "(50,50)-(80,90) in 100x100");
  o.require(pcp_hit(Box{0, 0, 1, 1}, Box{0, 0, 1, 1}), "identical boxes");
  o.require(!pcp_hit(Box{0, 0, 1, 1}, Box{3, 3, 1, 1}), "disjoint boxes");
  o.require(std::abs(intersection_over_union(Box{0, 0, 1, 1}, Box{0.5, 0, 1, 1}) - 1.0 / 3.0) <= 1e-9,
            "half-offset IoU");
  o.require(!pcp_hit(Box{0, 0, 1, 1}, Box{0.5, 0, 1, 1}), "half-offset boxes");

  auto cfg = SynthConfig::standard_benchmark();
  cfg.image_count = 60;
  cfg.noise = cfg.bump_jitter_px = 0.0;
  cfg.part_absent_fraction = cfg.outlier_fraction = 0.0;
  const auto data = synth_generate(cfg, 12);
  const auto stats = channel_stats(data.dataset);
  const MiningContext ctx(data.dataset, stats, benchmark_qa_config().mining);
  std::vector<PartAnnotation> all;
  for (const auto& [id, a] : data.truth.by_image) all.push_back(*a);
  const auto report = evaluate(build_aog("part", all, ctx), data.dataset.volumes(), data.truth, stats);
  float coarsest = 0.0f;
  for (const auto& s : data.dataset[0].slices) coarsest = std::max(coarsest, s.meta.stride_px);
  const double bound = coarsest / std::hypot(double(cfg.image_w), double(cfg.image_h));
  o.require(report.pcp_percent && *report.pcp_percent == 100.0, "perfect model PCP < 100");
  o.require(report.mean_norm_dist && *report.mean_norm_dist <= bound, "perfect model distance above one stride");
  o.detail << "worked examples ok; perfect model PCP " << report.pcp_percent.value_or(-1) << "%, mean distance "
           << std::setprecision(4) << report.mean_norm_dist.value_or(-1) << " <= " << bound << " ";
}

// A crash is an exception thrown from inside the commit hook.
struct Killed {};

bool resume_matches(const std::shared_ptr<const QaEnvironment>& env, const GroundTruth& truth, const QaConfig& cfg,
                    int budget, int kill_at, bool torn_write, const std::filesystem::path& state) {
  const auto oracle = make_ground_truth_oracle(truth);
  auto reference = fixed_clock(QaSession(env, cfg));
  const auto want = run_loop(reference, oracle, budget);

  std::filesystem::remove(state);
  std::vector<TraceStep> got;
  auto first = fixed_clock(QaSession(env, cfg));
  try {
    run_loop(first, oracle, budget, SelectionPolicy::active, [&](const QaSession& s, const TraceStep& st) {
      const bool crash = static_cast<int>(got.size()) + 1 == kill_at;
      if (crash && torn_write) atomic_write(state, s.to_json().dump(), [] { throw Killed{}; });
      atomic_write(state, s.to_json().dump());
      got.push_back(st);
      if (crash) throw Killed{};
    });
  } catch (const Killed&) {
  }
  // With no committed answer on disk the restart begins from scratch.
  auto resumed = fixed_clock(std::filesystem::exists(state)
                                 ? QaSession::from_json(nlohmann::json::parse(detail::read_file(state)), env)
                                 : QaSession(env, cfg));
  const auto rest = run_loop(resumed, oracle, budget);
  got.insert(got.end(), rest.begin(), rest.end());
  return got == want && resumed.to_json() == reference.to_json();
}

void persistence(Outcome& o) {
  const auto dir = std::filesystem::temp_directory_path() / "aogqa_acceptance";
  std::filesystem::create_directories(dir);
  int runs = 0, ok = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto w = tiny_world(seed, 30);
    for (int kill_at : {1, 3, 6})
      for (bool torn : {false, true}) {
        ++runs;
        ok += resume_matches(w.env, w.truth, tiny_qa(seed), 8, kill_at, torn, dir / "state.json") ? 1 : 0;
      }
  }
  ComparisonConfig cfg;
  const auto data = synth_generate(cfg.data, 1000);
  auto env = std::make_shared<const QaEnvironment>(data.dataset, std::nullopt, cfg.qa.mining, cfg.qa.alpha);
  for (bool torn : {false, true}) {
    ++runs;
    ok += resume_matches(env, data.truth, cfg.qa, 10, 5, torn, dir / "state.json") ? 1 : 0;
  }
  o.require(ok == runs, "a resumed trace diverged");
  o.detail << ok << "/" << runs << " kill-and-restart runs reproduced the uninterrupted trace ";
}

}  // namespace

int main() {
  criterion("parse optimality", parse_optimality);
  criterion("KL identities", kl_identities);
  criterion("selection invariances", selection_invariances);
  criterion("structural growth", structural_growth);
  criterion("annotation efficiency", annotation_efficiency);
  criterion("metrics", metrics);
  criterion("persistence", persistence);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
