#pragma once

// `aogqa` command line: dataset generation, mining, parsing, the simulated and
// served QA loop, evaluation and the policy comparison.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "active_qa.hpp"
#include "annotation.hpp"
#include "evaluation.hpp"
#include "feature_store.hpp"
#include "mining.hpp"
#include "service.hpp"
#include "synth.hpp"

namespace aogqa::cli {

namespace fs = std::filesystem;

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::write_file(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline ChannelStats load_or_compute_stats(const std::string& stats_path, const Dataset& d) {
  return stats_path.empty() ? channel_stats(d) : channel_stats_from_json(read_json(stats_path));
}

struct MiningFlags {
  MiningConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--n", cfg.n, "Patterns per template")->check(CLI::PositiveNumber);
    app->add_option("--window-radius", cfg.window_radius, "Deformation window half-side (cells)")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--sigma-s-fraction", cfg.sigma_s_fraction, "Spatial scale as a fraction of the diagonal");
    app->add_option("--w-def", cfg.w_def, "Deformation penalty weight");
    app->add_option("--local-weight", cfg.local_weight, "Weight of the all-image local score");
    app->add_option("--candidate-stride", cfg.candidate_stride, "Grid stride of candidate centers")
        ->check(CLI::PositiveNumber);
    app->add_option("--refinement-iterations", cfg.refinement_iterations, "Refinement passes after mining")
        ->check(CLI::NonNegativeNumber);
  }
};

struct QaFlags {
  QaConfig cfg;
  std::string mode = "simplified";
  void add(CLI::App* app) {
    app->add_option("--alpha", cfg.alpha, "Appearance-distance decay");
    app->add_option("--beta", cfg.beta, "Inference-score temperature");
    app->add_option("--epsilon", cfg.epsilon, "Floor for Q");
    app->add_option("--mode", mode, "KL mode")->check(CLI::IsMember({"simplified", "full_kl"}));
    app->add_flag("--random-first-question", cfg.random_first_question, "Draw the first question at random");
    app->add_option("--seed", cfg.seed, "Session seed");
    app->add_option("--part-name", cfg.part_name, "Name of the part being localized");
  }
  QaConfig resolve(const MiningConfig& mining) const {
    QaConfig c = cfg;
    c.mode = mode == "full_kl" ? KlMode::full_kl : KlMode::simplified;
    c.mining = mining;
    return c;
  }
};

inline std::vector<PartAnnotation> present_annotations(const GroundTruth& gt) {
  std::vector<PartAnnotation> out;
  for (const auto& [id, a] : gt.by_image)
    if (a) out.push_back(*a);
  return out;
}

/// Runs the command line; returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"And-Or graph part localization with active question answering", "aogqa"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "Key=value config file (see --print-config)");
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the effective configuration and exit")->configurable(false);
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with ground truth");
  std::string synth_out, synth_config, synth_preset = "standard";
  std::uint64_t synth_seed = 0;
  int synth_count = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--preset", synth_preset, "Base configuration")->check(CLI::IsMember({"standard", "clean"}));
  synth->add_option("--synth-config", synth_config, "JSON overrides for the generator");
  synth->add_option("--count", synth_count, "Image count override (0 keeps the preset)")->check(CLI::NonNegativeNumber);

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "Compute per-channel normalization statistics");
  std::string stats_manifest, stats_out;
  stats_cmd->add_option("--manifest", stats_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  stats_cmd->add_option("--out", stats_out, "Output JSON")->required();

  // mine
  auto* mine = app.add_subcommand("mine", "Build an AOG from an annotation file");
  std::string mine_manifest, mine_annots, mine_out, mine_stats, mine_part = "part";
  MiningFlags mine_flags;
  mine->add_option("--manifest", mine_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  mine->add_option("--annotations", mine_annots, "Annotation JSONL")->required()->check(CLI::ExistingFile);
  mine->add_option("--out", mine_out, "Output AOG JSON")->required();
  mine->add_option("--stats", mine_stats, "Channel stats JSON (computed when omitted)");
  mine->add_option("--part-name", mine_part, "Part name");
  mine_flags.add(mine);

  // parse
  auto* parse_cmd = app.add_subcommand("parse", "Localize the part in every image");
  std::string parse_manifest, parse_aog, parse_out, parse_stats, parse_gt, parse_csv;
  parse_cmd->add_option("--manifest", parse_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  parse_cmd->add_option("--aog", parse_aog, "AOG JSON")->required()->check(CLI::ExistingFile);
  parse_cmd->add_option("--out", parse_out, "Output JSON")->required();
  parse_cmd->add_option("--stats", parse_stats, "Channel stats JSON (computed when omitted)");
  parse_cmd->add_option("--gt", parse_gt, "Ground truth JSONL; adds metrics to the report");
  parse_cmd->add_option("--csv", parse_csv, "Per-image CSV (needs --gt)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate an AOG against ground truth");
  std::string eval_manifest, eval_aog, eval_gt, eval_out, eval_stats, eval_csv;
  eval->add_option("--manifest", eval_manifest, "Test manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--aog", eval_aog, "AOG JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--gt", eval_gt, "Ground truth JSONL")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "Report JSON")->required();
  eval->add_option("--stats", eval_stats, "Channel stats JSON (computed when omitted)");
  eval->add_option("--csv", eval_csv, "Per-image CSV");

  // qa
  auto* qa = app.add_subcommand("qa", "Interactive question answering");
  qa->require_subcommand(1);
  auto* simulate = qa->add_subcommand("simulate", "Run the QA loop against a ground-truth oracle");
  std::string sim_manifest, sim_gt, sim_trace, sim_state, sim_policy = "active";
  int sim_budget = 10;
  MiningFlags sim_mining;
  QaFlags sim_qa;
  simulate->add_option("--manifest", sim_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  simulate->add_option("--gt", sim_gt, "Ground truth JSONL")->required()->check(CLI::ExistingFile);
  simulate->add_option("--budget", sim_budget, "Maximum annotations")->check(CLI::PositiveNumber);
  simulate->add_option("--trace", sim_trace, "Trace JSONL output")->required();
  simulate->add_option("--state", sim_state, "Session file, persisted after every answer and resumed if present");
  simulate->add_option("--policy", sim_policy, "Question selection")->check(CLI::IsMember({"active", "random"}));
  sim_mining.add(simulate);
  sim_qa.add(simulate);

  auto* serve = qa->add_subcommand("serve", "Serve the QA loop over HTTP under /v1");
  std::string serve_manifest, serve_state, serve_address;
  int serve_port = 0;
  MiningFlags serve_mining;
  QaFlags serve_qa;
  serve->add_option("--manifest", serve_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  serve->add_option("--state", serve_state, "Session file")->required();
  serve->add_option("--address", serve_address, "Bind address")->envname("AOGQA_ADDRESS")->default_str("127.0.0.1");
  serve->add_option("--port", serve_port, "Bind port")->envname("AOGQA_PORT")->default_str("8080");
  serve_mining.add(serve);
  serve_qa.add(serve);

  // compare
  auto* compare = app.add_subcommand("compare", "Compare active and random selection on synthetic data");
  std::string cmp_out, cmp_json, cmp_synth;
  int cmp_seeds = 20, cmp_held = 100;
  std::uint64_t cmp_seed_base = 1000;
  std::vector<int> cmp_budgets{5, 10, 15, 20};
  MiningFlags cmp_mining;
  cmp_mining.cfg = benchmark_qa_config().mining;
  QaFlags cmp_qa;
  compare->add_option("--seeds", cmp_seeds, "Number of seeds")->check(CLI::Range(5, 100000));
  compare->add_option("--seed-base", cmp_seed_base, "First seed");
  compare->add_option("--budgets", cmp_budgets, "Annotation budgets")->delimiter(',');
  compare->add_option("--held-out", cmp_held, "Held-out images per seed")->check(CLI::PositiveNumber);
  compare->add_option("--synth-config", cmp_synth, "JSON overrides for the generator");
  compare->add_option("--out", cmp_out, "Curves CSV")->required();
  compare->add_option("--json", cmp_json, "Per-seed results JSON");
  cmp_mining.add(compare);
  cmp_qa.add(compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }
  if (print_config) {
    // Only the invoked subcommand path, so the output can be fed back with --config.
    std::string prefix;
    for (const CLI::App* s = &app; !s->get_subcommands().empty();) {
      s = s->get_subcommands().front();
      prefix += s->get_name() + ".";
    }
    std::istringstream all(app.config_to_str(true, false));
    for (std::string line; std::getline(all, line);)
      if (line.rfind(prefix, 0) == 0) out << line << "\n";
    return 0;
  }

  try {
    if (*synth) {
      SynthConfig cfg = SynthConfig::standard_benchmark();
      if (synth_preset == "clean") {
        cfg.noise = 0.0;
        cfg.bump_jitter_px = 0.0;
        cfg.outlier_fraction = 0.0;
        cfg.part_absent_fraction = 0.0;
      }
      if (!synth_config.empty()) cfg = synth_config_from_json(read_json(synth_config), cfg);
      if (synth_count > 0) cfg.image_count = synth_count;
      const auto data = synth_generate(cfg, synth_seed);
      const auto manifest = save_dataset(data.dataset, synth_out);
      write_ground_truth(fs::path(synth_out) / "ground_truth.jsonl", data.truth);
      write_annotations(fs::path(synth_out) / "annotations.jsonl", present_annotations(data.truth));
      write_json(fs::path(synth_out) / "synth_config.json", {{"seed", synth_seed}, {"config", to_json(cfg)}});
      out << "wrote " << data.dataset.size() << " volumes to " << manifest.string() << "\n";
    } else if (*stats_cmd) {
      const auto d = load_dataset(stats_manifest);
      write_json(stats_out, to_json(channel_stats(d)));
    } else if (*mine) {
      mine_flags.cfg.validate();
      const auto d = load_dataset(mine_manifest);
      const auto stats = load_or_compute_stats(mine_stats, d);
      const MiningContext ctx(d, stats, mine_flags.cfg);
      const auto annots = read_annotations(mine_annots);
      const auto aog = build_aog(mine_part, annots, ctx);
      write_json(mine_out, to_json(aog));
      out << "mined " << aog.templates.size() << " templates, " << aog.pattern_count() << " patterns from "
          << annots.size() << " annotations\n";
    } else if (*parse_cmd) {
      const auto d = load_dataset(parse_manifest);
      const auto stats = load_or_compute_stats(parse_stats, d);
      const auto aog = aog_from_json(read_json(parse_aog));
      const auto parses = parse_all(d.volumes(), aog, stats);
      nlohmann::json j{{"parses", nlohmann::json::array()}};
      for (const auto& pg : parses) j["parses"].push_back(to_json(pg));
      if (!parse_gt.empty()) {
        const auto report = evaluate(aog, d.volumes(), read_ground_truth(parse_gt), stats);
        j["report"] = to_json(report);
        if (!parse_csv.empty()) detail::write_file(parse_csv, report_csv(report));
        if (report.pcp_percent) out << "PCP " << *report.pcp_percent << "%\n";
      } else if (!parse_csv.empty()) {
        throw ConfigError("--csv needs --gt");
      }
      write_json(parse_out, j);
    } else if (*eval) {
      const auto d = load_dataset(eval_manifest);
      const auto stats = load_or_compute_stats(eval_stats, d);
      const auto report = evaluate(aog_from_json(read_json(eval_aog)), d.volumes(), read_ground_truth(eval_gt), stats);
      write_json(eval_out, to_json(report));
      if (!eval_csv.empty()) detail::write_file(eval_csv, report_csv(report));
      if (report.mean_norm_dist)
        out << "mean normalized distance " << *report.mean_norm_dist << ", PCP " << *report.pcp_percent << "%\n";
      else
        out << "no images with a visible part\n";
    } else if (*simulate) {
      const auto cfg = sim_qa.resolve(sim_mining.cfg);
      cfg.mining.validate();
      auto d = load_dataset(sim_manifest);
      const auto gt = read_ground_truth(sim_gt);
      auto env = std::make_shared<const QaEnvironment>(std::move(d), std::nullopt, cfg.mining, cfg.alpha,
                                                       fs::absolute(sim_manifest).string());
      const bool resume = !sim_state.empty() && fs::exists(sim_state);
      QaSession session = resume ? QaSession::from_json(read_json(sim_state), env) : QaSession(env, cfg);
      std::ofstream trace(sim_trace, resume ? std::ios::app : std::ios::trunc);
      if (!trace) throw IoError("cannot write " + sim_trace);
      if (static_cast<int>(session.annotations().size()) < sim_budget) {
        run_loop(session, make_ground_truth_oracle(gt), sim_budget,
                 sim_policy == "random" ? SelectionPolicy::random : SelectionPolicy::active,
                 [&](const QaSession& s, const TraceStep& st) {
                   trace << to_json(st).dump() << "\n";
                   trace.flush();
                   if (!sim_state.empty()) atomic_write(sim_state, s.to_json().dump());
                 });
      }
      out << session.step() << " questions, " << session.annotations().size() << " annotations, "
          << session.aog().templates.size() << " templates\n";
    } else if (*serve) {
      const auto cfg = serve_qa.resolve(serve_mining.cfg);
      cfg.mining.validate();
      if (serve_address.empty()) serve_address = "127.0.0.1";
      if (serve_port == 0) serve_port = 8080;
      auto env = std::make_shared<const QaEnvironment>(load_dataset(serve_manifest), std::nullopt, cfg.mining,
                                                       cfg.alpha, fs::absolute(serve_manifest).string());
      QaService service(env, cfg, serve_state);
      httplib::Server server;
      service.mount(server);
      out << "serving on http://" << serve_address << ":" << serve_port << "/v1\n" << std::flush;
      if (!server.listen(serve_address, serve_port)) throw IoError("cannot bind " + serve_address);
    } else if (*compare) {
      ComparisonConfig cfg;
      if (!cmp_synth.empty()) cfg.data = synth_config_from_json(read_json(cmp_synth), cfg.data);
      cfg.held_out_images = cmp_held;
      cfg.qa = cmp_qa.resolve(cmp_mining.cfg);
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < cmp_seeds; ++i) seeds.push_back(cmp_seed_base + static_cast<std::uint64_t>(i));
      const auto r = compare_policies(cfg, cmp_budgets, seeds);
      detail::write_file(cmp_out, curves_csv({r.first.curve, r.second.curve}));
      if (!cmp_json.empty()) {
        nlohmann::json j{{"budgets", r.budgets}, {"seeds", r.seeds}, {"policies", nlohmann::json::array()}};
        for (const auto* run : {&r.first, &r.second}) {
          nlohmann::json per_seed = nlohmann::json::array();
          for (const auto& s : run->per_seed) {
            nlohmann::json row = nlohmann::json::array();
            for (const auto& o : s)
              row.push_back({{"mean_norm_dist", o.mean_norm_dist},
                             {"templates", o.templates},
                             {"questions", o.questions},
                             {"annotations", o.annotations}});
            per_seed.push_back(row);
          }
          j["policies"].push_back({{"policy", run->curve.policy}, {"per_seed", per_seed}});
        }
        write_json(cmp_json, j);
      }
      for (std::size_t b = 0; b < r.budgets.size(); ++b)
        out << "budget " << r.budgets[b] << ": " << r.first.curve.policy << " " << r.first.curve.points[b].mean << "  "
            << r.second.curve.policy << " " << r.second.curve.points[b].mean << "\n";
    }
  } catch (const std::exception& e) {
    err << "aogqa: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace aogqa::cli
