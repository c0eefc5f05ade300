#pragma once

// Active question answering. Each step picks the un-asked object whose
// annotation is predicted to reduce KL(P || Q) the most, asks about the current
// parse of that object, and folds the answer back into the prior P, the
// annotation log and the AOG.
//
// P(y=+1|I): 1 for objects known to contain the part, 0 for objects known not
// to, and the mean over asked objects for everything else.
// Q(y=+1|I): exp(beta * L(I)) / Z, floored/capped to [eps, 1 - eps].
//
// Two modes:
//   simplified (default)  P(y=-1) is dropped, so Z cancels and
//                         dKL(I~) = lambda * beta * dL(I~) * sum_I' P(+|I') exp(-alpha dist(I', I~)).
//                         Q then holds beta * L(I) as a log-score.
//   full_kl               the literal two-outcome KL with Z = max_I exp(beta L(I)).

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "annotation.hpp"
#include "aog.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "mining.hpp"
#include "random.hpp"

namespace aogqa {

enum class KlMode { simplified, full_kl };

struct QaConfig {
  double alpha = 4.0;
  double beta = 1.0;
  double epsilon = 1e-6;
  KlMode mode = KlMode::simplified;
  bool random_first_question = false;
  std::uint64_t seed = 0;
  std::string part_name = "part";
  MiningConfig mining;

  bool operator==(const QaConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Questions and answers
// ---------------------------------------------------------------------------

struct Question {
  std::string image_id;
  std::optional<int> template_id;  // empty while the AOG has no templates
  std::optional<std::string> template_label;
  std::optional<Box> box;
  double predicted_gain = 0.0;
  int step = 0;  // number of answers committed when the question was issued

  bool operator==(const Question&) const = default;
};

namespace answers {
struct Correct {
  bool operator==(const Correct&) const = default;
};
struct WrongLocation {
  Box box;
  bool operator==(const WrongLocation&) const = default;
};
struct WrongTemplateAndLocation {
  Box box;
  std::string template_label;
  bool flipped = false;
  bool operator==(const WrongTemplateAndLocation&) const = default;
};
struct NewTemplate {
  Box box;
  std::string template_label;
  bool operator==(const NewTemplate&) const = default;
};
struct PartAbsent {
  bool operator==(const PartAbsent&) const = default;
};
}  // namespace answers

using Answer = std::variant<answers::Correct, answers::WrongLocation, answers::WrongTemplateAndLocation,
                            answers::NewTemplate, answers::PartAbsent>;

/// 1-based answer number.
inline int answer_kind(const Answer& a) { return static_cast<int>(a.index()) + 1; }

inline const char* answer_name(const Answer& a) {
  static constexpr const char* names[] = {"correct", "wrong_location", "wrong_template_and_location", "new_template",
                                          "part_absent"};
  return names[a.index()];
}

inline nlohmann::json to_json(const Answer& a) {
  nlohmann::json j{{"type", answer_name(a)}};
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, answers::WrongLocation>) {
          j["box"] = box_to_json(x.box);
        } else if constexpr (std::is_same_v<T, answers::WrongTemplateAndLocation>) {
          j["box"] = box_to_json(x.box);
          j["template_label"] = x.template_label;
          j["flipped"] = x.flipped;
        } else if constexpr (std::is_same_v<T, answers::NewTemplate>) {
          j["box"] = box_to_json(x.box);
          j["template_label"] = x.template_label;
        }
      },
      a);
  return j;
}

/// Strict: a box only for answers 2-4, a label only for 3-4, a flip flag only for 3.
inline Answer answer_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
    throw FormatError("answer must be an object with a string 'type'");
  const std::string type = j["type"];
  auto need_box = [&]() -> Box {
    if (!j.contains("box")) throw FormatError("answer '" + type + "' requires a box");
    Box b;
    try {
      b = box_from_json(j["box"]);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("box: ") + e.what());
    }
    if (!b.valid()) throw FormatError("answer box must have positive width and height");
    return b;
  };
  auto need_label = [&]() -> std::string {
    if (!j.contains("template_label") || !j["template_label"].is_string() ||
        j["template_label"].get<std::string>().empty())
      throw FormatError("answer '" + type + "' requires a template_label");
    return j["template_label"];
  };
  auto forbid = [&](const char* key) {
    if (j.contains(key)) throw FormatError(std::string("answer '") + type + "' must not carry '" + key + "'");
  };
  if (type == "correct") {
    forbid("box"), forbid("template_label"), forbid("flipped");
    return answers::Correct{};
  }
  if (type == "wrong_location") {
    forbid("template_label"), forbid("flipped");
    return answers::WrongLocation{need_box()};
  }
  if (type == "wrong_template_and_location") {
    bool flipped = false;
    if (j.contains("flipped")) {
      if (!j["flipped"].is_boolean()) throw FormatError("'flipped' must be a boolean");
      flipped = j["flipped"];
    }
    return answers::WrongTemplateAndLocation{need_box(), need_label(), flipped};
  }
  if (type == "new_template") {
    forbid("flipped");
    return answers::NewTemplate{need_box(), need_label()};
  }
  if (type == "part_absent") {
    forbid("box"), forbid("template_label"), forbid("flipped");
    return answers::PartAbsent{};
  }
  throw FormatError("unknown answer type '" + type + "'");
}

inline nlohmann::json to_json(const Question& q) {
  nlohmann::json j{{"image_id", q.image_id}, {"predicted_gain", q.predicted_gain}, {"step", q.step}};
  j["template_id"] = q.template_id ? nlohmann::json(*q.template_id) : nlohmann::json(nullptr);
  j["template_label"] = q.template_label ? nlohmann::json(*q.template_label) : nlohmann::json(nullptr);
  j["box"] = q.box ? box_to_json(*q.box) : nlohmann::json(nullptr);
  return j;
}

inline Question question_from_json(const nlohmann::json& j) {
  Question q;
  q.image_id = j.at("image_id").get<std::string>();
  q.predicted_gain = j.at("predicted_gain").get<double>();
  q.step = j.at("step").get<int>();
  if (j.contains("template_id") && !j["template_id"].is_null()) q.template_id = j["template_id"].get<int>();
  if (j.contains("template_label") && !j["template_label"].is_null())
    q.template_label = j["template_label"].get<std::string>();
  if (j.contains("box") && !j["box"].is_null()) q.box = box_from_json(j["box"]);
  return q;
}

// ---------------------------------------------------------------------------
// Appearance descriptors
// ---------------------------------------------------------------------------

/// Diagonal reliability weights M over the flattened top conv-layer.
struct DescriptorWeights {
  int top_layer = 0;
  std::vector<SliceKey> channels;  // sorted
  std::vector<double> m;           // one per dimension, max 1
};

inline std::vector<SliceKey> top_layer_channels(const FeatureVolume& v) {
  const auto top = v.top_layer();
  if (!top) throw MissingSliceError("volume '" + v.image_id + "' has no conv-layers");
  std::vector<SliceKey> keys;
  for (const auto& s : v.slices)
    if (s.meta.layer == *top) keys.push_back(s.meta.key());
  std::sort(keys.begin(), keys.end());
  return keys;
}

/// M_ii proportional to exp(mean over the dataset of the z-scored response of dimension i).
inline DescriptorWeights descriptor_weights(std::span<const FeatureVolume> volumes, const ChannelStats& stats) {
  if (volumes.empty()) throw PreconditionError("descriptor weights need at least one volume");
  DescriptorWeights w;
  w.channels = top_layer_channels(volumes.front());
  w.top_layer = w.channels.front().layer;
  std::vector<double> mean_z;
  for (const auto& v : volumes) {
    std::size_t d = 0;
    for (const auto& key : w.channels) {
      const Slice& s = v.slice(key);
      if (mean_z.size() < d + s.values.size()) mean_z.resize(d + s.values.size(), 0.0);
      for (float x : s.values) mean_z[d++] += stats.z(key, x);
    }
  }
  double max_m = 0.0;
  w.m.resize(mean_z.size());
  for (std::size_t i = 0; i < mean_z.size(); ++i) {
    w.m[i] = std::exp(mean_z[i] / static_cast<double>(volumes.size()));
    max_m = std::max(max_m, w.m[i]);
  }
  for (auto& x : w.m) x /= max_m;
  return w;
}

/// phi = M f, with f the flattened top-layer activations.
inline std::vector<double> image_descriptor(const FeatureVolume& v, const DescriptorWeights& w) {
  std::vector<double> phi;
  phi.reserve(w.m.size());
  for (const auto& key : w.channels) {
    const Slice* s = v.find(key);
    if (s == nullptr) throw MissingSliceError("volume '" + v.image_id + "' lacks the top conv-layer");
    for (float x : s->values) phi.push_back(x);
  }
  if (phi.size() != w.m.size()) throw PreconditionError("descriptor dimension mismatch for '" + v.image_id + "'");
  for (std::size_t i = 0; i < phi.size(); ++i) phi[i] *= w.m[i];
  return phi;
}

/// 1 - cosine similarity; infinite when both objects carry different template assignments.
inline double appearance_dist(std::span<const double> a, std::span<const double> b, std::optional<int> template_a,
                              std::optional<int> template_b) {
  if (a.size() != b.size()) throw PreconditionError("descriptor dimensions differ");
  if (template_a && template_b && *template_a != *template_b) return std::numeric_limits<double>::infinity();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 && nb == 0.0) throw PreconditionError("appearance distance undefined for two zero descriptors");
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// KL loss
// ---------------------------------------------------------------------------

/// lambda * sum_I sum_y P(y|I) log(P(y|I) / Q(y|I)) over binary y, with 0 log 0 = 0.
inline double kl_loss(std::span<const double> p_pos, std::span<const double> q_pos, double lambda) {
  if (p_pos.size() != q_pos.size()) throw PreconditionError("kl_loss: P and Q sizes differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < p_pos.size(); ++i) {
    const double p = p_pos[i], q = q_pos[i];
    if (p > 0.0) sum += p * std::log(p / q);
    if (p < 1.0) sum += (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
  }
  return lambda * sum;
}

// ---------------------------------------------------------------------------
// Shared, immutable environment of a session
// ---------------------------------------------------------------------------

/// Dataset, statistics, mining caches and pairwise appearance similarities.
/// Built once and shared read-only by every session over the same data.
class QaEnvironment {
 public:
  QaEnvironment(Dataset dataset, std::optional<ChannelStats> stats, MiningConfig mining, double alpha,
                std::string manifest_path = {})
      : dataset_(std::move(dataset)),
        stats_(stats ? std::move(*stats) : channel_stats(dataset_)),
        mining_(dataset_, stats_, mining),
        alpha_(alpha),
        manifest_path_(std::move(manifest_path)) {
    if (dataset_.empty()) throw PreconditionError("QA needs a non-empty dataset");
    weights_ = descriptor_weights(dataset_.volumes(), stats_);
    const std::size_t n = dataset_.size();
    descriptors_.reserve(n);
    for (const auto& v : dataset_.volumes()) descriptors_.push_back(image_descriptor(v, weights_));
    dist_.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        dist_[i * n + j] = dist_[j * n + i] =
            appearance_dist(descriptors_[i], descriptors_[j], std::nullopt, std::nullopt);
    similarity_.resize(n * n);
    for (std::size_t k = 0; k < n * n; ++k) similarity_[k] = std::exp(-alpha_ * dist_[k]);
  }

  QaEnvironment(const QaEnvironment&) = delete;
  QaEnvironment& operator=(const QaEnvironment&) = delete;

  const Dataset& dataset() const { return dataset_; }
  const ChannelStats& stats() const { return stats_; }
  const MiningContext& mining() const { return mining_; }
  const DescriptorWeights& weights() const { return weights_; }
  const std::vector<double>& descriptor(std::size_t i) const { return descriptors_[i]; }
  double alpha() const { return alpha_; }
  const std::string& manifest_path() const { return manifest_path_; }

  /// Template-agnostic appearance distance.
  double dist(std::size_t i, std::size_t j) const { return dist_[i * dataset_.size() + j]; }
  /// exp(-alpha * dist(i, j)).
  double similarity(std::size_t i, std::size_t j) const { return similarity_[i * dataset_.size() + j]; }

 private:
  Dataset dataset_;
  ChannelStats stats_;
  MiningContext mining_;
  double alpha_;
  std::string manifest_path_;
  DescriptorWeights weights_;
  std::vector<std::vector<double>> descriptors_;
  std::vector<double> dist_;
  std::vector<double> similarity_;
};

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

struct AnswerRecord {
  Question question;
  Answer answer;
  std::int64_t timestamp_ms = 0;
  bool operator==(const AnswerRecord&) const = default;
};

enum class SelectionPolicy { active, random };

struct TraceStep {
  int step = 0;
  Question question;
  Answer answer;
  double loss = 0.0;
  int annotations = 0;
  int templates = 0;
  std::size_t patterns = 0;
  bool operator==(const TraceStep&) const = default;
};

inline nlohmann::json to_json(const TraceStep& s) {
  return {{"step", s.step},         {"question", to_json(s.question)}, {"answer", to_json(s.answer)},
          {"loss", s.loss},         {"annotations", s.annotations},   {"templates", s.templates},
          {"patterns", s.patterns}};
}

class QaSession {
 public:
  using Clock = std::function<std::int64_t()>;

  QaSession(std::shared_ptr<const QaEnvironment> env, QaConfig cfg)
      : env_(std::move(env)), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    if (!env_) throw PreconditionError("session needs an environment");
    const std::size_t n = env_->dataset().size();
    aog_.part_name = cfg_.part_name;
    aog_.config = env_->mining().config();
    p_.assign(n, 1.0);
    q_.assign(n, cfg_.epsilon);
    asked_flags_.assign(n, false);
    clock_ = [] {
      return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
          .count();
    };
  }

  // -- accessors ------------------------------------------------------------
  const QaEnvironment& env() const { return *env_; }
  std::shared_ptr<const QaEnvironment> env_ptr() const { return env_; }
  const QaConfig& config() const { return cfg_; }
  const AndOrGraph& aog() const { return aog_; }
  const std::vector<double>& prior() const { return p_; }
  /// Probabilities in full-KL mode (and while the AOG is empty); beta*L log-scores otherwise.
  const std::vector<double>& estimate() const { return q_; }
  bool estimate_is_log_score() const { return cfg_.mode == KlMode::simplified && !aog_.empty(); }
  const std::vector<std::string>& asked() const { return asked_; }
  bool is_asked(std::size_t i) const { return asked_flags_[i]; }
  const std::vector<PartAnnotation>& annotations() const { return annotations_; }
  const std::vector<AnswerRecord>& answer_log() const { return log_; }
  const std::vector<ParseGraph>& parses() const { return parses_; }
  int step() const { return static_cast<int>(log_.size()); }
  double lambda() const { return 1.0 / static_cast<double>(env_->dataset().size()); }
  void set_clock(Clock c) { clock_ = std::move(c); }

  std::set<std::string> annotated_labels() const {
    std::set<std::string> out;
    for (const auto& a : annotations_) out.insert(a.template_label);
    return out;
  }

  std::size_t unasked_count() const { return env_->dataset().size() - asked_.size(); }

  /// Current template assignment of an object, if any.
  std::optional<int> assigned_template(std::size_t i) const {
    if (parses_.empty()) return std::nullopt;
    return parses_[i].template_id;
  }

  double inference_score(std::size_t i) const {
    if (parses_.empty()) throw EmptyModelError("no AOG yet");
    return parses_[i].part_score;
  }

  // -- P and Q --------------------------------------------------------------

  /// Recomputes Q from the current parses.
  const std::vector<double>& estimate_q() {
    const double eps = cfg_.epsilon;
    if (aog_.empty()) {
      std::fill(q_.begin(), q_.end(), eps);
      return q_;
    }
    if (cfg_.mode == KlMode::simplified) {
      for (std::size_t i = 0; i < q_.size(); ++i) q_[i] = cfg_.beta * parses_[i].part_score;
      return q_;
    }
    const double log_z = max_log_score();
    for (std::size_t i = 0; i < q_.size(); ++i)
      q_[i] = std::clamp(std::exp(cfg_.beta * parses_[i].part_score - log_z), eps, 1.0 - eps);
    return q_;
  }

  /// Applies the answer for object `id` to P: asked objects get 0/1, un-asked the asked mean.
  const std::vector<double>& update_prior(const std::string& id, const Answer& a) {
    const std::size_t idx = env_->dataset().index_of(id);
    known_[idx] = std::holds_alternative<answers::PartAbsent>(a) ? 0.0 : 1.0;
    recompute_prior();
    return p_;
  }

  /// Loss reported in traces: kl_loss in full mode; in simplified mode the same
  /// divergence with P(y=-1) dropped and Z = 1.
  double loss() const {
    if (cfg_.mode == KlMode::full_kl) return kl_loss(p_, q_, lambda());
    double sum = 0.0;
    for (std::size_t i = 0; i < p_.size(); ++i) {
      const double log_q = estimate_is_log_score() ? q_[i] : std::log(q_[i]);
      if (p_[i] > 0.0) sum += p_[i] * (std::log(p_[i]) - log_q);
    }
    return lambda() * sum;
  }

  // -- question ranking -----------------------------------------------------

  /// Predicted decrease of the KL divergence if object `idx` were annotated.
  double predict_gain(std::size_t idx) const {
    if (idx >= asked_flags_.size()) throw LookupError("image index out of range");
    if (asked_flags_[idx]) throw PreconditionError("object '" + image_id(idx) + "' has already been asked");
    if (annotations_.empty() || aog_.empty()) throw PreconditionError("gain prediction needs at least one annotation");
    const double delta_l = mean_annotated_score() - parses_[idx].part_score;
    const std::size_t n = p_.size();
    const int tpl = parses_[idx].template_id;
    if (cfg_.mode == KlMode::simplified) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (parses_[j].template_id == tpl) s += p_[j] * env_->similarity(j, idx);
      return lambda() * cfg_.beta * delta_l * s;
    }
    const auto q_new = predicted_estimate(idx);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = p_[j];
      if (p > 0.0) s += p * std::log(q_new[j] / q_[j]);
      if (p < 1.0) s += (1.0 - p) * std::log((1.0 - q_new[j]) / (1.0 - q_[j]));
    }
    return lambda() * s;
  }

  /// Full-KL mode: Q~ after a hypothetical annotation of `idx` (Z held at its current value).
  std::vector<double> predicted_estimate(std::size_t idx) const {
    if (cfg_.mode != KlMode::full_kl) throw PreconditionError("predicted_estimate is defined in full-KL mode");
    const double delta_l = mean_annotated_score() - parses_[idx].part_score;
    const double log_z = max_log_score();
    const int tpl = parses_[idx].template_id;
    std::vector<double> out(p_.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
      const double w = parses_[j].template_id == tpl ? env_->similarity(j, idx) : 0.0;
      const double l_new = parses_[j].part_score + delta_l * w;
      out[j] = std::clamp(std::exp(cfg_.beta * l_new - log_z), cfg_.epsilon, 1.0 - cfg_.epsilon);
    }
    return out;
  }

  /// Mean L(I) over annotated objects.
  double mean_annotated_score() const {
    std::set<std::size_t> ids;
    for (const auto& a : annotations_) ids.insert(env_->dataset().index_of(a.image_id));
    double s = 0.0;
    for (auto i : ids) s += parses_[i].part_score;
    return s / static_cast<double>(ids.size());
  }

  /// Greedy choice of the next question.
  Question select_question() {
    if (unasked_count() == 0) throw ExhaustedError("every object has been asked");
    const std::size_t n = p_.size();
    if (annotations_.empty() || aog_.empty()) {
      if (cfg_.random_first_question) return make_question(random_unasked(), 0.0);
      return make_question(lowest_unasked(), 0.0);
    }
    std::optional<std::size_t> best;
    double best_gain = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (asked_flags_[i]) continue;
      const double g = predict_gain(i);
      if (!best || g > best_gain || (g == best_gain && image_id(i) < image_id(*best))) {
        best = i;
        best_gain = g;
      }
    }
    return make_question(*best, best_gain);
  }

  /// Uniformly random un-asked object (baseline policy).
  Question select_random_question() {
    if (unasked_count() == 0) throw ExhaustedError("every object has been asked");
    return make_question(random_unasked(), 0.0);
  }

  Question next_question(SelectionPolicy policy) {
    return policy == SelectionPolicy::active ? select_question() : select_random_question();
  }

  // -- answers --------------------------------------------------------------

  /// Commits one answer. Either fully applied or, on error, the session is unchanged.
  void apply_answer(const Question& q, const Answer& a) {
    const std::size_t idx = env_->dataset().index_of(q.image_id);
    if (asked_flags_[idx]) throw StateError("object '" + q.image_id + "' has already been answered");
    if (q.step != step()) throw StateError("stale question: issued at step " + std::to_string(q.step) +
                                           ", session is at step " + std::to_string(step()));
    const auto& vol = env_->dataset()[idx];

    std::optional<PartAnnotation> annot;
    if (const auto* x = std::get_if<answers::WrongLocation>(&a)) {
      if (!q.template_label) throw PreconditionError("wrong_location needs a proposed template");
      annot = PartAnnotation{q.image_id, x->box, *q.template_label, false};
    } else if (const auto* x = std::get_if<answers::WrongTemplateAndLocation>(&a)) {
      annot = PartAnnotation{q.image_id, x->box, x->template_label, x->flipped};
    } else if (const auto* x = std::get_if<answers::NewTemplate>(&a)) {
      if (aog_.find_label(x->template_label) != nullptr)
        throw PreconditionError("template '" + x->template_label + "' already exists");
      annot = PartAnnotation{q.image_id, x->box, x->template_label, false};
    } else if (std::holds_alternative<answers::Correct>(a)) {
      if (aog_.empty()) throw PreconditionError("cannot confirm a detection before any template exists");
    }

    AndOrGraph next_aog = aog_;
    std::vector<ParseGraph> next_parses;
    std::vector<PartAnnotation> next_annots = annotations_;
    if (annot) {
      annot->validate(vol.image_w, vol.image_h);
      next_annots.push_back(*annot);
      next_aog = grow_aog(aog_, *annot, next_annots, env_->mining());
      next_parses = parse_all(env_->dataset().volumes(), next_aog, env_->stats());
    }

    // Commit: nothing below throws.
    asked_flags_[idx] = true;
    asked_.push_back(q.image_id);
    if (annot) {
      annotations_ = std::move(next_annots);
      aog_ = std::move(next_aog);
      parses_ = std::move(next_parses);
      estimate_q();
    }
    update_prior(q.image_id, a);
    log_.push_back({q, a, clock_()});
  }

  // -- persistence ----------------------------------------------------------
  nlohmann::json to_json() const;
  static QaSession from_json(const nlohmann::json& j, std::shared_ptr<const QaEnvironment> env);

  std::string rng_state() const { return rng_.state(); }

 private:
  const std::string& image_id(std::size_t i) const { return env_->dataset()[i].image_id; }

  double max_log_score() const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& pg : parses_) m = std::max(m, cfg_.beta * pg.part_score);
    return m;
  }

  void recompute_prior() {
    if (known_.empty()) {
      std::fill(p_.begin(), p_.end(), 1.0);
      return;
    }
    double mean = 0.0;
    for (const auto& [i, v] : known_) mean += v;
    mean /= static_cast<double>(known_.size());
    for (std::size_t i = 0; i < p_.size(); ++i) {
      auto it = known_.find(i);
      p_[i] = it != known_.end() ? it->second : mean;
    }
  }

  std::size_t lowest_unasked() const {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < p_.size(); ++i)
      if (!asked_flags_[i] && (!best || image_id(i) < image_id(*best))) best = i;
    return *best;
  }

  std::size_t random_unasked() {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < p_.size(); ++i)
      if (!asked_flags_[i]) pool.push_back(i);
    std::sort(pool.begin(), pool.end(), [&](auto a, auto b) { return image_id(a) < image_id(b); });
    return pool[rng_.index(pool.size())];
  }

  Question make_question(std::size_t idx, double gain) const {
    Question q;
    q.image_id = image_id(idx);
    q.predicted_gain = gain;
    q.step = step();
    if (!parses_.empty()) {
      const auto& pg = parses_[idx];
      q.template_id = pg.template_id;
      q.template_label = aog_.find_id(pg.template_id)->label;
      q.box = pg.part_box;
    }
    return q;
  }

  std::shared_ptr<const QaEnvironment> env_;
  QaConfig cfg_;
  Rng rng_;
  Clock clock_;
  AndOrGraph aog_;
  std::vector<double> p_;
  std::vector<double> q_;
  std::map<std::size_t, double> known_;  // asked objects' P(+1)
  std::vector<bool> asked_flags_;
  std::vector<std::string> asked_;
  std::vector<PartAnnotation> annotations_;
  std::vector<AnswerRecord> log_;
  std::vector<ParseGraph> parses_;
};

// ---------------------------------------------------------------------------
// Simulated annotator and the loop
// ---------------------------------------------------------------------------

/// Answers a question from ground truth, the way a careful annotator would.
inline Answer oracle_answer(const GroundTruth& gt, const Question& q, const std::set<std::string>& known_labels,
                            double iou_threshold = 0.5) {
  const auto& truth = gt.at(q.image_id);
  if (!truth) return answers::PartAbsent{};
  if (!known_labels.count(truth->template_label)) return answers::NewTemplate{truth->part_box, truth->template_label};
  if (q.template_label && *q.template_label == truth->template_label) {
    if (q.box && intersection_over_union(*q.box, truth->part_box) >= iou_threshold) return answers::Correct{};
    return answers::WrongLocation{truth->part_box};
  }
  return answers::WrongTemplateAndLocation{truth->part_box, truth->template_label, truth->flipped};
}

using Oracle = std::function<Answer(const Question&, const QaSession&)>;

inline Oracle make_ground_truth_oracle(const GroundTruth& gt, double iou_threshold = 0.5) {
  return [&gt, iou_threshold](const Question& q, const QaSession& s) {
    return oracle_answer(gt, q, s.annotated_labels(), iou_threshold);
  };
}

/// Called after every committed answer (e.g. to persist the session).
using CommitHook = std::function<void(const QaSession&, const TraceStep&)>;

/// Asks until `budget` annotations are placed or the dataset is exhausted.
inline std::vector<TraceStep> run_loop(QaSession& session, const Oracle& oracle, int budget,
                                       SelectionPolicy policy = SelectionPolicy::active,
                                       const CommitHook& on_commit = {}) {
  if (budget < 1) throw PreconditionError("run_loop budget must be >= 1");
  std::vector<TraceStep> trace;
  while (static_cast<int>(session.annotations().size()) < budget && session.unasked_count() > 0) {
    const Question q = session.next_question(policy);
    const Answer a = oracle(q, session);
    session.apply_answer(q, a);
    TraceStep st{session.step(),
                 q,
                 a,
                 session.loss(),
                 static_cast<int>(session.annotations().size()),
                 static_cast<int>(session.aog().templates.size()),
                 session.aog().pattern_count()};
    if (on_commit) on_commit(session, st);
    trace.push_back(std::move(st));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr int kSessionSchemaVersion = 1;

inline nlohmann::json to_json(const QaConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"epsilon", c.epsilon},
          {"mode", c.mode == KlMode::simplified ? "simplified" : "full_kl"},
          {"random_first_question", c.random_first_question},
          {"seed", c.seed},
          {"part_name", c.part_name},
          {"mining", to_json(c.mining)}};
}

inline QaConfig qa_config_from_json(const nlohmann::json& j, QaConfig c = {}) {
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.epsilon = j.value("epsilon", c.epsilon);
  if (j.contains("mode")) {
    const std::string m = j["mode"];
    if (m == "simplified")
      c.mode = KlMode::simplified;
    else if (m == "full_kl")
      c.mode = KlMode::full_kl;
    else
      throw ConfigError("unknown KL mode '" + m + "'");
  }
  c.random_first_question = j.value("random_first_question", c.random_first_question);
  c.seed = j.value("seed", c.seed);
  c.part_name = j.value("part_name", c.part_name);
  if (j.contains("mining")) c.mining = mining_config_from_json(j["mining"], c.mining);
  return c;
}

inline nlohmann::json QaSession::to_json() const {
  using aogqa::to_json;
  nlohmann::json annots = nlohmann::json::array();
  for (const auto& a : annotations_) annots.push_back(to_json(a));
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : log_)
    log.push_back({{"question", to_json(r.question)}, {"answer", to_json(r.answer)}, {"timestamp_ms", r.timestamp_ms}});
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& v : env_->dataset().volumes()) ids.push_back(v.image_id);
  return {{"schema_version", kSessionSchemaVersion},
          {"manifest_path", env_->manifest_path()},
          {"image_ids", ids},
          {"config", to_json(cfg_)},
          {"aog", to_json(aog_)},
          {"prior", p_},
          {"estimate", q_},
          {"asked", asked_},
          {"annotations", annots},
          {"answer_log", log},
          {"rng_state", rng_.state()}};
}

inline QaSession QaSession::from_json(const nlohmann::json& j, std::shared_ptr<const QaEnvironment> env) {
  try {
    if (j.at("schema_version").get<int>() != kSessionSchemaVersion)
      throw FormatError("unsupported session schema_version");
    QaSession s(env, qa_config_from_json(j.at("config")));
    const auto ids = j.at("image_ids").get<std::vector<std::string>>();
    if (ids.size() != env->dataset().size()) throw FormatError("session was recorded over a different dataset");
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] != env->dataset()[i].image_id) throw FormatError("session image ids do not match the dataset");
    s.aog_ = aog_from_json(j.at("aog"));
    s.p_ = j.at("prior").get<std::vector<double>>();
    s.q_ = j.at("estimate").get<std::vector<double>>();
    if (s.p_.size() != ids.size() || s.q_.size() != ids.size()) throw FormatError("P/Q not total over the dataset");
    for (const auto& id : j.at("asked")) {
      const std::size_t idx = env->dataset().index_of(id.get<std::string>());
      s.asked_flags_[idx] = true;
      s.asked_.push_back(id.get<std::string>());
    }
    for (const auto& a : j.at("annotations")) s.annotations_.push_back(annotation_from_json(a));
    for (const auto& r : j.at("answer_log")) {
      AnswerRecord rec{question_from_json(r.at("question")), answer_from_json(r.at("answer")),
                       r.at("timestamp_ms").get<std::int64_t>()};
      s.known_[env->dataset().index_of(rec.question.image_id)] =
          std::holds_alternative<answers::PartAbsent>(rec.answer) ? 0.0 : 1.0;
      s.log_.push_back(std::move(rec));
    }
    if (s.log_.size() != s.asked_.size()) throw FormatError("asked set and answer log disagree");
    s.rng_.restore(j.at("rng_state").get<std::string>());
    if (!s.aog_.empty()) s.parses_ = parse_all(env->dataset().volumes(), s.aog_, env->stats());
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("session document: ") + e.what());
  }
}

}  // namespace aogqa
