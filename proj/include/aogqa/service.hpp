#pragma once

// HTTP front end for one interactive QA session. Every state change goes
// through QaSession::apply_answer; the service only adds staleness checks,
// atomic persistence and transport.

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "active_qa.hpp"

namespace aogqa {

/// Writes `text` to a sibling temp file, then renames it over `path`.
/// `before_rename` runs between the two steps (fault injection in tests).
inline void atomic_write(const std::filesystem::path& path, std::string_view text,
                         const std::function<void()>& before_rename = {}) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.flush();
    if (!out) throw IoError("short write to " + tmp.string());
  }
  if (before_rename) before_rename();
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot replace " + path.string() + ": " + ec.message());
}

struct ServiceResponse {
  ServiceResponse() = default;
  ServiceResponse(int s, nlohmann::json b) : status(s), body(std::move(b)) {}

  int status = 200;
  nlohmann::json body;
  std::string raw;  // non-JSON payload (images)
  std::string content_type = "application/json";
};

inline nlohmann::json aog_summary(const AndOrGraph& aog) {
  nlohmann::json templates = nlohmann::json::array();
  for (const auto& t : aog.templates)
    templates.push_back({{"template_id", t.template_id},
                         {"label", t.label},
                         {"patterns", t.patterns.size()},
                         {"support_count", t.support_count}});
  return {{"part_name", aog.part_name},
          {"template_count", aog.templates.size()},
          {"pattern_count", aog.pattern_count()},
          {"templates", templates}};
}

class QaService {
 public:
  using FaultHook = std::function<void()>;

  /// Resumes from `state_path` when it exists, otherwise starts a fresh session.
  QaService(std::shared_ptr<const QaEnvironment> env, QaConfig cfg, std::filesystem::path state_path)
      : env_(std::move(env)), state_path_(std::move(state_path)), session_(env_, cfg) {
    if (!state_path_.empty() && std::filesystem::exists(state_path_)) {
      const auto doc = nlohmann::json::parse(detail::read_file(state_path_));
      session_ = QaSession::from_json(doc, env_);
      if (doc.contains("loss_history")) loss_history_ = doc["loss_history"].get<std::vector<double>>();
    }
  }

  void set_fault_hook(FaultHook h) {
    std::lock_guard lock(mu_);
    fault_ = std::move(h);
  }

  QaSession session() const {
    std::lock_guard lock(mu_);
    return session_;
  }

  ServiceResponse next_question() {
    std::lock_guard lock(mu_);
    if (session_.unasked_count() == 0)
      return {200, {{"status", "exhausted"}, {"step", session_.step()}}};
    const Question& q = pending_question();
    auto j = to_json(q);
    j["image_url"] = "/v1/image/" + q.image_id;
    return {200, {{"status", "ok"}, {"question", j}}};
  }

  /// Body: {"image_id", "step", "answer": {...}}.
  ServiceResponse post_answer(const std::string& body) {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      return error(400, "validation", std::string("malformed JSON: ") + e.what());
    }
    std::string image_id;
    int step = 0;
    Answer answer;
    try {
      image_id = req.at("image_id").get<std::string>();
      step = req.at("step").get<int>();
      answer = answer_from_json(req.at("answer"));
    } catch (const nlohmann::json::exception& e) {
      return error(400, "validation", e.what());
    } catch (const FormatError& e) {
      return error(400, "validation", e.what());
    }

    std::lock_guard lock(mu_);
    if (step != session_.step())
      return error(409, "conflict", "stale question: session is at step " + std::to_string(session_.step()));
    if (!env_->dataset().contains(image_id)) return error(404, "not_found", "unknown image_id '" + image_id + "'");
    if (session_.unasked_count() == 0) return error(409, "conflict", "every object has been asked");
    const Question q = pending_question();
    if (q.image_id != image_id)
      return error(409, "conflict", "question for step " + std::to_string(step) + " is about '" + q.image_id + "'");

    QaSession next = session_;
    try {
      next.apply_answer(q, answer);
    } catch (const StateError& e) {
      return error(409, "conflict", e.what());
    } catch (const Error& e) {
      return error(400, "validation", e.what());
    }
    auto history = loss_history_;
    history.push_back(next.loss());
    try {
      persist(next, history);
    } catch (const std::exception& e) {
      return error(500, "persist_failed", e.what());
    }
    session_ = std::move(next);
    loss_history_ = std::move(history);
    pending_.reset();
    return {200,
            {{"status", "ok"},
             {"step", session_.step()},
             {"annotations", session_.annotations().size()},
             {"loss", loss_history_.back()},
             {"aog", aog_summary(session_.aog())}}};
  }

  ServiceResponse aog() const {
    std::lock_guard lock(mu_);
    return {200, to_json(session_.aog())};
  }

  ServiceResponse progress() const {
    std::lock_guard lock(mu_);
    return {200,
            {{"step", session_.step()},
             {"annotations", session_.annotations().size()},
             {"templates", session_.aog().templates.size()},
             {"unasked", session_.unasked_count()},
             {"loss_history", loss_history_}}};
  }

  ServiceResponse image(const std::string& id) const {
    if (!env_->dataset().contains(id)) return error(404, "not_found", "unknown image_id '" + id + "'");
    const auto& entry = env_->dataset().manifest().entries[env_->dataset().index_of(id)];
    if (!entry.image_path) return error(404, "no_image", "no raw image for '" + id + "'; use /v1/heatmap/" + id);
    std::filesystem::path p = *entry.image_path;
    if (p.is_relative() && !env_->manifest_path().empty())
      p = std::filesystem::path(env_->manifest_path()).parent_path() / p;
    if (!std::filesystem::exists(p)) return error(404, "no_image", "image file missing: " + p.string());
    ServiceResponse r;
    r.raw = detail::read_file(p);
    r.content_type = content_type_for(p);
    return r;
  }

  /// Channel-max of the top conv-layer, for datasets without raw images.
  ServiceResponse heatmap(const std::string& id) const {
    if (!env_->dataset().contains(id)) return error(404, "not_found", "unknown image_id '" + id + "'");
    const auto& v = env_->dataset().volume(id);
    const auto top = v.top_layer();
    if (!top) return error(404, "no_layers", "volume has no conv-layers");
    std::vector<float> grid;
    int gh = 0, gw = 0;
    for (const auto& s : v.slices) {
      if (s.meta.layer != *top) continue;
      if (grid.empty()) {
        gh = s.meta.grid_h;
        gw = s.meta.grid_w;
        grid = s.values;
      } else if (s.meta.grid_h == gh && s.meta.grid_w == gw) {
        for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = std::max(grid[i], s.values[i]);
      }
    }
    return {200, {{"image_id", id}, {"image_w", v.image_w}, {"image_h", v.image_h}, {"grid_h", gh}, {"grid_w", gw},
                  {"values", grid}}};
  }

  /// Registers the /v1 routes.
  void mount(httplib::Server& server) {
    auto send = [](httplib::Response& res, const ServiceResponse& r) {
      res.status = r.status;
      if (r.raw.empty() || r.content_type == "application/json")
        res.set_content(r.body.dump(), "application/json");
      else
        res.set_content(r.raw, r.content_type);
    };
    server.Get("/v1/next-question", [this, send](const httplib::Request&, httplib::Response& res) {
      send(res, guarded([&] { return next_question(); }));
    });
    server.Post("/v1/answer", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, guarded([&] { return post_answer(req.body); }));
    });
    server.Get("/v1/aog", [this, send](const httplib::Request&, httplib::Response& res) {
      send(res, guarded([&] { return aog(); }));
    });
    server.Get("/v1/progress", [this, send](const httplib::Request&, httplib::Response& res) {
      send(res, guarded([&] { return progress(); }));
    });
    server.Get(R"(/v1/image/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, guarded([&] { return image(req.matches[1]); }));
    });
    server.Get(R"(/v1/heatmap/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, guarded([&] { return heatmap(req.matches[1]); }));
    });
  }

 private:
  static ServiceResponse error(int status, const std::string& kind, const std::string& message) {
    return {status, {{"status", kind}, {"error", message}}};
  }

  template <class F>
  static ServiceResponse guarded(F&& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return error(500, "internal", e.what());
    }
  }

  static std::string content_type_for(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".png") return "image/png";
    if (ext == ".bmp") return "image/bmp";
    return "application/octet-stream";
  }

  const Question& pending_question() {
    if (!pending_ || pending_->step != session_.step()) pending_ = session_.select_question();
    return *pending_;
  }

  void persist(const QaSession& s, const std::vector<double>& history) {
    if (state_path_.empty()) return;
    auto doc = s.to_json();
    doc["loss_history"] = history;
    atomic_write(state_path_, doc.dump(), fault_);
  }

  std::shared_ptr<const QaEnvironment> env_;
  std::filesystem::path state_path_;
  mutable std::mutex mu_;
  QaSession session_;
  std::optional<Question> pending_;
  std::vector<double> loss_history_;
  FaultHook fault_;
};

}  // namespace aogqa
