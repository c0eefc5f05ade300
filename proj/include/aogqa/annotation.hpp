#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "geometry.hpp"

namespace aogqa {

/// One unit of human supervision: where the part is and which template explains it.
struct PartAnnotation {
  std::string image_id;
  Box part_box;
  std::string template_label;
  bool flipped = false;

  bool operator==(const PartAnnotation&) const = default;

  void validate(double image_w, double image_h) const {
    if (!part_box.valid()) throw PreconditionError("degenerate part box for image '" + image_id + "'");
    if (part_box.x < 0.0 || part_box.y < 0.0 || part_box.x + part_box.w > image_w ||
        part_box.y + part_box.h > image_h)
      throw PreconditionError("part box outside image bounds for '" + image_id + "'");
  }
};

inline nlohmann::json box_to_json(const Box& b) { return nlohmann::json::array({b.x, b.y, b.w, b.h}); }

inline Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("box must be [x, y, w, h]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline nlohmann::json to_json(const PartAnnotation& a) {
  return {{"image_id", a.image_id},
          {"box", box_to_json(a.part_box)},
          {"template_label", a.template_label},
          {"flipped", a.flipped}};
}

inline PartAnnotation annotation_from_json(const nlohmann::json& j) {
  try {
    return {j.at("image_id").get<std::string>(), box_from_json(j.at("box")),
            j.at("template_label").get<std::string>(), j.value("flipped", false)};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("annotation: ") + e.what());
  }
}

namespace detail {

template <typename F>
void for_each_jsonl(std::istream& in, F&& f) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
    f(j);
  }
}

}  // namespace detail

/// Append-only annotation log, one JSON record per line.
inline std::vector<PartAnnotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotation store '" + path.string() + "'");
  std::vector<PartAnnotation> out;
  detail::for_each_jsonl(in, [&](const nlohmann::json& j) { out.push_back(annotation_from_json(j)); });
  return out;
}

inline void append_annotation(const std::filesystem::path& path, const PartAnnotation& a) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to '" + path.string() + "'");
  out << to_json(a).dump() << '\n';
}

inline void write_annotations(const std::filesystem::path& path, const std::vector<PartAnnotation>& annots) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& a : annots) out << to_json(a).dump() << '\n';
}

/// Ground truth for a dataset: an annotation per image, or nullopt when the part is absent.
struct GroundTruth {
  std::map<std::string, std::optional<PartAnnotation>> by_image;

  bool operator==(const GroundTruth&) const = default;

  const std::optional<PartAnnotation>& at(const std::string& id) const {
    auto it = by_image.find(id);
    if (it == by_image.end()) throw LookupError("no ground truth for image '" + id + "'");
    return it->second;
  }
};

inline void write_ground_truth(const std::filesystem::path& path, const GroundTruth& gt) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& [id, a] : gt.by_image) {
    if (a)
      out << to_json(*a).dump() << '\n';
    else
      out << nlohmann::json{{"image_id", id}, {"absent", true}}.dump() << '\n';
  }
}

inline GroundTruth read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ground truth '" + path.string() + "'");
  GroundTruth gt;
  detail::for_each_jsonl(in, [&](const nlohmann::json& j) {
    if (j.value("absent", false))
      gt.by_image[j.at("image_id").get<std::string>()] = std::nullopt;
    else {
      auto a = annotation_from_json(j);
      gt.by_image[a.image_id] = a;
    }
  });
  return gt;
}

}  // namespace aogqa
