#pragma once

// Feature volumes: the engine's only view of an image. A volume is a stack of
// post-ReLU conv-slices, each carrying the linear receptive-field geometry
// (stride / receptive-field side / offset of cell (0,0)) needed to map grid
// cells back onto the image plane.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "geometry.hpp"

namespace aogqa {

/// Identifies one conv-slice: (layer, channel).
struct SliceKey {
  int layer = 0;
  int channel = 0;
  auto operator<=>(const SliceKey&) const = default;
};

struct SliceMeta {
  int layer = 0;
  int channel = 0;
  int grid_h = 1;
  int grid_w = 1;
  float stride_px = 1.0f;
  float rf_size_px = 1.0f;
  float offset_px = 0.0f;

  SliceKey key() const { return {layer, channel}; }
  bool contains(GridPos p) const { return p.row >= 0 && p.col >= 0 && p.row < grid_h && p.col < grid_w; }

  void validate() const {
    if (!(stride_px > 0.0f)) throw FormatError("slice stride_px must be > 0");
    if (!(rf_size_px >= stride_px)) throw FormatError("slice rf_size_px must be >= stride_px");
    if (grid_h < 1 || grid_w < 1) throw FormatError("slice grid must be at least 1x1");
  }
};

struct Slice {
  SliceMeta meta;
  std::vector<float> values;  // row-major, grid_h * grid_w

  float at(GridPos p) const { return values[static_cast<std::size_t>(p.row) * meta.grid_w + p.col]; }
  float& at(GridPos p) { return values[static_cast<std::size_t>(p.row) * meta.grid_w + p.col]; }
  bool operator==(const Slice& o) const {
    return meta.layer == o.meta.layer && meta.channel == o.meta.channel && meta.grid_h == o.meta.grid_h &&
           meta.grid_w == o.meta.grid_w && meta.stride_px == o.meta.stride_px &&
           meta.rf_size_px == o.meta.rf_size_px && meta.offset_px == o.meta.offset_px && values == o.values;
  }
};

class FeatureVolume {
 public:
  std::string image_id;
  std::uint32_t image_w = 0;
  std::uint32_t image_h = 0;
  std::vector<Slice> slices;

  bool operator==(const FeatureVolume&) const = default;

  const Slice* find(SliceKey key) const {
    for (const auto& s : slices)
      if (s.meta.layer == key.layer && s.meta.channel == key.channel) return &s;
    return nullptr;
  }

  const Slice& slice(SliceKey key) const {
    const Slice* s = find(key);
    if (s == nullptr)
      throw MissingSliceError("volume '" + image_id + "' has no slice for layer " + std::to_string(key.layer) +
                              ", channel " + std::to_string(key.channel));
    return *s;
  }

  /// Highest layer index present.
  std::optional<int> top_layer() const {
    std::optional<int> top;
    for (const auto& s : slices)
      if (!top || s.meta.layer > *top) top = s.meta.layer;
    return top;
  }

  void validate() const {
    std::vector<SliceKey> keys;
    keys.reserve(slices.size());
    for (const auto& s : slices) {
      s.meta.validate();
      if (s.values.size() != static_cast<std::size_t>(s.meta.grid_h) * s.meta.grid_w)
        throw FormatError("slice value count does not match its grid");
      for (float v : s.values)
        if (!(v >= 0.0f)) throw FormatError("negative or NaN activation in volume '" + image_id + "'");
      keys.push_back(s.meta.key());
    }
    std::sort(keys.begin(), keys.end());
    if (std::adjacent_find(keys.begin(), keys.end()) != keys.end())
      throw FormatError("duplicate (layer, channel) slice in volume '" + image_id + "'");
  }
};

// ---------------------------------------------------------------------------
// Binary format
//
//   "AOGF" | u16 version | u32 id_len | id bytes | u32 image_w | u32 image_h |
//   u32 slice_count | per slice: u16 layer, u16 channel, u16 grid_h,
//   u16 grid_w, f32 stride, f32 rf_size, f32 offset, f32[grid_h*grid_w]
//
// All little-endian, values row-major.
// ---------------------------------------------------------------------------

inline constexpr char kVolumeMagic[4] = {'A', 'O', 'G', 'F'};
inline constexpr std::uint16_t kVolumeFormatVersion = 1;

namespace detail {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void raw(std::string_view s) { buf_.append(s); }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }

  std::string_view raw(std::size_t n, const char* what) {
    need(n, what);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw FormatError(std::string("truncated volume at offset ") + std::to_string(pos_) + " reading " + what);
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace detail

inline std::string encode_volume(const FeatureVolume& v) {
  v.validate();
  detail::ByteWriter w;
  w.raw(std::string_view(kVolumeMagic, 4));
  w.put<std::uint16_t>(kVolumeFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.image_id.size()));
  w.raw(v.image_id);
  w.put<std::uint32_t>(v.image_w);
  w.put<std::uint32_t>(v.image_h);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.slices.size()));
  for (const auto& s : v.slices) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(s.meta.layer));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(s.meta.channel));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(s.meta.grid_h));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(s.meta.grid_w));
    w.put<float>(s.meta.stride_px);
    w.put<float>(s.meta.rf_size_px);
    w.put<float>(s.meta.offset_px);
    for (float x : s.values) w.put<float>(x);
  }
  return w.take();
}

inline FeatureVolume decode_volume(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(4, "magic") != std::string_view(kVolumeMagic, 4)) throw FormatError("bad magic at offset 0");
  const auto version_at = r.offset();
  const auto version = r.get<std::uint16_t>("version");
  if (version != kVolumeFormatVersion)
    throw FormatError("unsupported format version " + std::to_string(version) + " at offset " +
                      std::to_string(version_at));
  FeatureVolume v;
  const auto id_len = r.get<std::uint32_t>("image_id length");
  v.image_id = std::string(r.raw(id_len, "image_id"));
  v.image_w = r.get<std::uint32_t>("image_w");
  v.image_h = r.get<std::uint32_t>("image_h");
  const auto count = r.get<std::uint32_t>("slice count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto slice_at = r.offset();
    Slice s;
    s.meta.layer = r.get<std::uint16_t>("layer");
    s.meta.channel = r.get<std::uint16_t>("channel");
    s.meta.grid_h = r.get<std::uint16_t>("grid_h");
    s.meta.grid_w = r.get<std::uint16_t>("grid_w");
    s.meta.stride_px = r.get<float>("stride_px");
    s.meta.rf_size_px = r.get<float>("rf_size_px");
    s.meta.offset_px = r.get<float>("offset_px");
    try {
      s.meta.validate();
    } catch (const FormatError& e) {
      throw FormatError(std::string(e.what()) + " (slice header at offset " + std::to_string(slice_at) + ")");
    }
    const std::size_t n = static_cast<std::size_t>(s.meta.grid_h) * s.meta.grid_w;
    s.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto at = r.offset();
      const float x = r.get<float>("activation");
      if (!(x >= 0.0f)) throw FormatError("negative activation at offset " + std::to_string(at));
      s.values[k] = x;
    }
    if (v.find(s.meta.key()) != nullptr)
      throw FormatError("duplicate slice at offset " + std::to_string(slice_at));
    v.slices.push_back(std::move(s));
  }
  if (!r.done()) throw FormatError("trailing bytes at offset " + std::to_string(r.offset()));
  return v;
}

inline void save_volume(const FeatureVolume& v, const std::filesystem::path& path) {
  detail::write_file(path, encode_volume(v));
}

inline FeatureVolume load_volume(const std::filesystem::path& path) {
  try {
    return decode_volume(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct UnitField {
  Point center;
  Box field;
};

/// Unclipped image-plane center of a grid cell.
inline Point unit_center(const SliceMeta& meta, GridPos pos) {
  return {meta.offset_px + static_cast<double>(pos.col) * meta.stride_px,
          meta.offset_px + static_cast<double>(pos.row) * meta.stride_px};
}

/// Maps a grid cell to its receptive-field center and (clipped) field box.
inline UnitField unit_to_image(const SliceMeta& meta, GridPos pos, double image_w, double image_h) {
  if (!meta.contains(pos))
    throw BoundsError("grid position (" + std::to_string(pos.row) + ", " + std::to_string(pos.col) +
                      ") outside " + std::to_string(meta.grid_h) + "x" + std::to_string(meta.grid_w) + " grid");
  const Point c = unit_center(meta, pos);
  return {c, clip_box(Box::centered(c, meta.rf_size_px, meta.rf_size_px), image_w, image_h)};
}

/// True when `p` falls inside the area tiled by the slice's cells.
inline bool grid_covers(const SliceMeta& meta, Point p) {
  const double lo = meta.offset_px - meta.stride_px / 2.0;
  const double hi_x = lo + static_cast<double>(meta.grid_w) * meta.stride_px;
  const double hi_y = lo + static_cast<double>(meta.grid_h) * meta.stride_px;
  return p.x >= lo && p.x < hi_x && p.y >= lo && p.y < hi_y;
}

/// Reverses every slice along the horizontal axis. Metadata is unchanged.
inline FeatureVolume mirror_volume(const FeatureVolume& v) {
  FeatureVolume out = v;
  for (auto& s : out.slices) {
    for (int r = 0; r < s.meta.grid_h; ++r) {
      auto row = s.values.begin() + static_cast<std::ptrdiff_t>(r) * s.meta.grid_w;
      std::reverse(row, row + s.meta.grid_w);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel statistics
// ---------------------------------------------------------------------------

struct ChannelMoments {
  double mean = 0.0;
  double stddev = 0.0;
  bool operator==(const ChannelMoments&) const = default;
};

class ChannelStats {
 public:
  std::map<SliceKey, ChannelMoments> moments;

  const ChannelMoments& at(SliceKey key) const {
    auto it = moments.find(key);
    if (it == moments.end())
      throw MissingSliceError("no channel statistics for layer " + std::to_string(key.layer) + ", channel " +
                              std::to_string(key.channel));
    return it->second;
  }

  /// z-score of an activation; zero for constant channels.
  double z(SliceKey key, double activation) const {
    const auto& m = at(key);
    return m.stddev > 0.0 ? (activation - m.mean) / m.stddev : 0.0;
  }

  bool operator==(const ChannelStats&) const = default;
};

/// Population mean / std-dev of every channel over every cell of every volume.
inline ChannelStats channel_stats(std::span<const FeatureVolume> volumes) {
  if (volumes.empty()) throw PreconditionError("channel_stats needs at least one volume");
  struct Acc {
    double sum = 0.0;
    std::size_t n = 0;
  };
  std::map<SliceKey, Acc> acc;
  for (const auto& v : volumes)
    for (const auto& s : v.slices) {
      auto& a = acc[s.meta.key()];
      for (float x : s.values) a.sum += x;
      a.n += s.values.size();
    }
  std::map<SliceKey, double> sq;
  for (const auto& v : volumes)
    for (const auto& s : v.slices) {
      const double mean = acc[s.meta.key()].sum / static_cast<double>(acc[s.meta.key()].n);
      double& q = sq[s.meta.key()];
      for (float x : s.values) q += (x - mean) * (x - mean);
    }
  ChannelStats out;
  for (const auto& [key, a] : acc) {
    const double mean = a.sum / static_cast<double>(a.n);
    out.moments[key] = {mean, std::sqrt(sq[key] / static_cast<double>(a.n))};
  }
  return out;
}

inline nlohmann::json to_json(const ChannelStats& s) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [k, m] : s.moments)
    arr.push_back({{"layer", k.layer}, {"channel", k.channel}, {"mean", m.mean}, {"std", m.stddev}});
  return {{"schema_version", 1}, {"channels", arr}};
}

inline ChannelStats channel_stats_from_json(const nlohmann::json& j) {
  ChannelStats s;
  try {
    for (const auto& c : j.at("channels"))
      s.moments[{c.at("layer").get<int>(), c.at("channel").get<int>()}] = {c.at("mean").get<double>(),
                                                                           c.at("std").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("channel stats: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Manifest and in-memory dataset
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string image_id;
  std::string volume_path;
  std::optional<std::string> image_path;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::string category;
  std::vector<ManifestEntry> entries;
  bool operator==(const DatasetManifest&) const = default;

  void validate() const {
    std::vector<std::string> ids;
    for (const auto& e : entries) ids.push_back(e.image_id);
    std::sort(ids.begin(), ids.end());
    if (auto it = std::adjacent_find(ids.begin(), ids.end()); it != ids.end())
      throw FormatError("duplicate image_id '" + *it + "' in manifest");
  }
};

/// One JSON object per line: {image_id, volume_path, image_path?, category?}.
inline std::string write_manifest_text(const DatasetManifest& m) {
  std::string out;
  for (const auto& e : m.entries) {
    nlohmann::json j{{"image_id", e.image_id}, {"volume_path", e.volume_path}};
    if (e.image_path) j["image_path"] = *e.image_path;
    if (!m.category.empty()) j["category"] = m.category;
    out += j.dump() + "\n";
  }
  return out;
}

inline DatasetManifest read_manifest_text(std::string_view text) {
  DatasetManifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e{j.at("image_id").get<std::string>(), j.at("volume_path").get<std::string>(), std::nullopt};
      if (j.contains("image_path")) e.image_path = j.at("image_path").get<std::string>();
      if (j.contains("category") && m.category.empty()) m.category = j.at("category").get<std::string>();
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

/// Manifest plus the loaded volumes, indexed by image id.
class Dataset {
 public:
  Dataset() = default;

  Dataset(DatasetManifest manifest, std::vector<FeatureVolume> volumes)
      : manifest_(std::move(manifest)), volumes_(std::move(volumes)) {
    if (manifest_.entries.empty()) {
      for (const auto& v : volumes_) manifest_.entries.push_back({v.image_id, v.image_id + ".aogf", std::nullopt});
    }
    if (manifest_.entries.size() != volumes_.size())
      throw PreconditionError("manifest and volume counts differ");
    manifest_.validate();
    for (std::size_t i = 0; i < volumes_.size(); ++i) {
      if (volumes_[i].image_id != manifest_.entries[i].image_id)
        throw PreconditionError("volume '" + volumes_[i].image_id + "' does not match manifest entry '" +
                                manifest_.entries[i].image_id + "'");
      index_.emplace(volumes_[i].image_id, i);
    }
  }

  const DatasetManifest& manifest() const { return manifest_; }
  std::span<const FeatureVolume> volumes() const { return volumes_; }
  std::size_t size() const { return volumes_.size(); }
  bool empty() const { return volumes_.empty(); }

  const FeatureVolume& operator[](std::size_t i) const { return volumes_[i]; }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw LookupError("unknown image_id '" + id + "'");
    return it->second;
  }

  const FeatureVolume& volume(const std::string& id) const { return volumes_[index_of(id)]; }

 private:
  DatasetManifest manifest_;
  std::vector<FeatureVolume> volumes_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline ChannelStats channel_stats(const Dataset& d) { return channel_stats(d.volumes()); }

/// Reads a manifest and every volume it references (paths relative to the manifest directory).
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  auto manifest = read_manifest_text(detail::read_file(manifest_path));
  const auto base = manifest_path.parent_path();
  std::vector<FeatureVolume> volumes;
  std::vector<std::string> missing;
  for (const auto& e : manifest.entries) {
    const std::filesystem::path p = std::filesystem::path(e.volume_path).is_absolute() ? std::filesystem::path(e.volume_path) : base / e.volume_path;
    if (!std::filesystem::exists(p)) {
      missing.push_back(e.image_id);
      continue;
    }
    auto v = load_volume(p);
    if (v.image_id != e.image_id)
      throw FormatError(p.string() + ": image_id '" + v.image_id + "' does not match manifest '" + e.image_id + "'");
    volumes.push_back(std::move(v));
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw IoError("missing feature volumes for: " + ids);
  }
  return Dataset(std::move(manifest), std::move(volumes));
}

/// Writes every volume as `<image_id>.aogf` plus `manifest.jsonl` into `dir`.
inline std::filesystem::path save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest m = d.manifest();
  for (std::size_t i = 0; i < d.size(); ++i) {
    m.entries[i].volume_path = d[i].image_id + ".aogf";
    save_volume(d[i], dir / m.entries[i].volume_path);
  }
  const auto path = dir / "manifest.jsonl";
  detail::write_file(path, write_manifest_text(m));
  return path;
}

}  // namespace aogqa
