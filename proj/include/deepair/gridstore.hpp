#pragma once

// Grid/channel data model, station-record ingestion, hourly alignment,
// rasterization, chronological splitting and dataset persistence.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "deepair/common.hpp"
#include "deepair/time.hpp"

namespace deepair {

static_assert(std::endian::native == std::endian::little,
              "dataset and checkpoint payloads are written in host order");

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;
};

/// City grid. Row 0 is the northernmost row and col 0 the westernmost column;
/// `origin` is the north-west corner of cell (0,0).
struct GridSpec {
  std::size_t rows = 50;
  std::size_t cols = 55;
  double cell_km = 3.0;
  GeoPoint origin{40.5, 116.0};

  static constexpr double kKmPerDegLat = 110.574;
  static constexpr double kKmPerDegLonEquator = 111.320;

  void validate() const {
    if (rows < 15 || cols < 15) {
      throw Error("gridstore", "grid must be at least 15x15 to hold a patch, got " +
                                   std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (!(cell_km > 0.0)) throw Error("gridstore", "cell_km must be positive");
  }

  std::size_t cells() const { return rows * cols; }

  /// Local equirectangular projection: (east km, south km) from the origin.
  std::pair<double, double> project(GeoPoint p) const {
    const double coslat = std::cos(origin.lat * std::numbers::pi / 180.0);
    return {(p.lon - origin.lon) * kKmPerDegLonEquator * coslat,
            (origin.lat - p.lat) * kKmPerDegLat};
  }

  GeoPoint unproject(double east_km, double south_km) const {
    const double coslat = std::cos(origin.lat * std::numbers::pi / 180.0);
    return {origin.lat - south_km / kKmPerDegLat,
            origin.lon + east_km / (kKmPerDegLonEquator * coslat)};
  }

  std::optional<CellIndex> cell_of(GeoPoint p) const {
    const auto [x, y] = project(p);
    if (!(x >= 0.0) || !(y >= 0.0)) return std::nullopt;
    const auto col = static_cast<std::size_t>(std::floor(x / cell_km));
    const auto row = static_cast<std::size_t>(std::floor(y / cell_km));
    if (row >= rows || col >= cols) return std::nullopt;
    return CellIndex{row, col};
  }

  GeoPoint cell_center(CellIndex c) const {
    return unproject((static_cast<double>(c.col) + 0.5) * cell_km,
                     (static_cast<double>(c.row) + 0.5) * cell_km);
  }

  /// Cell-center coordinates in km (east, south) used for all distance work.
  std::pair<double, double> cell_center_km(CellIndex c) const {
    return {(static_cast<double>(c.col) + 0.5) * cell_km,
            (static_cast<double>(c.row) + 0.5) * cell_km};
  }
};

enum class ChannelGroup { air_quality, meteorology, traffic, auxiliary };

inline std::string to_string(ChannelGroup g) {
  switch (g) {
    case ChannelGroup::air_quality: return "air_quality";
    case ChannelGroup::meteorology: return "meteorology";
    case ChannelGroup::traffic: return "traffic";
    case ChannelGroup::auxiliary: return "auxiliary";
  }
  return "?";
}

inline ChannelGroup channel_group_from_string(const std::string& s) {
  if (s == "air_quality") return ChannelGroup::air_quality;
  if (s == "meteorology") return ChannelGroup::meteorology;
  if (s == "traffic") return ChannelGroup::traffic;
  if (s == "auxiliary") return ChannelGroup::auxiliary;
  throw FormatError("gridstore", "unknown channel group '" + s + "'");
}

struct ChannelInfo {
  std::string name;
  ChannelGroup group = ChannelGroup::meteorology;
  std::string unit;
  bool categorical = false;
};

class ChannelSchema {
 public:
  ChannelSchema() = default;
  explicit ChannelSchema(std::vector<ChannelInfo> channels) : channels_(std::move(channels)) {
    for (std::size_t i = 0; i < channels_.size(); ++i) {
      if (!index_.emplace(channels_[i].name, i).second) {
        throw Error("gridstore", "duplicate channel name '" + channels_[i].name + "'");
      }
    }
  }

  /// 5 air-quality, 6 meteorology, 3 traffic and 2 auxiliary channels.
  static ChannelSchema canonical() {
    using G = ChannelGroup;
    return ChannelSchema({
        {"PM2.5", G::air_quality, "ug/m3", false},
        {"PM10", G::air_quality, "ug/m3", false},
        {"NO2", G::air_quality, "ug/m3", false},
        {"CO", G::air_quality, "mg/m3", false},
        {"O3", G::air_quality, "ug/m3", false},
        {"pressure", G::meteorology, "hPa", false},
        {"temperature", G::meteorology, "degC", false},
        {"humidity", G::meteorology, "%", false},
        {"wind_speed", G::meteorology, "m/s", false},
        {"wind_direction", G::meteorology, "deg", false},
        {"precipitation", G::meteorology, "mm", false},
        {"traffic_status", G::traffic, "ordinal 0=free 1=slow 2=congested", true},
        {"traffic_speed", G::traffic, "km/h", false},
        {"traffic_count", G::traffic, "vehicles/h", false},
        {"day_of_week", G::auxiliary, "Monday=0", true},
        {"hour_of_day", G::auxiliary, "local hour", true},
    });
  }

  std::size_t size() const { return channels_.size(); }
  const ChannelInfo& operator[](std::size_t i) const { return channels_.at(i); }
  const std::vector<ChannelInfo>& channels() const { return channels_; }

  std::optional<std::size_t> index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t require(std::string_view name) const {
    auto i = index_of(name);
    if (!i) throw Error("gridstore", "schema has no channel '" + std::string(name) + "'");
    return *i;
  }

  std::vector<std::size_t> indices_of(ChannelGroup g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < channels_.size(); ++i)
      if (channels_[i].group == g) out.push_back(i);
    return out;
  }

  /// Channels that carry urban-dynamics data (everything except auxiliary).
  std::vector<std::size_t> dynamic_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < channels_.size(); ++i)
      if (channels_[i].group != ChannelGroup::auxiliary) out.push_back(i);
    return out;
  }

  bool is_canonical_layout() const {
    return indices_of(ChannelGroup::air_quality).size() == 5 &&
           indices_of(ChannelGroup::meteorology).size() == 6 &&
           indices_of(ChannelGroup::traffic).size() == 3 &&
           indices_of(ChannelGroup::auxiliary).size() == 2;
  }

  std::uint32_t hash() const {
    std::string joined;
    for (const auto& c : channels_) joined += c.name + "|" + to_string(c.group) + ";";
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(joined.data()), static_cast<uInt>(joined.size())));
  }

  friend bool operator==(const ChannelSchema& a, const ChannelSchema& b) {
    if (a.channels_.size() != b.channels_.size()) return false;
    for (std::size_t i = 0; i < a.channels_.size(); ++i) {
      const auto& x = a.channels_[i];
      const auto& y = b.channels_[i];
      if (x.name != y.name || x.group != y.group || x.unit != y.unit ||
          x.categorical != y.categorical)
        return false;
    }
    return true;
  }

 private:
  std::vector<ChannelInfo> channels_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// One reading. `value == nullopt` is the missing-marker.
struct StationObservation {
  std::string station_id;
  GeoPoint location;
  UtcSeconds timestamp;
  std::string channel;
  std::optional<double> value;
};

/// City-wide multi-channel grid time series, indexed [time][channel][row][col].
/// Gaps are unset mask entries, never absent timestamps.
class UrbanDynamicsMap {
 public:
  UrbanDynamicsMap() = default;
  UrbanDynamicsMap(GridSpec spec, ChannelSchema schema, UtcHour start, std::size_t hours)
      : spec_(spec),
        schema_(std::move(schema)),
        start_(start),
        hours_(hours),
        values_(hours * schema_.size() * spec.cells(), 0.0f),
        mask_(values_.size(), 0) {}

  const GridSpec& spec() const { return spec_; }
  const ChannelSchema& schema() const { return schema_; }
  UtcHour start() const { return start_; }
  UtcHour hour_at(std::size_t t) const { return start_ + static_cast<std::int64_t>(t); }
  std::size_t hours() const { return hours_; }
  std::size_t channels() const { return schema_.size(); }
  std::size_t rows() const { return spec_.rows; }
  std::size_t cols() const { return spec_.cols; }
  std::size_t plane_size() const { return spec_.cells(); }

  std::size_t index(std::size_t t, std::size_t c, std::size_t r, std::size_t col) const {
    return ((t * channels() + c) * rows() + r) * cols() + col;
  }
  std::size_t plane_offset(std::size_t t, std::size_t c) const { return index(t, c, 0, 0); }

  float value(std::size_t t, std::size_t c, std::size_t r, std::size_t col) const {
    return values_[index(t, c, r, col)];
  }
  float value(std::size_t t, std::size_t c, CellIndex cell) const {
    return value(t, c, cell.row, cell.col);
  }
  bool present(std::size_t t, std::size_t c, std::size_t r, std::size_t col) const {
    return mask_[index(t, c, r, col)] != 0;
  }
  bool present(std::size_t t, std::size_t c, CellIndex cell) const {
    return present(t, c, cell.row, cell.col);
  }
  std::optional<float> get(std::size_t t, std::size_t c, CellIndex cell) const {
    const auto i = index(t, c, cell.row, cell.col);
    if (!mask_[i]) return std::nullopt;
    return values_[i];
  }

  void set(std::size_t t, std::size_t c, std::size_t r, std::size_t col, float v) {
    if (!std::isfinite(v)) throw Error("gridstore", "non-finite value written to map");
    const auto i = index(t, c, r, col);
    values_[i] = v;
    mask_[i] = 1;
  }
  void set(std::size_t t, std::size_t c, CellIndex cell, float v) { set(t, c, cell.row, cell.col, v); }
  void clear(std::size_t t, std::size_t c, std::size_t r, std::size_t col) {
    const auto i = index(t, c, r, col);
    values_[i] = 0.0f;
    mask_[i] = 0;
  }
  void clear(std::size_t t, std::size_t c, CellIndex cell) { clear(t, c, cell.row, cell.col); }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  std::span<std::uint8_t> mask() { return mask_; }
  std::span<const std::uint8_t> mask() const { return mask_; }

  /// Copy of hours [begin, end).
  UrbanDynamicsMap slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > hours_) throw Error("gridstore", "slice out of range");
    UrbanDynamicsMap out(spec_, schema_, hour_at(begin), end - begin);
    const auto stride = channels() * plane_size();
    std::copy(values_.begin() + begin * stride, values_.begin() + end * stride, out.values_.begin());
    std::copy(mask_.begin() + begin * stride, mask_.begin() + end * stride, out.mask_.begin());
    return out;
  }

  /// Cells with at least one present entry in any of `channels` during [begin, end).
  std::vector<CellIndex> observed_cells(std::span<const std::size_t> channels, std::size_t begin,
                                        std::size_t end) const {
    std::vector<CellIndex> out;
    for (std::size_t r = 0; r < rows(); ++r)
      for (std::size_t col = 0; col < cols(); ++col) {
        bool any = false;
        for (std::size_t t = begin; t < end && !any; ++t)
          for (auto c : channels)
            if (present(t, c, r, col)) {
              any = true;
              break;
            }
        if (any) out.push_back({r, col});
      }
    return out;
  }

  bool fully_present() const {
    return std::all_of(mask_.begin(), mask_.end(), [](std::uint8_t m) { return m != 0; });
  }

  friend bool operator==(const UrbanDynamicsMap& a, const UrbanDynamicsMap& b) {
    return a.spec_.rows == b.spec_.rows && a.spec_.cols == b.spec_.cols &&
           a.spec_.cell_km == b.spec_.cell_km && a.spec_.origin.lat == b.spec_.origin.lat &&
           a.spec_.origin.lon == b.spec_.origin.lon && a.schema_ == b.schema_ &&
           a.start_ == b.start_ && a.hours_ == b.hours_ &&
           std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0 &&
           a.mask_ == b.mask_;
  }

 private:
  GridSpec spec_;
  ChannelSchema schema_;
  UtcHour start_;
  std::size_t hours_ = 0;
  std::vector<float> values_;
  std::vector<std::uint8_t> mask_;
};

/// Writes day-of-week and hour-of-day into the auxiliary channels of every cell.
inline void attach_auxiliary(UrbanDynamicsMap& map, int utc_offset_hours) {
  const auto dow = map.schema().index_of("day_of_week");
  const auto hod = map.schema().index_of("hour_of_day");
  for (std::size_t t = 0; t < map.hours(); ++t) {
    const auto cal = local_calendar(map.hour_at(t), utc_offset_hours);
    for (std::size_t r = 0; r < map.rows(); ++r)
      for (std::size_t c = 0; c < map.cols(); ++c) {
        if (dow) map.set(t, *dow, r, c, static_cast<float>(cal.day_of_week));
        if (hod) map.set(t, *hod, r, c, static_cast<float>(cal.hour_of_day));
      }
  }
}

// ---------------------------------------------------------------------------
// Ingestion

struct RejectedRow {
  std::size_t line = 0;  // 1-based line number in the source
  std::string reason;
};

struct IngestResult {
  std::vector<StationObservation> observations;
  std::vector<RejectedRow> rejected;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses `station_id,lat,lon,timestamp,channel,value` records. A header line
/// is skipped if present. Empty, `NA` or unparseable values become missing.
inline IngestResult ingest_station_csv(std::istream& in, const ChannelSchema& schema) {
  IngestResult result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_csv_line(line);
    if (lineno == 1 && !f.empty() && detail::trim(f[0]) == "station_id") continue;
    if (f.size() != 6) {
      result.rejected.push_back({lineno, "expected 6 fields, got " + std::to_string(f.size())});
      continue;
    }
    const auto lat = detail::parse_double(f[1]);
    const auto lon = detail::parse_double(f[2]);
    if (!lat || !lon) {
      result.rejected.push_back({lineno, "malformed location"});
      continue;
    }
    const auto ts = parse_rfc3339(detail::trim(f[3]));
    if (!ts) {
      result.rejected.push_back({lineno, "malformed timestamp '" + f[3] + "'"});
      continue;
    }
    const std::string channel(detail::trim(f[4]));
    if (!schema.index_of(channel)) {
      result.rejected.push_back({lineno, "unknown channel '" + channel + "'"});
      continue;
    }
    const auto raw = detail::trim(f[5]);
    std::optional<double> value;
    if (!raw.empty() && raw != "NA") value = detail::parse_double(raw);
    result.observations.push_back(
        {std::string(detail::trim(f[0])), {*lat, *lon}, *ts, channel, value});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Hourly alignment

/// Averages the readings of one station/channel pair per wall-clock hour.
/// Emits one observation per hour between the first and last reading; hours
/// without any valid reading carry the missing-marker.
inline std::vector<StationObservation> align_hourly(std::span<const StationObservation> obs) {
  if (obs.empty()) return {};
  auto [lo, hi] = std::minmax_element(obs.begin(), obs.end(), [](const auto& a, const auto& b) {
    return a.timestamp < b.timestamp;
  });
  const auto first = UtcHour::floor_of(lo->timestamp);
  const auto last = UtcHour::floor_of(hi->timestamp);
  const auto n = static_cast<std::size_t>(last - first + 1);
  std::vector<double> sum(n, 0.0);
  std::vector<std::size_t> count(n, 0);
  for (const auto& o : obs) {
    if (!o.value) continue;
    const auto k = static_cast<std::size_t>(UtcHour::floor_of(o.timestamp) - first);
    sum[k] += *o.value;
    ++count[k];
  }
  std::vector<StationObservation> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    StationObservation h{obs.front().station_id, obs.front().location,
                         (first + static_cast<std::int64_t>(k)).seconds(), obs.front().channel,
                         std::nullopt};
    if (count[k] > 0) h.value = sum[k] / static_cast<double>(count[k]);
    out.push_back(std::move(h));
  }
  return out;
}

/// Groups by (station, channel) in order of first appearance and aligns each group.
inline std::vector<StationObservation> align_all(std::span<const StationObservation> obs) {
  std::map<std::pair<std::string, std::string>, std::size_t> group_of;
  std::vector<std::vector<StationObservation>> groups;
  for (const auto& o : obs) {
    auto [it, inserted] = group_of.emplace(std::make_pair(o.station_id, o.channel), groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(o);
  }
  std::vector<StationObservation> out;
  for (const auto& g : groups) {
    auto aligned = align_hourly(g);
    out.insert(out.end(), std::make_move_iterator(aligned.begin()),
               std::make_move_iterator(aligned.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rasterization

/// Writes hourly observations onto the grid over [start, start+hours).
/// Co-located stations are averaged. Observations outside the time range are ignored.
inline UrbanDynamicsMap rasterize(std::span<const StationObservation> obs, const GridSpec& spec,
                                  const ChannelSchema& schema, UtcHour start, std::size_t hours) {
  UrbanDynamicsMap map(spec, schema, start, hours);
  std::vector<double> sum(map.values().size(), 0.0);
  std::vector<std::uint32_t> count(map.values().size(), 0);
  for (const auto& o : obs) {
    const auto cell = spec.cell_of(o.location);
    if (!cell) throw Error("gridstore", "station '" + o.station_id + "' lies outside the grid");
    const auto c = schema.index_of(o.channel);
    if (!c) throw Error("gridstore", "unknown channel '" + o.channel + "'");
    if (!o.value) continue;
    const auto h = UtcHour::floor_of(o.timestamp);
    if (h < start || h - start >= static_cast<std::int64_t>(hours)) continue;
    const auto i = map.index(static_cast<std::size_t>(h - start), *c, cell->row, cell->col);
    sum[i] += *o.value;
    ++count[i];
  }
  auto values = map.values();
  auto mask = map.mask();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (count[i] == 0) continue;
    values[i] = static_cast<float>(sum[i] / count[i]);
    mask[i] = 1;
  }
  return map;
}

/// Rasterizes over the hour span covered by the observations.
inline UrbanDynamicsMap rasterize(std::span<const StationObservation> obs, const GridSpec& spec,
                                  const ChannelSchema& schema) {
  if (obs.empty()) return UrbanDynamicsMap(spec, schema, UtcHour{}, 0);
  auto [lo, hi] = std::minmax_element(obs.begin(), obs.end(), [](const auto& a, const auto& b) {
    return a.timestamp < b.timestamp;
  });
  const auto first = UtcHour::floor_of(lo->timestamp);
  const auto last = UtcHour::floor_of(hi->timestamp);
  return rasterize(obs, spec, schema, first, static_cast<std::size_t>(last - first + 1));
}

// ---------------------------------------------------------------------------
// Chronological split

struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
};

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

/// Contiguous train < validation < test segments of the time axis. A forecast
/// target t belongs to a segment only if its whole input window t-W..t-1 does too,
/// so no window straddles a boundary.
struct DatasetSplit {
  Segment train;
  Segment validation;
  Segment test;
  SplitFractions fractions;
  std::size_t window = 0;

  Segment targets(const Segment& s) const { return {s.begin + window, s.end}; }
};

namespace detail {
inline std::array<std::size_t, 2> split_bounds(std::size_t T, const SplitFractions& f) {
  const double n = static_cast<double>(T);
  return {static_cast<std::size_t>(std::floor(n * f.train + 1e-9)),
          static_cast<std::size_t>(std::floor(n * (f.train + f.validation) + 1e-9))};
}
}  // namespace detail

inline DatasetSplit chronological_split(std::size_t T, SplitFractions f, std::size_t window) {
  if (!(f.train > 0 && f.validation > 0 && f.test > 0) ||
      std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) {
    throw Error("gridstore", "split fractions must be positive and sum to 1");
  }
  auto fits = [&](std::size_t n) {
    const auto b = detail::split_bounds(n, f);
    return b[0] >= window + 1 && b[1] - b[0] >= window + 1 && n - b[1] >= window + 1;
  };
  if (!fits(T)) {
    std::size_t minimum = 3 * (window + 1);
    while (!fits(minimum)) ++minimum;
    throw SizingError("series of " + std::to_string(T) + " hours is too short for window " +
                          std::to_string(window) + "; need at least " + std::to_string(minimum) +
                          " hours",
                      minimum);
  }
  const auto b = detail::split_bounds(T, f);
  return DatasetSplit{{0, b[0]}, {b[0], b[1]}, {b[1], T}, f, window};
}

inline DatasetSplit chronological_split(const UrbanDynamicsMap& map, SplitFractions f,
                                        std::size_t window) {
  return chronological_split(map.hours(), f, window);
}

// ---------------------------------------------------------------------------
// Persistence: manifest.json + values.f32 + mask.bits

inline constexpr int kDatasetFormatVersion = 1;

namespace detail {

inline std::uint32_t crc_of(const void* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> mask) {
  std::vector<std::uint8_t> out((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return out;
}

inline std::vector<char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("gridstore", "cannot open " + p.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

inline nlohmann::json to_json(const GridSpec& s) {
  return {{"rows", s.rows},
          {"cols", s.cols},
          {"cell_km", s.cell_km},
          {"origin", {{"lat", s.origin.lat}, {"lon", s.origin.lon}}}};
}

inline GridSpec grid_spec_from_json(const nlohmann::json& j) {
  GridSpec s;
  s.rows = j.at("rows").get<std::size_t>();
  s.cols = j.at("cols").get<std::size_t>();
  s.cell_km = j.at("cell_km").get<double>();
  s.origin = {j.at("origin").at("lat").get<double>(), j.at("origin").at("lon").get<double>()};
  return s;
}

inline nlohmann::json to_json(const ChannelSchema& schema) {
  auto arr = nlohmann::json::array();
  for (const auto& c : schema.channels())
    arr.push_back({{"name", c.name},
                   {"group", to_string(c.group)},
                   {"unit", c.unit},
                   {"categorical", c.categorical}});
  return arr;
}

inline ChannelSchema channel_schema_from_json(const nlohmann::json& j) {
  std::vector<ChannelInfo> channels;
  for (const auto& c : j)
    channels.push_back({c.at("name").get<std::string>(),
                        channel_group_from_string(c.at("group").get<std::string>()),
                        c.value("unit", ""), c.value("categorical", false)});
  return ChannelSchema(std::move(channels));
}

inline void save_dataset(const UrbanDynamicsMap& map, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto values = map.values();
  const auto bits = detail::pack_bits(map.mask());
  nlohmann::json manifest = {
      {"format", "deepair-grid"},
      {"version", kDatasetFormatVersion},
      {"spec", to_json(map.spec())},
      {"schema", to_json(map.schema())},
      {"start", format_utc_hour(map.start())},
      {"dtype", "float32-le"},
      {"shape", {map.hours(), map.channels(), map.rows(), map.cols()}},
      {"layout", "[time][channel][row][col]"},
      {"checksum",
       {{"algorithm", "crc32"},
        {"values", detail::crc_of(values.data(), values.size_bytes())},
        {"mask", detail::crc_of(bits.data(), bits.size())}}},
  };
  {
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "values.f32", std::ios::binary);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  }
  {
    std::ofstream out(dir / "mask.bits", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  }
  if (!std::filesystem::exists(dir / "mask.bits"))
    throw FormatError("gridstore", "failed to write dataset to " + dir.string());
}

inline UrbanDynamicsMap load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw FormatError("gridstore", "missing manifest.json in " + dir.string());
    try {
      in >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("gridstore", std::string("unreadable manifest: ") + e.what());
    }
  }
  const int version = manifest.value("version", -1);
  if (version != kDatasetFormatVersion) {
    throw FormatError("gridstore", "dataset version " + std::to_string(version) +
                                       " is not supported (this build reads version " +
                                       std::to_string(kDatasetFormatVersion) + ")");
  }
  const auto spec = grid_spec_from_json(manifest.at("spec"));
  auto schema = channel_schema_from_json(manifest.at("schema"));
  const auto start = parse_utc_hour(manifest.at("start").get<std::string>());
  if (!start) throw FormatError("gridstore", "bad start timestamp in manifest");
  const auto shape = manifest.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 4 || shape[1] != schema.size() || shape[2] != spec.rows ||
      shape[3] != spec.cols) {
    throw FormatError("gridstore", "manifest shape disagrees with spec/schema");
  }
  UrbanDynamicsMap map(spec, std::move(schema), *start, shape[0]);

  const auto raw = detail::read_file(dir / "values.f32");
  const auto expected = map.values().size_bytes();
  if (raw.size() != expected) {
    throw FormatError("gridstore", "values.f32 length mismatch: expected " +
                                       std::to_string(expected) + " bytes, found " +
                                       std::to_string(raw.size()));
  }
  const auto bits = detail::read_file(dir / "mask.bits");
  const auto expected_bits = (map.mask().size() + 7) / 8;
  if (bits.size() != expected_bits) {
    throw FormatError("gridstore", "mask.bits length mismatch: expected " +
                                       std::to_string(expected_bits) + " bytes, found " +
                                       std::to_string(bits.size()));
  }
  const auto& sums = manifest.at("checksum");
  if (detail::crc_of(raw.data(), raw.size()) != sums.at("values").get<std::uint32_t>() ||
      detail::crc_of(bits.data(), bits.size()) != sums.at("mask").get<std::uint32_t>()) {
    throw FormatError("gridstore", "checksum mismatch in " + dir.string());
  }
  std::memcpy(map.values().data(), raw.data(), raw.size());
  auto mask = map.mask();
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = (static_cast<unsigned char>(bits[i / 8]) >> (i % 8)) & 1u;
  return map;
}

}  // namespace deepair
