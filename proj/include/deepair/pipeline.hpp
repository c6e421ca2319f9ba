#pragma once

// Raw observations -> model-ready state: split, temporal gap filling,
// standardization, correlation gating, variograms. Plus the cached
// leave-one-out patch source shared by training and evaluation.

#include <filesystem>
#include <memory>
#include <shared_mutex>
#include <unordered_map>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "deepair/gridstore.hpp"
#include "deepair/interp.hpp"
#include "deepair/model.hpp"
#include "deepair/parallel.hpp"

namespace deepair {

struct PreprocessConfig {
  SplitFractions split;
  std::size_t window = 48;
  std::size_t max_gap = 6;
  double threshold = 0.6;
  std::size_t variogram_bins = 12;
  int utc_offset_hours = 8;
};

inline constexpr std::size_t kAirQualityChannels = 5;

/// Everything downstream stages need, derived once from the raw observations.
struct PreparedData {
  UrbanDynamicsMap observed;  // raw readings in native units; forecast ground truth
  UrbanDynamicsMap inputs;    // gap-filled in time and standardized; still sparse in space
  Standardizer standardizer;
  CorrelationReport correlation;
  FillPolicy policy;
  std::vector<std::optional<Variogram>> variograms;  // by schema channel
  DatasetSplit split;
  std::vector<CellIndex> stations;  // cells with any air-quality reading
  int utc_offset_hours = 8;

  nlohmann::json state_json() const {
    nlohmann::json vg = nlohmann::json::object();
    for (std::size_t c = 0; c < variograms.size(); ++c)
      if (variograms[c]) vg[inputs.schema()[c].name] = to_json(*variograms[c]);
    nlohmann::json st = nlohmann::json::array();
    for (auto s : stations) st.push_back({s.row, s.col});
    return {{"standardizer", standardizer.to_json()},
            {"correlation", to_json(correlation, policy)},
            {"threshold", policy.threshold},
            {"variograms", vg},
            {"split",
             {{"train", {split.train.begin, split.train.end}},
              {"validation", {split.validation.begin, split.validation.end}},
              {"test", {split.test.begin, split.test.end}},
              {"window", split.window}}},
            {"stations", st},
            {"utc_offset_hours", utc_offset_hours}};
  }
};

inline std::string station_id(CellIndex c) { return "r" + std::to_string(c.row) + "c" + std::to_string(c.col); }

inline std::vector<CellIndex> station_cells(const UrbanDynamicsMap& map) {
  std::vector<std::size_t> aq;
  for (std::size_t c = 0; c < kAirQualityChannels && c < map.channels(); ++c) aq.push_back(c);
  return map.observed_cells(aq, 0, map.hours());
}

inline PreparedData prepare(const UrbanDynamicsMap& observed, const PreprocessConfig& cfg) {
  if (!observed.schema().is_canonical_layout())
    throw Error("interp", "dataset does not use the canonical channel layout");
  PreparedData d;
  d.observed = observed;
  d.utc_offset_hours = cfg.utc_offset_hours;
  d.split = chronological_split(observed, cfg.split, cfg.window);
  d.stations = station_cells(observed);
  if (d.stations.empty()) throw Error("interp", "dataset has no air-quality observations");

  d.inputs = observed;
  interpolate_temporal(d.inputs, cfg.max_gap);
  d.standardizer = Standardizer::fit(d.inputs, d.split.train);
  d.standardizer.apply(d.inputs);
  d.correlation = correlation_report(d.inputs, d.split.train);
  d.policy = build_fill_policy(d.correlation, d.inputs.schema(), cfg.threshold);
  d.variograms = fit_channel_variograms(d.inputs, d.policy, d.split.train, cfg.variogram_bins);
  for (auto c : d.inputs.schema().dynamic_indices()) {
    if (d.policy.mode_of(d.inputs.schema()[c].name) == FillMode::krige && !d.variograms[c]) {
      spdlog::warn("interp: too few stations to fit a variogram for '{}', using the fallback model",
                   d.inputs.schema()[c].name);
      d.variograms[c] = fallback_variogram(d.inputs.spec());
    }
  }
  return d;
}

/// Rebuilds preprocessing state saved by state_json() around a raw map.
inline PreparedData restore(const UrbanDynamicsMap& observed, const nlohmann::json& state, std::size_t window,
                            std::size_t max_gap) {
  PreparedData d;
  d.observed = observed;
  d.utc_offset_hours = state.at("utc_offset_hours").get<int>();
  d.standardizer = Standardizer::from_json(state.at("standardizer"));
  const auto& sp = state.at("split");
  d.split.train = {sp.at("train")[0].get<std::size_t>(), sp.at("train")[1].get<std::size_t>()};
  d.split.validation = {sp.at("validation")[0].get<std::size_t>(), sp.at("validation")[1].get<std::size_t>()};
  d.split.test = {sp.at("test")[0].get<std::size_t>(), sp.at("test")[1].get<std::size_t>()};
  d.split.window = window;
  if (d.split.test.end != observed.hours())
    throw Error("interp", "preprocessing state does not match the dataset length");
  for (const auto& s : state.at("stations")) d.stations.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>()});

  const auto& schema = observed.schema();
  d.policy.threshold = state.at("threshold").get<double>();
  const auto& corr = state.at("correlation").at("channels");
  for (auto c : schema.dynamic_indices()) {
    const auto& name = schema[c].name;
    const auto& entry = corr.at(name);
    ChannelCorrelation cc{name, std::nullopt, entry.value("pair_count", std::size_t{0}), entry.value("stations", std::size_t{0})};
    if (!entry.at("r").is_null()) cc.r = entry.at("r").get<double>();
    d.correlation.channels.push_back(cc);
    d.policy.channels.push_back(name);
    d.policy.modes.push_back(entry.at("policy").get<std::string>() == "krige" ? FillMode::krige : FillMode::zero_fill);
  }
  d.variograms.assign(schema.size(), std::nullopt);
  for (const auto& [name, vg] : state.at("variograms").items()) d.variograms[schema.require(name)] = variogram_from_json(vg);

  d.inputs = observed;
  interpolate_temporal(d.inputs, max_gap);
  d.standardizer.apply(d.inputs);
  return d;
}

/// edge x edge window of every channel of a dense map centered at `center`,
/// laid out [channel][edge][edge]; cells off the map are 0.
inline std::vector<float> crop_patch(const UrbanDynamicsMap& map, CellIndex center, std::size_t t, std::size_t edge) {
  if (t >= map.hours()) throw Error("trainer", "crop hour " + std::to_string(t) + " outside the map");
  const auto region = Region::centered(center, edge);
  std::vector<float> out(map.channels() * edge * edge, 0.0f);
  for (std::size_t c = 0; c < map.channels(); ++c)
    for (std::size_t i = 0; i < edge; ++i)
      for (std::size_t j = 0; j < edge; ++j) {
        const auto r = region.row0 + static_cast<std::ptrdiff_t>(i);
        const auto k = region.col0 + static_cast<std::ptrdiff_t>(j);
        if (r < 0 || k < 0 || r >= static_cast<std::ptrdiff_t>(map.rows()) || k >= static_cast<std::ptrdiff_t>(map.cols()))
          continue;
        out[(c * edge + i) * edge + j] = map.value(t, c, static_cast<std::size_t>(r), static_cast<std::size_t>(k));
      }
  return out;
}

/// Leave-one-out patches, computed on demand and memoized. The center cell's
/// own readings are always excluded, so a patch never leaks the target station.
/// Thread-safe: concurrent readers share the cache.
class PatchSource {
 public:
  PatchSource(const PreparedData& data, std::size_t edge, ObservationScope scope = ObservationScope::region)
      : data_(&data),
        filler_(data.inputs, data.policy, data.variograms),
        edge_(edge),
        scope_(scope),
        channels_(data.inputs.schema().dynamic_indices().size()) {}

  const PreparedData& data() const { return *data_; }
  std::size_t edge() const { return edge_; }
  std::size_t channels() const { return channels_; }
  std::size_t patch_size() const { return channels_ * edge_ * edge_; }
  std::size_t cached() const {
    std::shared_lock lock(mutex_);
    return cache_.size();
  }
  void clear() {
    std::unique_lock lock(mutex_);
    cache_.clear();
  }

  /// [dynamic channel][edge][edge], standardized, cells off the map 0.
  std::shared_ptr<const std::vector<float>> patch(CellIndex center, std::size_t t) const {
    if (t >= data_->inputs.hours())
      throw Error("trainer", "patch hour " + std::to_string(t) + " outside the dataset (" +
                                 std::to_string(data_->inputs.hours()) + " hours)");
    if (center.row >= data_->inputs.rows() || center.col >= data_->inputs.cols())
      throw Error("trainer", "patch center outside the grid");
    const auto key = (static_cast<std::uint64_t>(t) * data_->inputs.rows() + center.row) * data_->inputs.cols() + center.col;
    {
      std::shared_lock lock(mutex_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    auto values = std::make_shared<std::vector<float>>(patch_size());
    filler_.fill(t, Region::centered(center, edge_), center, scope_, *values);
    std::unique_lock lock(mutex_);
    return cache_.emplace(key, std::move(values)).first->second;
  }

  LocalCalendar calendar(std::size_t t) const {
    return local_calendar(data_->inputs.hour_at(t), data_->utc_offset_hours);
  }

  /// Input window for target hour t: hours t-W .. t-1 stacked into [W, C, P, P].
  template <class T = float>
  Window<T> window(CellIndex center, std::size_t t, std::size_t w) const {
    if (t < w) throw Error("trainer", "target hour " + std::to_string(t) + " has fewer than " + std::to_string(w) + " hours of history");
    Window<T> out{nn::Tensor<T>({w, channels_, edge_, edge_}), {}, {}};
    for (std::size_t s = 0; s < w; ++s) {
      const auto p = patch(center, t - w + s);
      std::transform(p->begin(), p->end(), out.patches.ptr() + s * patch_size(), [](float v) { return static_cast<T>(v); });
      out.calendar.push_back(calendar(t - w + s));
      out.hours.push_back(t - w + s);
    }
    return out;
  }

  /// Fills the cache for every (cell, hour) pair, in parallel.
  void precompute(std::span<const CellIndex> cells, Segment hours, std::size_t threads) const {
    const std::size_t n = cells.size() * hours.size();
    parallel_for(n, threads, [&](std::size_t i) { patch(cells[i % cells.size()], hours.begin + i / cells.size()); });
  }

 private:
  const PreparedData* data_;
  SpatialFiller filler_;
  std::size_t edge_;
  ObservationScope scope_;
  std::size_t channels_;
  mutable std::shared_mutex mutex_;
  mutable std::unordered_map<std::uint64_t, std::shared_ptr<const std::vector<float>>> cache_;
};

}  // namespace deepair
