#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepair/model.hpp"
#include "deepair/pipeline.hpp"

namespace deepair {

struct PredictionRecord {
  std::string station_id;
  UtcHour hour;
  std::string pollutant;
  double y_true = 0;
  double y_pred = 0;
};

inline constexpr double kDefaultMapeFloor = 1.0;

struct MapeResult {
  std::optional<double> value;  // percent; nullopt when no record survives the floor
  std::size_t used = 0;
  std::size_t excluded = 0;
};

/// Mean of |y_true - y_pred| / y_true * 100 over records with y_true >= floor.
inline MapeResult mape(std::span<const PredictionRecord> records, double floor = kDefaultMapeFloor) {
  MapeResult r;
  double sum = 0;
  for (const auto& rec : records) {
    if (rec.y_true < floor) {
      ++r.excluded;
      continue;
    }
    sum += std::abs(rec.y_true - rec.y_pred) / rec.y_true;
    ++r.used;
  }
  if (r.used > 0) r.value = 100.0 * sum / static_cast<double>(r.used);
  return r;
}

/// 1 - SS_res / SS_tot; nullopt for fewer than 2 records or constant truth.
inline std::optional<double> r_squared(std::span<const PredictionRecord> records) {
  if (records.size() < 2) return std::nullopt;
  double mean = 0;
  for (const auto& r : records) mean += r.y_true;
  mean /= static_cast<double>(records.size());
  double ss_res = 0, ss_tot = 0;
  for (const auto& r : records) {
    ss_res += (r.y_true - r.y_pred) * (r.y_true - r.y_pred);
    ss_tot += (r.y_true - mean) * (r.y_true - mean);
  }
  if (ss_tot <= 0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

/// Concentration -> AQI level 1..6 per pollutant. Level k covers
/// [bound[k-2], bound[k-1]); the top level is open-ended.
class AqiLevelTable {
 public:
  AqiLevelTable() = default;

  void add(const std::string& pollutant, std::vector<double> upper_bounds) {
    if (upper_bounds.empty()) throw Error("evaluator", "AQI table for '" + pollutant + "' has no breakpoints");
    for (std::size_t i = 1; i < upper_bounds.size(); ++i)
      if (!(upper_bounds[i] > upper_bounds[i - 1]))
        throw Error("evaluator", "AQI breakpoints for '" + pollutant + "' are not strictly increasing");
    bounds_[pollutant] = std::move(upper_bounds);
  }

  bool covers(const std::string& pollutant) const { return bounds_.count(pollutant) != 0; }

  int level(const std::string& pollutant, double concentration) const {
    const auto it = bounds_.find(pollutant);
    if (it == bounds_.end()) throw Error("evaluator", "AQI table has no breakpoints for '" + pollutant + "'");
    const auto& b = it->second;
    return 1 + static_cast<int>(std::upper_bound(b.begin(), b.end(), concentration) - b.begin());
  }

  static AqiLevelTable from_json(const nlohmann::json& j) {
    AqiLevelTable t;
    for (const auto& [name, entry] : j.at("pollutants").items())
      t.add(name, entry.at("upper_bounds").get<std::vector<double>>());
    return t;
  }

  static AqiLevelTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("evaluator", "cannot open AQI breakpoint file " + path.string());
    return from_json(nlohmann::json::parse(in));
  }

  /// The breakpoint file shipped with the repository.
  static AqiLevelTable shipped() {
#ifdef DEEPAIR_DATA_DIR
    return load(std::filesystem::path(DEEPAIR_DATA_DIR) / "aqi_breakpoints.json");
#else
    return load("data/aqi_breakpoints.json");
#endif
  }

 private:
  std::map<std::string, std::vector<double>> bounds_;
};

/// Percentage of records whose predicted and true AQI levels agree.
inline std::optional<double> level_accuracy(std::span<const PredictionRecord> records, const AqiLevelTable& table) {
  if (records.empty()) return std::nullopt;
  std::size_t hits = 0;
  for (const auto& r : records)
    if (table.level(r.pollutant, r.y_pred) == table.level(r.pollutant, r.y_true)) ++hits;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(records.size());
}

struct PollutantRow {
  std::string pollutant;
  MapeResult mape;
  std::optional<double> r2;
  std::size_t records = 0;
};

/// One row per pollutant present in `records`, in first-appearance order.
inline std::vector<PollutantRow> per_pollutant_report(std::span<const PredictionRecord> records,
                                                      double floor = kDefaultMapeFloor) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<PredictionRecord>> groups;
  for (const auto& r : records) {
    auto [it, inserted] = groups.try_emplace(r.pollutant);
    if (inserted) order.push_back(r.pollutant);
    it->second.push_back(r);
  }
  std::vector<PollutantRow> rows;
  for (const auto& p : order) {
    const auto& g = groups[p];
    rows.push_back({p, mape(g, floor), r_squared(g), g.size()});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Files

namespace detail {
inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}
inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
}  // namespace detail

inline void write_predictions_csv(const std::filesystem::path& path, std::span<const PredictionRecord> records) {
  std::ofstream out(path);
  if (!out) throw Error("evaluator", "cannot write " + path.string());
  out << "station_id,hour,pollutant,y_true,y_pred\n";
  for (const auto& r : records)
    out << r.station_id << ',' << format_utc_hour(r.hour) << ',' << r.pollutant << ',' << detail::fmt_double(r.y_true)
        << ',' << detail::fmt_double(r.y_pred) << '\n';
}

inline std::vector<PredictionRecord> read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("evaluator", "cannot open " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 5) throw FormatError("evaluator", "malformed predictions row: " + line);
    const auto hour = parse_utc_hour(f[1]);
    if (!hour) throw FormatError("evaluator", "bad hour in predictions row: " + line);
    out.push_back({f[0], *hour, f[2], std::stod(f[3]), std::stod(f[4])});
  }
  return out;
}

/// Pairs (y_true, y_pred) for one pollutant, for scatter plots.
inline void write_scatter_csv(const std::filesystem::path& path, std::span<const PredictionRecord> records,
                              const std::string& pollutant = "PM2.5") {
  std::ofstream out(path);
  if (!out) throw Error("evaluator", "cannot write " + path.string());
  out << "y_true,y_pred\n";
  for (const auto& r : records)
    if (r.pollutant == pollutant) out << detail::fmt_double(r.y_true) << ',' << detail::fmt_double(r.y_pred) << '\n';
}

inline std::vector<PredictionRecord> read_scatter_csv(const std::filesystem::path& path, const std::string& pollutant = "PM2.5") {
  std::ifstream in(path);
  if (!in) throw Error("evaluator", "cannot open " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 2) throw FormatError("evaluator", "malformed scatter row: " + line);
    out.push_back({"", {}, pollutant, std::stod(f[0]), std::stod(f[1])});
  }
  return out;
}

inline nlohmann::json evaluation_report(std::span<const PredictionRecord> records, const AqiLevelTable& table,
                                        double floor = kDefaultMapeFloor) {
  const auto m = mape(records, floor);
  nlohmann::json per = nlohmann::json::array();
  for (const auto& row : per_pollutant_report(records, floor))
    per.push_back({{"pollutant", row.pollutant},
                   {"mape", detail::opt_json(row.mape.value)},
                   {"r2", detail::opt_json(row.r2)},
                   {"records", row.records},
                   {"excluded", row.mape.excluded}});
  return {{"mape", detail::opt_json(m.value)},
          {"r2", detail::opt_json(r_squared(records))},
          {"level_accuracy", detail::opt_json(level_accuracy(records, table))},
          {"per_pollutant", per},
          {"records", records.size()},
          {"excluded_count", m.excluded},
          {"mape_floor", floor}};
}

inline void write_per_pollutant_csv(const std::filesystem::path& path, std::span<const PredictionRecord> records,
                                    double floor = kDefaultMapeFloor) {
  std::ofstream out(path);
  if (!out) throw Error("evaluator", "cannot write " + path.string());
  out << "pollutant,mape,records,excluded\n";
  for (const auto& row : per_pollutant_report(records, floor))
    out << row.pollutant << ',' << (row.mape.value ? detail::fmt_double(*row.mape.value) : "undefined") << ','
        << row.records << ',' << row.mape.excluded << '\n';
}

// ---------------------------------------------------------------------------
// Forecasting

/// Memoized eval-mode encodings per (cell, hour). Every forecast path goes
/// through the same per-patch encode, so station forecasts are bit-identical
/// whichever path produced them.
class Forecaster {
 public:
  Forecaster(Model<float>& model, const PatchSource& source) : model_(&model), source_(&source) {
    if (source.edge() != model.patch()) throw Error("evaluator", "patch source and model disagree on patch size");
  }

  const Model<float>& model() const { return *model_; }

  /// Standardized 5-vector forecast for hour t at `cell`.
  std::vector<float> forecast_standardized(CellIndex cell, std::size_t t) {
    const std::size_t w = model_->window();
    if (t < w)
      throw Error("evaluator", "hour " + std::to_string(t) + " has insufficient history for window " + std::to_string(w));
    const auto p = source_->patch(cell, t - 1);
    const std::size_t pp = source_->edge() * source_->edge();
    std::vector<float> last(kAirQualityChannels);
    for (std::size_t k = 0; k < last.size(); ++k) last[k] = (*p)[k * pp + pp / 2];
    if (!model_->learned()) return last;
    const std::size_t f = model_->feature_size();
    nn::Tensor<float> features({w, f});
    for (std::size_t s = 0; s < w; ++s) {
      const auto& row = features_at(cell, t - w + s);
      std::copy(row.begin(), row.end(), features.ptr() + s * f);
    }
    nn::Tape<float> tape(false);
    const auto y = model_->head(tape, features, last);
    return {y.data().begin(), y.data().end()};
  }

  /// Native-unit forecast clamped at zero.
  std::vector<double> forecast(CellIndex cell, std::size_t t) {
    const auto z = forecast_standardized(cell, t);
    std::vector<double> out(z.size());
    for (std::size_t k = 0; k < z.size(); ++k)
      out[k] = std::max(0.0, source_->data().standardizer.to_raw(k, z[k]));
    return out;
  }

  void clear() { features_.clear(); }

 private:
  const std::vector<float>& features_at(CellIndex cell, std::size_t t) {
    const auto& inputs = source_->data().inputs;
    const auto key = (static_cast<std::uint64_t>(t) * inputs.rows() + cell.row) * inputs.cols() + cell.col;
    if (auto it = features_.find(key); it != features_.end()) return it->second;
    const auto p = source_->patch(cell, t);
    nn::Tensor<float> x({1, source_->channels(), source_->edge(), source_->edge()});
    std::copy(p->begin(), p->end(), x.ptr());
    const LocalCalendar cal[] = {source_->calendar(t)};
    nn::Tape<float> tape(false);
    const auto feat = model_->encode(tape, x, cal, nn::Mode::eval);
    return features_.emplace(key, std::vector<float>(feat.data().begin(), feat.data().end())).first->second;
  }

  Model<float>* model_;
  const PatchSource* source_;
  std::unordered_map<std::uint64_t, std::vector<float>> features_;
};

/// Leave-one-out forecasts at every station for every target hour of `segment`
/// that has ground truth; one record per present pollutant, ordered by
/// (hour, station, pollutant).
inline std::vector<PredictionRecord> forecast_records(Forecaster& forecaster, const PreparedData& data, Segment targets) {
  std::vector<PredictionRecord> out;
  const auto& schema = data.observed.schema();
  for (std::size_t t = targets.begin; t < targets.end; ++t)
    for (auto cell : data.stations) {
      bool any = false;
      for (std::size_t k = 0; k < kAirQualityChannels; ++k) any = any || data.observed.present(t, k, cell);
      if (!any) continue;
      const auto y = forecaster.forecast(cell, t);
      for (std::size_t k = 0; k < kAirQualityChannels; ++k)
        if (auto truth = data.observed.get(t, k, cell))
          out.push_back({station_id(cell), data.observed.hour_at(t), schema[k].name, *truth, y[k]});
    }
  return out;
}

/// 5-channel schema holding the air-quality channels of `schema`.
inline ChannelSchema air_quality_schema(const ChannelSchema& schema) {
  std::vector<ChannelInfo> out;
  for (std::size_t k = 0; k < kAirQualityChannels; ++k) out.push_back(schema[k]);
  return ChannelSchema(std::move(out));
}

/// Forecast for hour t at every grid cell, as a one-hour dense map.
inline UrbanDynamicsMap citywide_forecast(Forecaster& forecaster, const PreparedData& data, std::size_t t) {
  if (t >= data.observed.hours() + 1)
    throw Error("evaluator", "forecast hour beyond the end of the data plus one");
  UrbanDynamicsMap out(data.observed.spec(), air_quality_schema(data.observed.schema()), data.observed.hour_at(t), 1);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) {
      const auto y = forecaster.forecast({r, c}, t);
      for (std::size_t k = 0; k < y.size(); ++k) out.set(0, k, r, c, static_cast<float>(y[k]));
    }
  return out;
}

}  // namespace deepair
