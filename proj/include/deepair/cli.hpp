#pragma once

// Run configuration of the command-line driver: one flat JSON object of
// dotted keys. Every key has a documented default; unknown keys and values of
// the wrong type are rejected. Flag overrides are applied after the file.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "deepair/gridstore.hpp"
#include "deepair/interp.hpp"
#include "deepair/model.hpp"
#include "deepair/pipeline.hpp"
#include "deepair/synthcity.hpp"
#include "deepair/trainer.hpp"

namespace deepair {

inline constexpr int kRunManifestVersion = 1;

class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  /// Every accepted key with its default value. The value's JSON type is the key's type.
  static const nlohmann::json& defaults() {
    static const nlohmann::json d = [] {
      const SynthConfig s;
      const GridSpec g;
      const PreprocessConfig p;
      const ModelConfig m;
      const TrainConfig t;
      return nlohmann::json{
          {"seed", std::uint64_t{0}},
          {"deterministic", false},
          {"synth.rows", s.rows},
          {"synth.cols", s.cols},
          {"synth.hours", s.hours},
          {"synth.stations", s.stations},
          {"synth.diffusion", s.diffusion},
          {"synth.wind_scale", s.wind_scale},
          {"synth.emission", s.emission},
          {"synth.hotspots", s.hotspots},
          {"synth.background", s.background},
          {"synth.decay", s.decay},
          {"synth.noise_sd", s.noise_sd},
          {"synth.regional_sd", s.regional_sd},
          {"synth.diurnal", s.diurnal},
          {"synth.cell_km", s.cell_km},
          {"synth.start", s.start},
          {"synth.missing_rate", 0.0},
          {"synth.missing_burst", 4.0},
          {"grid.rows", g.rows},
          {"grid.cols", g.cols},
          {"grid.cell_km", g.cell_km},
          {"grid.origin_lat", g.origin.lat},
          {"grid.origin_lon", g.origin.lon},
          {"time.utc_offset_hours", p.utc_offset_hours},
          {"split.train", p.split.train},
          {"split.validation", p.split.validation},
          {"split.test", p.split.test},
          {"interp.max_gap", p.max_gap},
          {"interp.threshold", p.threshold},
          {"interp.variogram_bins", p.variogram_bins},
          {"interp.scope", "region"},
          {"model.kind", to_string(m.kind)},
          {"model.units", m.airres.units},
          {"model.channels", m.airres.channels},
          {"model.patch", m.airres.patch},
          {"model.one_by_one", m.airres.one_by_one},
          {"model.layers", m.head.layers},
          {"model.hidden", m.head.hidden},
          {"model.window", m.head.window},
          {"model.residual", m.head.residual},
          {"train.lr", t.lr},
          {"train.patience", t.patience},
          {"train.max_epochs", t.max_epochs},
          {"train.batch", t.batch},
          {"eval.mape_floor", kDefaultMapeFloor},
          {"eval.aqi_table", ""},
          {"forecast.hour", -1},
      };
    }();
    return d;
  }

  const nlohmann::json& values() const { return values_; }

  /// Merges a flat JSON object; nested objects are not accepted.
  void merge(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("cli", "config must be a JSON object of dotted keys");
    for (const auto& [key, value] : j.items()) set(key, value);
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cli", "cannot open config " + path.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("cli", "config " + path.string() + " is not valid JSON: " + e.what());
    }
    merge(j);
  }

  /// Applies `key=value`. The text is parsed as JSON when possible, else taken as a string.
  void override_with(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("cli", "override '" + assignment + "' is not key=value");
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    auto value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    set(key, value);
  }

  void set(const std::string& key, const nlohmann::json& value) {
    const auto& d = defaults();
    const auto it = d.find(key);
    if (it == d.end()) throw Error("cli", "unknown config key '" + key + "'");
    values_[key] = coerce(key, *it, value);
  }

  template <class T>
  T get(const std::string& key) const {
    if (!values_.contains(key)) throw Error("cli", "unknown config key '" + key + "'");
    return values_.at(key).get<T>();
  }

  std::uint64_t seed() const { return get<std::uint64_t>("seed"); }
  std::size_t threads() const { return get<bool>("deterministic") ? 1 : default_thread_count(); }

  SynthConfig synth() const {
    SynthConfig s;
    s.rows = get<std::size_t>("synth.rows");
    s.cols = get<std::size_t>("synth.cols");
    s.hours = get<std::size_t>("synth.hours");
    s.stations = get<std::size_t>("synth.stations");
    s.seed = seed();
    s.diffusion = get<double>("synth.diffusion");
    s.wind_scale = get<double>("synth.wind_scale");
    s.emission = get<double>("synth.emission");
    s.hotspots = get<std::size_t>("synth.hotspots");
    s.background = get<double>("synth.background");
    s.decay = get<double>("synth.decay");
    s.noise_sd = get<double>("synth.noise_sd");
    s.regional_sd = get<double>("synth.regional_sd");
    s.diurnal = get<double>("synth.diurnal");
    s.cell_km = get<double>("synth.cell_km");
    s.utc_offset_hours = get<int>("time.utc_offset_hours");
    s.start = get<std::string>("synth.start");
    return s;
  }

  GridSpec grid() const {
    GridSpec g;
    g.rows = get<std::size_t>("grid.rows");
    g.cols = get<std::size_t>("grid.cols");
    g.cell_km = get<double>("grid.cell_km");
    g.origin = {get<double>("grid.origin_lat"), get<double>("grid.origin_lon")};
    return g;
  }

  PreprocessConfig preprocess() const {
    PreprocessConfig p;
    p.split = {get<double>("split.train"), get<double>("split.validation"), get<double>("split.test")};
    p.window = get<std::size_t>("model.window");
    p.max_gap = get<std::size_t>("interp.max_gap");
    p.threshold = get<double>("interp.threshold");
    p.variogram_bins = get<std::size_t>("interp.variogram_bins");
    p.utc_offset_hours = get<int>("time.utc_offset_hours");
    return p;
  }

  ObservationScope scope() const {
    const auto s = get<std::string>("interp.scope");
    if (s == "region") return ObservationScope::region;
    if (s == "city") return ObservationScope::city;
    throw Error("cli", "interp.scope must be 'region' or 'city', got '" + s + "'");
  }

  ModelConfig model() const {
    ModelConfig m;
    m.kind = model_kind_from_string(get<std::string>("model.kind"));
    m.airres = {get<std::size_t>("model.units"), get<std::size_t>("model.channels"), get<std::size_t>("model.patch"),
                get<bool>("model.one_by_one")};
    m.head.layers = get<std::size_t>("model.layers");
    m.head.hidden = get<std::size_t>("model.hidden");
    m.head.window = get<std::size_t>("model.window");
    m.head.residual = get<bool>("model.residual");
    m.seed = seed();
    m.validate();
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.lr = get<double>("train.lr");
    t.patience = get<std::size_t>("train.patience");
    t.max_epochs = get<std::size_t>("train.max_epochs");
    t.batch = get<std::size_t>("train.batch");
    t.seed = seed();
    t.validate();
    return t;
  }

 private:
  static nlohmann::json coerce(const std::string& key, const nlohmann::json& def, const nlohmann::json& v) {
    auto bad = [&](const char* want) {
      return Error("cli", "config key '" + key + "' expects " + want + ", got " + v.dump());
    };
    if (def.is_boolean()) {
      if (!v.is_boolean()) throw bad("a boolean");
      return v;
    }
    if (def.is_string()) {
      if (!v.is_string()) throw bad("a string");
      return v;
    }
    if (def.is_number_unsigned()) {
      if (v.is_number_unsigned()) return v;
      if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
      throw bad("a nonnegative integer");
    }
    if (def.is_number_integer()) {
      if (!v.is_number_integer()) throw bad("an integer");
      return v.get<std::int64_t>();
    }
    if (!v.is_number()) throw bad("a number");
    return v.get<double>();
  }

  nlohmann::json values_;
};

/// `<UTC timestamp>_seed<seed>` under `root`.
inline std::filesystem::path default_run_dir(const std::filesystem::path& root, std::uint64_t seed) {
  const auto now = std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now());
  const auto secs = now.time_since_epoch().count();
  const std::time_t tt = static_cast<std::time_t>(secs);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return root / (std::string(buf) + "_seed" + std::to_string(seed));
}

}  // namespace deepair
