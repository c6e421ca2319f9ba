#pragma once

// Synthetic city: a PM2.5 field advected by a shared wind and diffused on the
// grid, fed by traffic-driven emissions. Every other channel is a smooth
// function of that field, the traffic cycle or slow weather processes, so the
// forecasting task has learnable spatial and temporal structure.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepair/gridstore.hpp"

namespace deepair {

struct SynthConfig {
  std::size_t rows = 20;
  std::size_t cols = 20;
  std::size_t hours = 2160;
  std::size_t stations = 25;
  std::uint64_t seed = 0;
  double diffusion = 0.05;    // cell^2 per hour
  double wind_scale = 0.3;    // max wind speed, cells per hour
  double emission = 3.0;      // peak source strength, ug/m3 per hour at a hotspot
  std::size_t hotspots = 4;
  double background = 25.0;   // median regional level, ug/m3
  double decay = 0.08;        // relaxation rate towards the regional level, per hour
  double noise_sd = 0.3;      // process noise on PM2.5, ug/m3 per hour
  double regional_sd = 0.6;   // stddev of the log regional level
  double diurnal = 0.7;       // share of emissions that follows the traffic cycle, in [0,1]
  double cell_km = 3.0;
  int utc_offset_hours = 8;
  std::string start = "2023-01-02T00:00:00+08:00";

  /// Explicit-scheme stability bound: 4*D + max|v| <= 0.5.
  void validate() const {
    if (rows < 3 || cols < 3) throw Error("synthcity", "grid must be at least 3x3");
    if (stations < 1 || stations > rows * cols) throw Error("synthcity", "station count must be in [1, rows*cols]");
    if (diffusion < 0 || wind_scale < 0 || emission < 0 || decay < 0 || decay > 1 || noise_sd < 0 || regional_sd < 0)
      throw Error("synthcity", "diffusion, wind_scale, emission, noise_sd, regional_sd must be >= 0 and decay in [0,1]");
    if (diurnal < 0 || diurnal > 1) throw Error("synthcity", "diurnal must be in [0,1]");
    const double cfl = 4.0 * diffusion + wind_scale;
    if (cfl > 0.5 + 1e-12)
      throw Error("synthcity", "unstable configuration: 4*diffusion + wind_scale = " + std::to_string(cfl) +
                                   " exceeds the stability bound 0.5");
    if (!parse_utc_hour(start)) throw Error("synthcity", "bad start timestamp '" + start + "'");
  }

  nlohmann::json to_json() const {
    return {{"rows", rows},         {"cols", cols},          {"hours", hours},       {"stations", stations},
            {"seed", seed},         {"diffusion", diffusion}, {"wind_scale", wind_scale}, {"emission", emission},
            {"hotspots", hotspots}, {"background", background}, {"decay", decay},    {"noise_sd", noise_sd},
            {"regional_sd", regional_sd}, {"diurnal", diurnal},
            {"cell_km", cell_km},   {"utc_offset_hours", utc_offset_hours}, {"start", start}};
  }
};

struct SynthResult {
  UrbanDynamicsMap truth;     // dense
  UrbanDynamicsMap observed;  // dynamic channels at station cells only
  std::vector<CellIndex> stations;
};

/// One explicit step of dC/dt = D lap C - div(v C) + source, in flux form.
/// Diffusive flux through the outer walls is always 0. Advective flux through
/// the walls is 0 unless `inflow` is given, in which case the walls are open:
/// air leaves with the edge cell's concentration and enters at `inflow`.
/// With closed walls sum(C) changes only through `source`.
inline void advect_diffuse_step(std::vector<double>& c, std::size_t rows, std::size_t cols, double diffusion, double u,
                                double v, std::span<const double> source = {}, std::optional<double> inflow = {}) {
  std::vector<double> next(c);
  auto at = [&](std::size_t r, std::size_t k) { return c[r * cols + k]; };
  auto upwind = [](double speed, double from_low, double from_high) { return speed >= 0 ? speed * from_low : speed * from_high; };
  // Face flux between (r,k) and (r,k+1), positive towards +col.
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k + 1 < cols; ++k) {
      const double a = at(r, k), b = at(r, k + 1);
      const double flux = diffusion * (a - b) + upwind(u, a, b);
      next[r * cols + k] -= flux;
      next[r * cols + k + 1] += flux;
    }
  // Face flux between (r,k) and (r+1,k), positive towards +row.
  for (std::size_t r = 0; r + 1 < rows; ++r)
    for (std::size_t k = 0; k < cols; ++k) {
      const double a = at(r, k), b = at(r + 1, k);
      const double flux = diffusion * (a - b) + upwind(v, a, b);
      next[r * cols + k] -= flux;
      next[(r + 1) * cols + k] += flux;
    }
  if (inflow) {
    for (std::size_t r = 0; r < rows; ++r) {
      next[r * cols] += upwind(u, *inflow, at(r, 0));
      next[r * cols + cols - 1] -= upwind(u, at(r, cols - 1), *inflow);
    }
    for (std::size_t k = 0; k < cols; ++k) {
      next[k] += upwind(v, *inflow, at(0, k));
      next[(rows - 1) * cols + k] -= upwind(v, at(rows - 1, k), *inflow);
    }
  }
  if (!source.empty())
    for (std::size_t i = 0; i < next.size(); ++i) next[i] += source[i];
  c.swap(next);
}

namespace detail {

/// Relative traffic intensity at a local hour: morning and evening peaks, lighter weekends.
inline double traffic_cycle(LocalCalendar cal) {
  const double h = cal.hour_of_day;
  auto bump = [](double x, double mu, double w) { return std::exp(-0.5 * (x - mu) * (x - mu) / (w * w)); };
  const double weekday = cal.day_of_week >= 5 ? 0.65 : 1.0;
  return weekday * (0.25 + 0.9 * bump(h, 8.0, 1.5) + 1.0 * bump(h, 18.0, 2.0) + 0.3 * bump(h, 13.0, 3.0));
}

inline double sunlight(LocalCalendar cal) {
  return std::max(0.0, std::sin(std::numbers::pi * (cal.hour_of_day - 6.0) / 13.0));
}

struct Ar1 {
  double phi, sd, state = 0;
  double step(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    state = phi * state + std::sqrt(1.0 - phi * phi) * sd * n(rng);
    return state;
  }
};

}  // namespace detail

inline SynthResult simulate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  GridSpec spec;
  spec.rows = cfg.rows;
  spec.cols = cfg.cols;
  spec.cell_km = cfg.cell_km;
  const auto schema = ChannelSchema::canonical();
  const auto start = *parse_utc_hour(cfg.start);
  const std::size_t n = cfg.rows * cfg.cols;

  // Static layout: emission hotspots and road density.
  std::vector<double> source_map(n, 0.0), roads(n, 0.0);
  for (std::size_t s = 0; s < cfg.hotspots; ++s) {
    const double r0 = unit(rng) * static_cast<double>(cfg.rows), c0 = unit(rng) * static_cast<double>(cfg.cols);
    const double width = 1.5 + 2.0 * unit(rng), strength = 0.5 + 0.5 * unit(rng);
    for (std::size_t r = 0; r < cfg.rows; ++r)
      for (std::size_t c = 0; c < cfg.cols; ++c) {
        const double d2 = std::pow(static_cast<double>(r) + 0.5 - r0, 2) + std::pow(static_cast<double>(c) + 0.5 - c0, 2);
        source_map[r * cfg.cols + c] += strength * std::exp(-0.5 * d2 / (width * width));
      }
  }
  const double peak = *std::max_element(source_map.begin(), source_map.end());
  for (std::size_t i = 0; i < n; ++i) {
    source_map[i] = peak > 0 ? source_map[i] / peak : 0.0;
    roads[i] = 0.2 + 0.8 * source_map[i] + 0.1 * unit(rng);
  }

  // Per-cell weather offsets (a smooth gradient plus a little local texture).
  std::vector<double> temp_offset(n), humid_offset(n);
  for (std::size_t r = 0; r < cfg.rows; ++r)
    for (std::size_t c = 0; c < cfg.cols; ++c) {
      temp_offset[r * cfg.cols + c] = 1.5 * (static_cast<double>(r) / cfg.rows - 0.5) + 0.2 * normal(rng);
      humid_offset[r * cfg.cols + c] = 4.0 * (static_cast<double>(c) / cfg.cols - 0.5) + 1.0 * normal(rng);
    }

  detail::Ar1 wind_u{0.97, cfg.wind_scale * 0.7}, wind_v{0.97, cfg.wind_scale * 0.7};
  // Regional level: multi-day pollution episodes shared by the whole city.
  detail::Ar1 regional{0.985, cfg.regional_sd};
  detail::Ar1 pressure{0.995, 6.0}, temp_anomaly{0.98, 3.0}, humid_anomaly{0.95, 10.0}, rain{0.9, 1.0};
  std::vector<detail::Ar1> local_humidity(n, detail::Ar1{0.8, 6.0});
  std::vector<detail::Ar1> local_traffic(n, detail::Ar1{0.7, 0.15});

  const std::size_t ch_pm25 = 0, ch_pm10 = 1, ch_no2 = 2, ch_co = 3, ch_o3 = 4, ch_pressure = 5, ch_temp = 6,
                    ch_humid = 7, ch_wspeed = 8, ch_wdir = 9, ch_precip = 10, ch_tstatus = 11, ch_tspeed = 12,
                    ch_tcount = 13;

  UrbanDynamicsMap truth(spec, schema, start, cfg.hours);
  std::vector<double> pm(n, cfg.background), source(n);
  // Spin-up so the first recorded hour is already in the driven regime.
  const std::size_t spinup = 72;
  for (std::size_t step = 0; step < spinup + cfg.hours; ++step) {
    const bool record = step >= spinup;
    const std::size_t t = record ? step - spinup : 0;
    const auto cal = local_calendar(start + (static_cast<std::int64_t>(step) - static_cast<std::int64_t>(spinup)),
                                    cfg.utc_offset_hours);
    double u = wind_u.step(rng), v = wind_v.step(rng);
    const double speed = std::hypot(u, v);
    if (speed > cfg.wind_scale) {
      u *= cfg.wind_scale / speed;
      v *= cfg.wind_scale / speed;
    }
    const double traffic = detail::traffic_cycle(cal);
    const double sun = detail::sunlight(cal);
    const double p_anom = pressure.step(rng), t_anom = temp_anomaly.step(rng), h_anom = humid_anomaly.step(rng);
    const double rain_drive = rain.step(rng);
    const double level = cfg.background * std::exp(regional.step(rng));
    const double precip = std::max(0.0, rain_drive - 1.2) * 3.0;
    // Rain speeds up the relaxation towards background.
    const double relax = std::min(1.0, cfg.decay * (1.0 + 0.5 * precip));

    std::vector<double> local_t(n);
    for (std::size_t i = 0; i < n; ++i) {
      local_t[i] = std::max(0.0, traffic * roads[i] * (1.0 + local_traffic[i].step(rng)));
      source[i] = cfg.emission * (0.15 + source_map[i]) * (1.0 - cfg.diurnal + cfg.diurnal * traffic) - relax * (pm[i] - level) +
                  cfg.noise_sd * normal(rng);
    }
    advect_diffuse_step(pm, cfg.rows, cfg.cols, cfg.diffusion, u, v, source, level);
    for (auto& x : pm) x = std::max(x, 2.0);
    if (!record) continue;

    const double temperature = 12.0 + 8.0 * sun + t_anom;
    const double wind_ms = std::hypot(u, v) * cfg.cell_km * 1000.0 / 3600.0 * 10.0;
    // Direction the wind blows from, degrees clockwise from north (rows grow southwards).
    double wdir = std::atan2(-u, v) * 180.0 / std::numbers::pi;
    if (wdir < 0) wdir += 360.0;
    for (std::size_t r = 0; r < cfg.rows; ++r)
      for (std::size_t c = 0; c < cfg.cols; ++c) {
        const std::size_t i = r * cfg.cols + c;
        const double p25 = pm[i];
        const double tr = local_t[i];
        truth.set(t, ch_pm25, r, c, static_cast<float>(p25));
        truth.set(t, ch_pm10, r, c, static_cast<float>(1.35 * p25 + 12.0 + 10.0 * tr));
        const double no2 = 12.0 + 0.25 * p25 + 35.0 * tr;
        truth.set(t, ch_no2, r, c, static_cast<float>(no2));
        truth.set(t, ch_co, r, c, static_cast<float>(1.1 + 0.012 * p25 + 0.6 * tr));
        truth.set(t, ch_o3, r, c, static_cast<float>(std::max(5.0, 30.0 + 70.0 * sun - 0.35 * no2 + 0.5 * t_anom)));
        truth.set(t, ch_pressure, r, c, static_cast<float>(1013.0 + p_anom + 0.3 * (static_cast<double>(r) / cfg.rows)));
        truth.set(t, ch_temp, r, c, static_cast<float>(temperature + temp_offset[i]));
        truth.set(t, ch_humid, r, c,
                  static_cast<float>(std::clamp(55.0 - 1.5 * (temperature - 12.0) + h_anom + humid_offset[i] +
                                                    local_humidity[i].step(rng),
                                                5.0, 100.0)));
        truth.set(t, ch_wspeed, r, c, static_cast<float>(wind_ms));
        truth.set(t, ch_wdir, r, c, static_cast<float>(wdir));
        truth.set(t, ch_precip, r, c, static_cast<float>(precip));
        const double congestion = std::clamp(tr / 1.2, 0.0, 1.0);
        truth.set(t, ch_tstatus, r, c, static_cast<float>(congestion < 0.35 ? 0 : congestion < 0.7 ? 1 : 2));
        truth.set(t, ch_tspeed, r, c, static_cast<float>(60.0 - 35.0 * congestion));
        truth.set(t, ch_tcount, r, c, static_cast<float>(1500.0 * tr));
      }
  }
  attach_auxiliary(truth, cfg.utc_offset_hours);

  // Distinct station cells.
  std::vector<std::size_t> cells(n);
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  std::shuffle(cells.begin(), cells.end(), rng);
  cells.resize(cfg.stations);
  std::sort(cells.begin(), cells.end());
  std::vector<CellIndex> stations;
  for (auto i : cells) stations.push_back({i / cfg.cols, i % cfg.cols});

  UrbanDynamicsMap observed(spec, schema, start, cfg.hours);
  const auto dynamic = schema.dynamic_indices();
  for (std::size_t t = 0; t < cfg.hours; ++t)
    for (auto cell : stations)
      for (auto ch : dynamic) observed.set(t, ch, cell, truth.value(t, ch, cell));
  attach_auxiliary(observed, cfg.utc_offset_hours);
  return {std::move(truth), std::move(observed), std::move(stations)};
}

/// Knocks out observations in bursts. Each (station, channel) series is a
/// two-state Markov chain whose stationary missing fraction is `rate` and whose
/// missing runs have mean length `burst_len`. Auxiliary channels are untouched.
/// Returns the number of entries that were cleared.
inline std::size_t plant_missingness(UrbanDynamicsMap& observed, double rate, double burst_len, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("synthcity", "missingness rate must be in [0, 1)");
  if (!(burst_len >= 1.0)) throw Error("synthcity", "burst length must be >= 1");
  if (rate == 0.0) return 0;
  const double recover = 1.0 / burst_len;
  const double fail = std::min(1.0, rate * recover / (1.0 - rate));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto dynamic = observed.schema().dynamic_indices();
  std::size_t cleared = 0;
  for (std::size_t r = 0; r < observed.rows(); ++r)
    for (std::size_t c = 0; c < observed.cols(); ++c) {
      for (auto ch : dynamic) {
        bool any = false;
        for (std::size_t t = 0; t < observed.hours() && !any; ++t) any = observed.present(t, ch, r, c);
        if (!any) continue;
        bool missing = unit(rng) < rate;
        for (std::size_t t = 0; t < observed.hours(); ++t) {
          if (t > 0) missing = missing ? unit(rng) >= recover : unit(rng) < fail;
          if (missing && observed.present(t, ch, r, c)) {
            observed.clear(t, ch, r, c);
            ++cleared;
          }
        }
      }
    }
  return cleared;
}

}  // namespace deepair
