#pragma once

// Two-step gap filling: temporal linear interpolation per station series, then
// correlation-gated spatial filling (ordinary Kriging or zero fill) per hour.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "deepair/gridstore.hpp"

namespace deepair {

using Series = std::vector<std::optional<double>>;

/// Linear interpolation across interior gaps of at most `max_gap` hours.
/// Leading/trailing runs of at most `max_gap` take the nearest valid value.
/// Valid entries are never modified.
inline Series interpolate_temporal(const Series& series, std::size_t max_gap) {
  Series out = series;
  const std::size_t n = series.size();
  std::size_t i = 0;
  std::optional<std::size_t> prev_valid;
  while (i < n) {
    if (series[i]) {
      prev_valid = i;
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && !series[j]) ++j;
    const std::size_t gap = j - i;
    if (gap <= max_gap) {
      if (prev_valid && j < n) {
        const double a = *series[*prev_valid];
        const double b = *series[j];
        const double span = static_cast<double>(j - *prev_valid);
        for (std::size_t k = i; k < j; ++k)
          out[k] = a + (b - a) * static_cast<double>(k - *prev_valid) / span;
      } else if (prev_valid) {
        for (std::size_t k = i; k < j; ++k) out[k] = *series[*prev_valid];
      } else if (j < n) {
        for (std::size_t k = i; k < j; ++k) out[k] = *series[j];
      }
    }
    i = j;
  }
  return out;
}

/// Applies temporal interpolation to every (channel, cell) series of `map`
/// that has at least one observation. Auxiliary channels are skipped.
inline void interpolate_temporal(UrbanDynamicsMap& map, std::size_t max_gap) {
  Series series(map.hours());
  for (auto c : map.schema().dynamic_indices())
    for (std::size_t r = 0; r < map.rows(); ++r)
      for (std::size_t col = 0; col < map.cols(); ++col) {
        bool any = false;
        for (std::size_t t = 0; t < map.hours(); ++t) {
          if (map.present(t, c, r, col)) {
            series[t] = map.value(t, c, r, col);
            any = true;
          } else {
            series[t].reset();
          }
        }
        if (!any) continue;
        const auto filled = interpolate_temporal(series, max_gap);
        for (std::size_t t = 0; t < map.hours(); ++t)
          if (!series[t] && filled[t]) map.set(t, c, r, col, static_cast<float>(*filled[t]));
      }
}

// ---------------------------------------------------------------------------
// Pearson correlation

/// Pearson's r over jointly present indices. nullopt when fewer than two joint
/// samples exist or either side has zero variance there.
inline std::optional<double> pearson(std::span<const std::optional<double>> x,
                                     std::span<const std::optional<double>> y) {
  if (x.size() != y.size()) throw Error("interp", "pearson: series lengths differ");
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] && y[i]) {
      sx += *x[i];
      sy += *y[i];
      ++n;
    }
  if (n < 2) return std::nullopt;
  const double mx = sx / static_cast<double>(n);
  const double my = sy / static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] && y[i]) {
      const double dx = *x[i] - mx;
      const double dy = *y[i] - my;
      sxy += dx * dy;
      sxx += dx * dx;
      syy += dy * dy;
    }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  Series a(x.begin(), x.end()), b(y.begin(), y.end());
  return pearson(std::span<const std::optional<double>>(a), std::span<const std::optional<double>>(b));
}

struct ChannelCorrelation {
  std::string channel;
  std::optional<double> r;  // mean pairwise r; nullopt = undefined
  std::size_t pairs = 0;    // number of station pairs with a defined r
  std::size_t stations = 0;
};

struct CorrelationReport {
  std::vector<ChannelCorrelation> channels;

  const ChannelCorrelation* find(std::string_view name) const {
    for (const auto& c : channels)
      if (c.channel == name) return &c;
    return nullptr;
  }
};

/// Mean pairwise station correlation per non-auxiliary channel over `segment`.
inline CorrelationReport correlation_report(const UrbanDynamicsMap& map, Segment segment) {
  CorrelationReport report;
  for (auto c : map.schema().dynamic_indices()) {
    const std::size_t ch[] = {c};
    const auto stations = map.observed_cells(ch, segment.begin, segment.end);
    std::vector<Series> series(stations.size(), Series(segment.size()));
    for (std::size_t s = 0; s < stations.size(); ++s)
      for (std::size_t t = segment.begin; t < segment.end; ++t)
        if (auto v = map.get(t, c, stations[s])) series[s][t - segment.begin] = *v;
    double sum = 0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < stations.size(); ++a)
      for (std::size_t b = a + 1; b < stations.size(); ++b)
        if (auto r = pearson(series[a], series[b])) {
          sum += *r;
          ++pairs;
        }
    ChannelCorrelation cc{map.schema()[c].name, std::nullopt, pairs, stations.size()};
    if (pairs > 0) cc.r = std::clamp(sum / static_cast<double>(pairs), -1.0, 1.0);
    report.channels.push_back(std::move(cc));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Fill policy

enum class FillMode { krige, zero_fill };

inline std::string to_string(FillMode m) { return m == FillMode::krige ? "krige" : "zero_fill"; }

struct FillPolicy {
  double threshold = 0.6;
  std::vector<std::string> channels;  // dynamic channel names
  std::vector<FillMode> modes;        // parallel to `channels`

  FillMode mode_of(std::string_view name) const {
    for (std::size_t i = 0; i < channels.size(); ++i)
      if (channels[i] == name) return modes[i];
    throw Error("interp", "fill policy has no channel '" + std::string(name) + "'");
  }
};

/// Krige exactly the channels whose defined r is strictly above `threshold`.
inline FillPolicy build_fill_policy(const CorrelationReport& report, const ChannelSchema& schema,
                                    double threshold = 0.6) {
  FillPolicy policy;
  policy.threshold = threshold;
  for (auto c : schema.dynamic_indices()) {
    const auto& name = schema[c].name;
    const auto* entry = report.find(name);
    if (!entry) throw Error("interp", "correlation report lacks channel '" + name + "'");
    policy.channels.push_back(name);
    policy.modes.push_back(entry->r && *entry->r > threshold ? FillMode::krige : FillMode::zero_fill);
  }
  return policy;
}

inline nlohmann::json to_json(const CorrelationReport& report, const FillPolicy& policy) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& c : report.channels) {
    j[c.channel] = {{"r", c.r ? nlohmann::json(*c.r) : nlohmann::json(nullptr)},
                    {"pair_count", c.pairs},
                    {"stations", c.stations},
                    {"policy", to_string(policy.mode_of(c.channel))}};
  }
  return {{"threshold", policy.threshold}, {"channels", j}};
}

// ---------------------------------------------------------------------------
// Variogram

struct Point2 {
  double x = 0.0;  // km east
  double y = 0.0;  // km south
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct SpatialSample {
  Point2 at;
  double value = 0.0;
};

/// Exponential model: gamma(h) = nugget + (sill - nugget)(1 - exp(-3h/range)), gamma(0) = 0.
struct Variogram {
  double nugget = 0.0;
  double sill = 1.0;
  double range_km = 10.0;

  double operator()(double h) const {
    if (h <= 0.0) return 0.0;
    return nugget + (sill - nugget) * (1.0 - std::exp(-3.0 * h / range_km));
  }

  void validate() const {
    if (!(nugget >= 0.0) || !(sill > 0.0) || !(range_km > 0.0) || nugget > sill)
      throw Error("interp", "variogram violates 0 <= nugget <= sill, sill > 0, range > 0");
  }
};

inline nlohmann::json to_json(const Variogram& v) {
  return {{"model", "exponential"}, {"nugget", v.nugget}, {"sill", v.sill}, {"range_km", v.range_km}};
}

inline Variogram variogram_from_json(const nlohmann::json& j) {
  return {j.at("nugget").get<double>(), j.at("sill").get<double>(), j.at("range_km").get<double>()};
}

/// Binned empirical semivariogram, pooled over any number of sample sets
/// (e.g. all training hours) that share a fixed maximum lag.
class EmpiricalVariogram {
 public:
  EmpiricalVariogram(double max_lag_km, std::size_t bins)
      : max_lag_(max_lag_km), sum_(bins, 0.0), count_(bins, 0) {
    if (bins == 0 || !(max_lag_km > 0.0)) throw Error("interp", "empirical variogram needs bins and a positive lag");
  }

  void add(std::span<const SpatialSample> samples) {
    const double width = bin_width();
    for (std::size_t i = 0; i < samples.size(); ++i)
      for (std::size_t j = i + 1; j < samples.size(); ++j) {
        const double h = distance(samples[i].at, samples[j].at);
        if (h <= 0.0 || h > max_lag_ * (1.0 + 1e-12)) continue;
        const auto k = std::min(static_cast<std::size_t>(h / width), sum_.size() - 1);
        const double d = samples[i].value - samples[j].value;
        sum_[k] += 0.5 * d * d;
        ++count_[k];
      }
  }

  std::size_t bins() const { return sum_.size(); }
  double bin_width() const { return max_lag_ / static_cast<double>(sum_.size()); }
  double bin_center(std::size_t k) const { return (static_cast<double>(k) + 0.5) * bin_width(); }
  std::size_t count(std::size_t k) const { return count_[k]; }
  std::optional<double> gamma(std::size_t k) const {
    if (count_[k] == 0) return std::nullopt;
    return sum_[k] / static_cast<double>(count_[k]);
  }

  /// Least-squares fit of the exponential model over non-empty bin centers.
  /// Range is searched on a log grid then refined by golden section; nugget and
  /// partial sill solve a clamped 2-parameter linear problem for each range.
  Variogram fit() const {
    std::vector<double> h, g;
    for (std::size_t k = 0; k < bins(); ++k)
      if (auto v = gamma(k)) {
        h.push_back(bin_center(k));
        g.push_back(*v);
      }
    if (h.empty()) return {0.0, kSillFloor, max_lag_};

    auto solve = [&](double range, double& nugget, double& partial) {
      double s1 = 0, sg = 0, sgg = 0, sy = 0, sgy = 0;
      for (std::size_t k = 0; k < h.size(); ++k) {
        const double basis = 1.0 - std::exp(-3.0 * h[k] / range);
        s1 += 1;
        sg += basis;
        sgg += basis * basis;
        sy += g[k];
        sgy += basis * g[k];
      }
      const double det = s1 * sgg - sg * sg;
      if (std::abs(det) > 1e-14 * std::max(1.0, s1 * sgg)) {
        nugget = (sgg * sy - sg * sgy) / det;
        partial = (s1 * sgy - sg * sy) / det;
      } else {
        nugget = 0.0;
        partial = sgg > 0 ? sgy / sgg : 0.0;
      }
      if (nugget < 0.0) {
        nugget = 0.0;
        partial = sgg > 0 ? std::max(0.0, sgy / sgg) : 0.0;
      }
      if (partial < 0.0) {
        partial = 0.0;
        nugget = std::max(0.0, sy / s1);
      }
      double sse = 0;
      for (std::size_t k = 0; k < h.size(); ++k) {
        const double r = g[k] - nugget - partial * (1.0 - std::exp(-3.0 * h[k] / range));
        sse += r * r;
      }
      return sse;
    };

    const double lo = std::log(bin_width() * 0.05);
    const double hi = std::log(max_lag_ * 20.0);
    constexpr int kGrid = 80;
    int best = 0;
    double best_sse = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= kGrid; ++i) {
      double a, b;
      const double sse = solve(std::exp(lo + (hi - lo) * i / kGrid), a, b);
      if (sse < best_sse) {
        best_sse = sse;
        best = i;
      }
    }
    double a = lo + (hi - lo) * std::max(0, best - 1) / kGrid;
    double b = lo + (hi - lo) * std::min(kGrid, best + 1) / kGrid;
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double n0, p0;
    for (int it = 0; it < 60; ++it) {
      const double c = b - phi * (b - a);
      const double d = a + phi * (b - a);
      if (solve(std::exp(c), n0, p0) < solve(std::exp(d), n0, p0)) b = d; else a = c;
    }
    const double range = std::exp(0.5 * (a + b));
    double nugget, partial;
    solve(range, nugget, partial);
    Variogram v{nugget, nugget + partial, range};
    if (v.sill < kSillFloor) v.sill = std::max(kSillFloor, v.nugget);
    v.range_km = std::clamp(v.range_km, 1e-3, 1e6);
    return v;
  }

  static constexpr double kSillFloor = 1e-6;

 private:
  double max_lag_;
  std::vector<double> sum_;
  std::vector<std::size_t> count_;
};

inline double max_pair_distance(std::span<const SpatialSample> s) {
  double m = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j) m = std::max(m, distance(s[i].at, s[j].at));
  return m;
}

inline std::size_t distinct_locations(std::span<const SpatialSample> s) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& p : s) pts.emplace_back(p.at.x, p.at.y);
  std::sort(pts.begin(), pts.end());
  return static_cast<std::size_t>(std::unique(pts.begin(), pts.end()) - pts.begin());
}

/// Fits a variogram to one sample set. nullopt (fallback signal) when fewer
/// than four observations at four distinct locations are available.
inline std::optional<Variogram> fit_variogram(std::span<const SpatialSample> obs, std::size_t bins = 12) {
  if (obs.size() < 4 || distinct_locations(obs) < 4) return std::nullopt;
  EmpiricalVariogram ev(max_pair_distance(obs), bins);
  ev.add(obs);
  return ev.fit();
}

// ---------------------------------------------------------------------------
// Ordinary Kriging

/// Factorized ordinary-Kriging system for one observation set. Duplicate
/// locations are merged by averaging; if the system is still singular the
/// predictor falls back to inverse-distance weighting (power 2).
class KrigingSystem {
 public:
  KrigingSystem(std::span<const SpatialSample> obs, const Variogram& vg) : vg_(vg) {
    if (obs.empty()) throw Error("interp", "kriging needs at least one observation");
    for (const auto& o : obs) {
      auto it = std::find_if(points_.begin(), points_.end(), [&](const Point2& p) {
        return std::abs(p.x - o.at.x) < 1e-9 && std::abs(p.y - o.at.y) < 1e-9;
      });
      if (it == points_.end()) {
        points_.push_back(o.at);
        values_.push_back(o.value);
        counts_.push_back(1);
      } else {
        const auto k = static_cast<std::size_t>(it - points_.begin());
        values_[k] += o.value;
        ++counts_[k];
      }
    }
    for (std::size_t k = 0; k < values_.size(); ++k) values_[k] /= static_cast<double>(counts_[k]);
    const auto n = static_cast<Eigen::Index>(points_.size());
    Eigen::MatrixXd a(n + 1, n + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j)
        a(i, j) = i == j ? 0.0 : vg_(distance(points_[i], points_[j]));
      a(i, n) = 1.0;
      a(n, i) = 1.0;
    }
    a(n, n) = 0.0;
    lu_.compute(a);
    if (!lu_.isInvertible()) {
      idw_ = true;
      spdlog::warn("interp: singular kriging system with {} points, using inverse-distance weights", n);
    }
  }

  std::size_t size() const { return points_.size(); }
  bool uses_idw() const { return idw_; }

  /// Weights over the (deduplicated) observations for each target, one column per target.
  Eigen::MatrixXd weights(std::span<const Point2> targets) const {
    const auto n = static_cast<Eigen::Index>(points_.size());
    const auto m = static_cast<Eigen::Index>(targets.size());
    if (idw_) {
      Eigen::MatrixXd w(n, m);
      for (Eigen::Index t = 0; t < m; ++t) {
        double total = 0;
        Eigen::Index exact = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d = distance(points_[i], targets[t]);
          if (d < 1e-12) exact = i;
          w(i, t) = d < 1e-12 ? 0.0 : 1.0 / (d * d);
          total += w(i, t);
        }
        if (exact >= 0) {
          w.col(t).setZero();
          w(exact, t) = 1.0;
        } else {
          w.col(t) /= total;
        }
      }
      return w;
    }
    Eigen::MatrixXd rhs(n + 1, m);
    for (Eigen::Index t = 0; t < m; ++t) {
      for (Eigen::Index i = 0; i < n; ++i) rhs(i, t) = vg_(distance(points_[i], targets[t]));
      rhs(n, t) = 1.0;
    }
    return lu_.solve(rhs).topRows(n);
  }

  std::vector<double> predict(std::span<const Point2> targets) const {
    if (targets.empty()) return {};
    const auto w = weights(targets);
    const Eigen::Map<const Eigen::VectorXd> z(values_.data(), static_cast<Eigen::Index>(values_.size()));
    const Eigen::VectorXd out = w.transpose() * z;
    return {out.data(), out.data() + out.size()};
  }

 private:
  Variogram vg_;
  std::vector<Point2> points_;
  std::vector<double> values_;
  std::vector<std::size_t> counts_;
  Eigen::FullPivLU<Eigen::MatrixXd> lu_;
  bool idw_ = false;
};

inline std::vector<double> krige(std::span<const SpatialSample> obs, std::span<const Point2> targets,
                                 const Variogram& vg) {
  return KrigingSystem(obs, vg).predict(targets);
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-channel z-scoring with statistics from the training segment.
/// Auxiliary channels pass through unchanged.
struct Standardizer {
  std::vector<std::string> channels;
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const UrbanDynamicsMap& map, Segment segment) {
    Standardizer s;
    const auto& schema = map.schema();
    for (std::size_t c = 0; c < schema.size(); ++c) {
      s.channels.push_back(schema[c].name);
      if (schema[c].group == ChannelGroup::auxiliary) {
        s.mean.push_back(0.0);
        s.stddev.push_back(1.0);
        continue;
      }
      double sum = 0, sq = 0;
      std::size_t n = 0;
      for (std::size_t t = segment.begin; t < segment.end; ++t) {
        const auto off = map.plane_offset(t, c);
        for (std::size_t i = 0; i < map.plane_size(); ++i)
          if (map.mask()[off + i]) {
            const double v = map.values()[off + i];
            sum += v;
            sq += v * v;
            ++n;
          }
      }
      const double m = n ? sum / static_cast<double>(n) : 0.0;
      const double var = n > 1 ? std::max(0.0, (sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1)) : 0.0;
      s.mean.push_back(m);
      s.stddev.push_back(var > 1e-24 ? std::sqrt(var) : 1.0);
    }
    return s;
  }

  double to_standard(std::size_t c, double raw) const { return (raw - mean[c]) / stddev[c]; }
  double to_raw(std::size_t c, double z) const { return z * stddev[c] + mean[c]; }

  void apply(UrbanDynamicsMap& map) const {
    if (map.channels() != mean.size()) throw Error("interp", "standardizer/channel count mismatch");
    for (std::size_t t = 0; t < map.hours(); ++t)
      for (std::size_t c = 0; c < map.channels(); ++c) {
        const auto off = map.plane_offset(t, c);
        for (std::size_t i = 0; i < map.plane_size(); ++i)
          if (map.mask()[off + i])
            map.values()[off + i] = static_cast<float>(to_standard(c, map.values()[off + i]));
      }
  }

  nlohmann::json to_json() const {
    return {{"channels", channels}, {"mean", mean}, {"stddev", stddev}};
  }
  static Standardizer from_json(const nlohmann::json& j) {
    return {j.at("channels").get<std::vector<std::string>>(), j.at("mean").get<std::vector<double>>(),
            j.at("stddev").get<std::vector<double>>()};
  }
};

// ---------------------------------------------------------------------------
// Spatial filling

/// Counts channel-hours that had to be zero-filled because no observation was usable.
struct FillStats {
  std::atomic<std::size_t> empty_krige_channel_hours{0};
};

/// Which observations feed Kriging for a region.
enum class ObservationScope { region, city };

/// Rectangular window of the grid; may extend past the map edge.
struct Region {
  std::ptrdiff_t row0 = 0;
  std::ptrdiff_t col0 = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  static Region centered(CellIndex c, std::size_t edge) {
    const auto half = static_cast<std::ptrdiff_t>(edge / 2);
    return {static_cast<std::ptrdiff_t>(c.row) - half, static_cast<std::ptrdiff_t>(c.col) - half, edge, edge};
  }
};

/// Spatial filler bound to one (temporally interpolated, standardized) sparse map.
class SpatialFiller {
 public:
  /// `variograms` is indexed by schema channel; only krige channels need one.
  SpatialFiller(const UrbanDynamicsMap& sparse, FillPolicy policy, std::vector<std::optional<Variogram>> variograms)
      : map_(&sparse), policy_(std::move(policy)), variograms_(std::move(variograms)) {
    channels_ = sparse.schema().dynamic_indices();
    for (auto c : channels_) {
      const auto mode = policy_.mode_of(sparse.schema()[c].name);
      modes_.push_back(mode);
      if (mode == FillMode::krige && (c >= variograms_.size() || !variograms_[c]))
        throw Error("interp", "no variogram for kriged channel '" + sparse.schema()[c].name + "'");
    }
  }

  const UrbanDynamicsMap& map() const { return *map_; }
  const std::vector<std::size_t>& channels() const { return channels_; }
  const FillPolicy& policy() const { return policy_; }
  const std::vector<std::optional<Variogram>>& variograms() const { return variograms_; }
  std::size_t empty_channel_hours() const { return stats_->empty_krige_channel_hours.load(); }

  /// Fills `region` at hour `t` into `out` laid out [dynamic channel][height][width].
  /// Cells outside the map are 0. The `exclude` cell's own readings are never read.
  void fill(std::size_t t, Region region, std::optional<CellIndex> exclude, ObservationScope scope,
            std::span<float> out) const {
    const auto& m = *map_;
    const std::size_t plane = region.height * region.width;
    if (out.size() != channels_.size() * plane) throw Error("interp", "fill output buffer has wrong size");
    std::fill(out.begin(), out.end(), 0.0f);

    const auto rows = static_cast<std::ptrdiff_t>(m.rows());
    const auto cols = static_cast<std::ptrdiff_t>(m.cols());
    const std::ptrdiff_t r_lo = std::max<std::ptrdiff_t>(0, region.row0);
    const std::ptrdiff_t r_hi = std::min<std::ptrdiff_t>(rows, region.row0 + static_cast<std::ptrdiff_t>(region.height));
    const std::ptrdiff_t c_lo = std::max<std::ptrdiff_t>(0, region.col0);
    const std::ptrdiff_t c_hi = std::min<std::ptrdiff_t>(cols, region.col0 + static_cast<std::ptrdiff_t>(region.width));
    const std::ptrdiff_t o_r_lo = scope == ObservationScope::city ? 0 : r_lo;
    const std::ptrdiff_t o_r_hi = scope == ObservationScope::city ? rows : r_hi;
    const std::ptrdiff_t o_c_lo = scope == ObservationScope::city ? 0 : c_lo;
    const std::ptrdiff_t o_c_hi = scope == ObservationScope::city ? cols : c_hi;
    auto excluded = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
      return exclude && static_cast<std::ptrdiff_t>(exclude->row) == r &&
             static_cast<std::ptrdiff_t>(exclude->col) == c;
    };
    auto out_index = [&](std::size_t k, std::ptrdiff_t r, std::ptrdiff_t c) {
      return k * plane + static_cast<std::size_t>(r - region.row0) * region.width +
             static_cast<std::size_t>(c - region.col0);
    };

    std::vector<SpatialSample> samples;
    std::vector<Point2> targets;
    std::vector<std::size_t> target_slots;
    for (std::size_t k = 0; k < channels_.size(); ++k) {
      const auto ch = channels_[k];
      const auto off = m.plane_offset(t, ch);
      const auto vals = m.values();
      const auto mask = m.mask();
      // Observed cells inside the region keep their reading (unless excluded).
      for (auto r = r_lo; r < r_hi; ++r)
        for (auto c = c_lo; c < c_hi; ++c) {
          const auto i = off + static_cast<std::size_t>(r * cols + c);
          if (mask[i] && !excluded(r, c)) out[out_index(k, r, c)] = vals[i];
        }
      if (modes_[k] == FillMode::zero_fill) continue;

      samples.clear();
      for (auto r = o_r_lo; r < o_r_hi; ++r)
        for (auto c = o_c_lo; c < o_c_hi; ++c) {
          const auto i = off + static_cast<std::size_t>(r * cols + c);
          if (mask[i] && !excluded(r, c)) {
            const auto [x, y] = m.spec().cell_center_km({static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
            samples.push_back({{x, y}, vals[i]});
          }
        }
      if (samples.empty()) {
        ++stats_->empty_krige_channel_hours;
        spdlog::debug("interp: no observations for channel '{}' at hour {}, zero-filled",
                      m.schema()[ch].name, t);
        continue;
      }
      targets.clear();
      target_slots.clear();
      for (auto r = r_lo; r < r_hi; ++r)
        for (auto c = c_lo; c < c_hi; ++c) {
          const auto i = off + static_cast<std::size_t>(r * cols + c);
          if (mask[i] && !excluded(r, c)) continue;
          const auto [x, y] = m.spec().cell_center_km({static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
          targets.push_back({x, y});
          target_slots.push_back(out_index(k, r, c));
        }
      if (targets.empty()) continue;
      const auto pred = KrigingSystem(samples, *variograms_[ch]).predict(targets);
      for (std::size_t j = 0; j < pred.size(); ++j) out[target_slots[j]] = static_cast<float>(pred[j]);
    }
  }

 private:
  const UrbanDynamicsMap* map_;
  FillPolicy policy_;
  std::vector<std::optional<Variogram>> variograms_;
  std::vector<std::size_t> channels_;
  std::vector<FillMode> modes_;
  std::shared_ptr<FillStats> stats_ = std::make_shared<FillStats>();
};

/// Dense city-wide map: every hour, every dynamic channel filled from city-wide
/// observations (leave-one-out at `exclude` if given). Auxiliary channels are
/// derived from the calendar where absent.
inline UrbanDynamicsMap fill_map(const UrbanDynamicsMap& sparse, const FillPolicy& policy,
                                 const std::vector<std::optional<Variogram>>& variograms,
                                 std::optional<CellIndex> exclude = std::nullopt, int utc_offset_hours = 8) {
  SpatialFiller filler(sparse, policy, variograms);
  UrbanDynamicsMap dense = sparse;
  const Region whole{0, 0, sparse.rows(), sparse.cols()};
  const auto& channels = filler.channels();
  std::vector<float> buf(channels.size() * sparse.plane_size());
  for (std::size_t t = 0; t < sparse.hours(); ++t) {
    filler.fill(t, whole, exclude, ObservationScope::city, buf);
    for (std::size_t k = 0; k < channels.size(); ++k)
      for (std::size_t r = 0; r < sparse.rows(); ++r)
        for (std::size_t c = 0; c < sparse.cols(); ++c)
          dense.set(t, channels[k], r, c, buf[k * sparse.plane_size() + r * sparse.cols() + c]);
  }
  const auto dow = sparse.schema().index_of("day_of_week");
  const auto hod = sparse.schema().index_of("hour_of_day");
  for (std::size_t t = 0; t < dense.hours(); ++t) {
    const auto cal = local_calendar(dense.hour_at(t), utc_offset_hours);
    for (std::size_t r = 0; r < dense.rows(); ++r)
      for (std::size_t c = 0; c < dense.cols(); ++c) {
        if (dow && !dense.present(t, *dow, r, c)) dense.set(t, *dow, r, c, static_cast<float>(cal.day_of_week));
        if (hod && !dense.present(t, *hod, r, c)) dense.set(t, *hod, r, c, static_cast<float>(cal.hour_of_day));
      }
  }
  if (filler.empty_channel_hours() > 0)
    spdlog::info("interp: {} kriged channel-hours had no observations and were zero-filled",
                 filler.empty_channel_hours());
  return dense;
}

/// Pools every hour of `segment` into one empirical variogram per kriged
/// channel and fits it. Channels with too few stations get nullopt.
inline std::vector<std::optional<Variogram>> fit_channel_variograms(const UrbanDynamicsMap& map,
                                                                     const FillPolicy& policy,
                                                                     Segment segment, std::size_t bins = 12) {
  std::vector<std::optional<Variogram>> out(map.channels());
  for (auto c : map.schema().dynamic_indices()) {
    if (policy.mode_of(map.schema()[c].name) != FillMode::krige) continue;
    const std::size_t ch[] = {c};
    const auto cells = map.observed_cells(ch, segment.begin, segment.end);
    std::vector<SpatialSample> where;
    for (auto cell : cells) {
      const auto [x, y] = map.spec().cell_center_km(cell);
      where.push_back({{x, y}, 0.0});
    }
    if (cells.size() < 4) continue;
    EmpiricalVariogram ev(max_pair_distance(where), bins);
    std::vector<SpatialSample> hour;
    for (std::size_t t = segment.begin; t < segment.end; ++t) {
      hour.clear();
      for (std::size_t s = 0; s < cells.size(); ++s)
        if (auto v = map.get(t, c, cells[s])) hour.push_back({where[s].at, *v});
      ev.add(hour);
    }
    out[c] = ev.fit();
  }
  return out;
}

/// Variogram used when a kriged channel has too few stations to fit one.
inline Variogram fallback_variogram(const GridSpec& spec) {
  const double extent = std::hypot(static_cast<double>(spec.rows), static_cast<double>(spec.cols)) * spec.cell_km;
  return {0.0, 1.0, extent / 3.0};
}

}  // namespace deepair
