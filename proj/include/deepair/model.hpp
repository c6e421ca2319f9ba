#pragma once

// Forecasting networks. A model maps a window of W leave-one-out patches
// (hours t-W .. t-1, one station at the center) to a standardized 5-pollutant
// forecast for hour t.
//
// The computation splits in two halves so evaluation can cache work:
//   encode: per-step feature rows [N, F]   (per-sample in eval mode)
//   head:   feature sequence [W, F] -> [5]  (stacked LSTM + dense)

#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepair/common.hpp"
#include "deepair/tensor.hpp"
#include "deepair/time.hpp"

namespace deepair {

enum class ModelKind { deepair, resnet_lstm, lstm_only, persistence };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::deepair: return "deepair";
    case ModelKind::resnet_lstm: return "resnet_lstm";
    case ModelKind::lstm_only: return "lstm_only";
    case ModelKind::persistence: return "persistence";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "deepair") return ModelKind::deepair;
  if (s == "resnet_lstm") return ModelKind::resnet_lstm;
  if (s == "lstm_only") return ModelKind::lstm_only;
  if (s == "persistence") return ModelKind::persistence;
  throw Error("deepair-model", "unknown model kind '" + s + "'");
}

struct AirResConfig {
  std::size_t units = 4;
  std::size_t channels = 32;
  std::size_t patch = 15;
  bool one_by_one = true;

  void validate() const {
    if (units < 1) throw Error("deepair-model", "airres.units must be >= 1");
    if (channels < 1) throw Error("deepair-model", "airres.channels must be >= 1");
    if (patch % 2 == 0 || patch < 1) throw Error("deepair-model", "airres.patch must be odd");
  }
};

struct LstmHeadConfig {
  std::size_t layers = 2;
  std::size_t hidden = 128;
  std::size_t window = 48;
  std::size_t outputs = 5;
  bool residual = false;  // forecast = last observed center value + learned correction

  void validate() const {
    if (layers < 1) throw Error("deepair-model", "head.layers must be >= 1");
    if (hidden < 1) throw Error("deepair-model", "head.hidden must be >= 1");
    if (window < 1) throw Error("deepair-model", "head.window must be >= 1");
    if (outputs != 5) throw Error("deepair-model", "head.outputs must equal the 5 air-quality channels");
  }
};

struct ModelConfig {
  ModelKind kind = ModelKind::deepair;
  AirResConfig airres;
  LstmHeadConfig head;
  std::uint64_t seed = 0;

  /// Dynamic (non-auxiliary) input channels per patch.
  std::size_t dynamic_channels = 14;

  void validate() const {
    airres.validate();
    head.validate();
    if (dynamic_channels < head.outputs)
      throw Error("deepair-model", "patches must carry at least the 5 air-quality channels");
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},
            {"units", airres.units},
            {"channels", airres.channels},
            {"patch", airres.patch},
            {"one_by_one", airres.one_by_one},
            {"layers", head.layers},
            {"hidden", head.hidden},
            {"window", head.window},
            {"outputs", head.outputs},
            {"residual", head.residual},
            {"dynamic_channels", dynamic_channels},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.kind = model_kind_from_string(j.at("kind").get<std::string>());
    c.airres = {j.at("units").get<std::size_t>(), j.at("channels").get<std::size_t>(), j.at("patch").get<std::size_t>(),
                j.at("one_by_one").get<bool>()};
    c.head = {j.at("layers").get<std::size_t>(), j.at("hidden").get<std::size_t>(), j.at("window").get<std::size_t>(),
              j.at("outputs").get<std::size_t>(), j.value("residual", false)};
    c.dynamic_channels = j.value("dynamic_channels", std::size_t{14});
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }
};

/// Initialisation recorded next to checkpoints.
inline nlohmann::json init_description() {
  return {{"conv", "kaiming_uniform"},
          {"dense", "kaiming_uniform"},
          {"lstm", "uniform(+-1/sqrt(hidden)), forget bias +1"},
          {"batchnorm", "scale 1, shift 0, running mean 0, running var 1"},
          {"embedding", "uniform(+-0.05)"}};
}

/// Input of one forecast: W consecutive patches plus their local calendar.
template <class T>
struct Window {
  nn::Tensor<T> patches;                // [W, dynamic_channels, P, P], standardized
  std::vector<LocalCalendar> calendar;  // per step
  std::vector<std::size_t> hours;       // dataset hour per step; optional, consecutive when set
};

template <class T>
struct ConvLayer {
  nn::Tensor<T> weight;
  nn::Tensor<T> bias;  // may be empty
};

template <class T>
struct NormLayer {
  nn::Tensor<T> scale;
  nn::Tensor<T> shift;
  nn::BatchNormState<T> state;
};

template <class T>
struct ResidualUnitParams {
  ConvLayer<T> conv1;
  NormLayer<T> norm1;
  ConvLayer<T> conv2;
  NormLayer<T> norm2;
};

/// x + F(x) followed by ReLU, F = conv3 -> BN -> ReLU -> conv3 -> BN.
template <class T>
nn::Tensor<T> residual_unit(nn::Tape<T>& tape, const nn::Tensor<T>& x, ResidualUnitParams<T>& p, nn::Mode mode) {
  auto y = nn::conv2d(tape, x, p.conv1.weight, p.conv1.bias);
  y = nn::batchnorm(tape, y, p.norm1.scale, p.norm1.shift, p.norm1.state, mode);
  y = nn::relu(tape, y);
  y = nn::conv2d(tape, y, p.conv2.weight, p.conv2.bias);
  y = nn::batchnorm(tape, y, p.norm2.scale, p.norm2.shift, p.norm2.state, mode);
  return nn::relu(tape, nn::add(tape, x, y));
}

template <class T>
class Model {
 public:
  explicit Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    if (config_.kind == ModelKind::resnet_lstm) config_.airres.one_by_one = false;
    std::mt19937_64 rng(config_.seed);
    build(rng);
  }

  const ModelConfig& config() const { return config_; }
  ModelKind kind() const { return config_.kind; }
  bool learned() const { return config_.kind != ModelKind::persistence; }
  bool convolutional() const { return config_.kind == ModelKind::deepair || config_.kind == ModelKind::resnet_lstm; }
  std::size_t window() const { return config_.head.window; }
  std::size_t patch() const { return config_.airres.patch; }

  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }

  /// Width of one encoded step.
  std::size_t feature_size() const {
    if (convolutional()) return 2 * config_.airres.channels;
    return config_.dynamic_channels + 2;
  }

  /// Encodes N patches [N, C_dyn, P, P] with their calendars into [N, F].
  /// Train mode normalizes over the whole batch; eval mode treats rows independently.
  nn::Tensor<T> encode(nn::Tape<T>& tape, const nn::Tensor<T>& patches, std::span<const LocalCalendar> calendar,
                       nn::Mode mode) {
    check_patches(patches, calendar.size());
    const std::size_t n = patches.dim(0);
    std::vector<nn::Tensor<T>> aux;
    aux.reserve(n);
    for (std::size_t i = 0; i < n; ++i) aux.push_back(auxiliary(tape, calendar[i]));

    if (!convolutional()) {
      // Center-cell channel column of each patch, followed by the auxiliary scalars.
      const std::size_t c = config_.dynamic_channels, pp = patch() * patch(), center = pp / 2;
      std::vector<nn::Tensor<T>> rows;
      rows.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<T> col(c);
        for (std::size_t ch = 0; ch < c; ++ch) col[ch] = patches.ptr()[(i * c + ch) * pp + center];
        rows.push_back(nn::concat(tape, {nn::Tensor<T>::from({c}, std::move(col)), aux[i]}));
      }
      return nn::stack(tape, rows);
    }

    auto x = nn::append_constant_planes(tape, patches, nn::stack(tape, aux));
    x = nn::conv2d(tape, x, stem_.weight, stem_.bias);
    for (std::size_t u = 0; u < units_.size(); ++u) {
      x = residual_unit(tape, x, units_[u], mode);
      if (config_.airres.one_by_one) x = nn::conv2d(tape, x, mixers_[u].weight, mixers_[u].bias);
    }
    return nn::center_and_mean(tape, x);
  }

  /// Runs the stacked LSTM over rows of `features` and maps the last hidden state to 5 outputs.
  /// A residual head adds `anchor`, the last step's center values (see persistence()).
  nn::Tensor<T> head(nn::Tape<T>& tape, const nn::Tensor<T>& features, std::span<const T> anchor = {}) {
    if (features.rank() != 2 || features.dim(1) != feature_size())
      throw ShapeError("head expects features [W," + std::to_string(feature_size()) + "], got " +
                       nn::shape_string(features.shape()));
    if (config_.head.residual && anchor.size() != config_.head.outputs)
      throw ShapeError("residual head needs a " + std::to_string(config_.head.outputs) + "-value anchor");
    const std::size_t hd = config_.head.hidden;
    std::vector<nn::Tensor<T>> h, c;
    for (std::size_t l = 0; l < lstm_.size(); ++l) {
      h.emplace_back(nn::Shape{hd});
      c.emplace_back(nn::Shape{hd});
    }
    for (std::size_t s = 0; s < features.dim(0); ++s) {
      auto input = nn::select_row(tape, features, s);
      for (std::size_t l = 0; l < lstm_.size(); ++l) {
        std::tie(h[l], c[l]) = nn::lstm_cell(tape, input, h[l], c[l], lstm_[l]);
        input = h[l];
      }
    }
    auto y = nn::linear(tape, h.back(), out_.weight, out_.bias);
    if (!config_.head.residual) return y;
    return nn::add(tape, y, nn::Tensor<T>::from({config_.head.outputs}, std::vector<T>(anchor.begin(), anchor.end())));
  }

  /// Full forecast for one window (standardized scale).
  nn::Tensor<T> forward(nn::Tape<T>& tape, const Window<T>& w, nn::Mode mode) {
    check_hours(w);
    if (!learned()) return persistence(w);
    if (w.patches.dim(0) != window())
      throw ShapeError("window has " + std::to_string(w.patches.dim(0)) + " steps, model expects " +
                       std::to_string(window()));
    const auto anchor = persistence(w);
    return head(tape, encode(tape, w.patches, w.calendar, mode), anchor.data());
  }

  /// Last step's center-cell air-quality values.
  nn::Tensor<T> persistence(const Window<T>& w) const {
    check_patches(w.patches, w.calendar.size());
    const std::size_t c = config_.dynamic_channels, pp = patch() * patch(), last = w.patches.dim(0) - 1;
    std::vector<T> v(config_.head.outputs);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = w.patches.ptr()[(last * c + k) * pp + pp / 2];
    return nn::Tensor<T>::from({config_.head.outputs}, std::move(v));
  }

  /// Float copy of the parameters, the unit of checkpointing.
  nn::ParameterSet<float> snapshot() const {
    nn::ParameterSet<float> out;
    for (const auto& [name, t] : params_.params()) out.add(name, t.shape());
    for (const auto& [name, t] : params_.buffers()) out.add_buffer(name, t.shape());
    out.assign_from(params_);
    return out;
  }

  template <class U>
  void load(const nn::ParameterSet<U>& values) {
    for (const auto& [name, _] : values.params())
      if (!params_.contains(name)) throw Error("deepair-model", "checkpoint parameter '" + name + "' unknown to model");
    params_.assign_from(values);
  }

  nlohmann::json checkpoint_meta() const {
    return {{"model", config_.to_json()}, {"init", init_description()}, {"seed", config_.seed}};
  }

 private:
  void check_patches(const nn::Tensor<T>& p, std::size_t calendars) const {
    if (p.rank() != 4 || p.dim(1) != config_.dynamic_channels || p.dim(2) != patch() || p.dim(3) != patch())
      throw ShapeError("patches must be [N," + std::to_string(config_.dynamic_channels) + "," + std::to_string(patch()) +
                       "," + std::to_string(patch()) + "], got " + nn::shape_string(p.shape()));
    if (p.dim(0) != calendars) throw ShapeError("one calendar entry is required per patch");
    if (p.dim(0) == 0) throw ShapeError("empty window");
  }

  static void check_hours(const Window<T>& w) {
    if (w.hours.empty()) return;
    if (w.hours.size() != w.patches.dim(0)) throw ShapeError("one hour index is required per patch");
    for (std::size_t s = 1; s < w.hours.size(); ++s)
      if (w.hours[s] != w.hours[s - 1] + 1)
        throw Error("deepair-model", "window hours are not consecutive at step " + std::to_string(s) + " (" +
                                         std::to_string(w.hours[s - 1]) + " then " + std::to_string(w.hours[s]) + ")");
  }

  nn::Tensor<T> auxiliary(nn::Tape<T>& tape, LocalCalendar cal) {
    return nn::concat(tape, {nn::embedding(tape, dow_table_, static_cast<std::size_t>(cal.day_of_week)),
                             nn::embedding(tape, hod_table_, static_cast<std::size_t>(cal.hour_of_day))});
  }

  ConvLayer<T> conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool bias,
                    std::mt19937_64& rng) {
    ConvLayer<T> l{params_.add(name + ".weight", {out, in, k, k}), {}};
    nn::kaiming_uniform(l.weight, in * k * k, rng);
    if (bias) l.bias = params_.add(name + ".bias", {out});
    return l;
  }

  NormLayer<T> norm(const std::string& name, std::size_t c) {
    return {params_.add(name + ".scale", {c}, T(1)), params_.add(name + ".shift", {c}, T(0)),
            {params_.add_buffer(name + ".running_mean", {c}, T(0)), params_.add_buffer(name + ".running_var", {c}, T(1))}};
  }

  void build(std::mt19937_64& rng) {
    if (!learned()) return;
    const auto& a = config_.airres;
    // d = 1 per calendar feature: exactly one auxiliary plane each.
    dow_table_ = params_.add("aux.day_of_week", {7, 1});
    hod_table_ = params_.add("aux.hour_of_day", {24, 1});
    nn::uniform_init(dow_table_, 0.05, rng);
    nn::uniform_init(hod_table_, 0.05, rng);

    if (convolutional()) {
      stem_ = conv("stem", a.channels, config_.dynamic_channels + 2, 3, true, rng);
      for (std::size_t u = 0; u < a.units; ++u) {
        const std::string p = "unit" + std::to_string(u);
        ResidualUnitParams<T> r;
        r.conv1 = conv(p + ".conv1", a.channels, a.channels, 3, false, rng);
        r.norm1 = norm(p + ".bn1", a.channels);
        r.conv2 = conv(p + ".conv2", a.channels, a.channels, 3, false, rng);
        r.norm2 = norm(p + ".bn2", a.channels);
        units_.push_back(std::move(r));
        if (a.one_by_one) mixers_.push_back(conv("mix" + std::to_string(u), a.channels, a.channels, 1, true, rng));
      }
    }

    const std::size_t hd = config_.head.hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(hd));
    std::size_t in = feature_size();
    for (std::size_t l = 0; l < config_.head.layers; ++l) {
      const std::string p = "lstm" + std::to_string(l);
      nn::LstmWeights<T> w{params_.add(p + ".w_ih", {4 * hd, in}), params_.add(p + ".w_hh", {4 * hd, hd}),
                           params_.add(p + ".bias", {4 * hd})};
      nn::uniform_init(w.w_ih, bound, rng);
      nn::uniform_init(w.w_hh, bound, rng);
      nn::uniform_init(w.bias, bound, rng);
      for (std::size_t j = hd; j < 2 * hd; ++j) w.bias.data()[j] += T(1);
      lstm_.push_back(w);
      in = hd;
    }
    out_.weight = params_.add("out.weight", {config_.head.outputs, hd});
    out_.bias = params_.add("out.bias", {config_.head.outputs});
    nn::kaiming_uniform(out_.weight, hd, rng);
  }

  ModelConfig config_;
  nn::ParameterSet<T> params_;
  nn::Tensor<T> dow_table_, hod_table_;
  ConvLayer<T> stem_;
  std::vector<ResidualUnitParams<T>> units_;
  std::vector<ConvLayer<T>> mixers_;
  std::vector<nn::LstmWeights<T>> lstm_;
  struct {
    nn::Tensor<T> weight, bias;
  } out_;
};

/// Baseline constructor by kind; `base` supplies widths and seed.
template <class T = float>
Model<T> make_baseline(ModelKind kind, ModelConfig base) {
  if (kind == ModelKind::deepair) throw Error("deepair-model", "deepair is not a baseline kind");
  base.kind = kind;
  return Model<T>(std::move(base));
}

}  // namespace deepair
