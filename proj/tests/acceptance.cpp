// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
// `acceptance 2 5 9` runs a subset.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "deepair/evaluator.hpp"
#include "deepair/gridstore.hpp"
#include "deepair/interp.hpp"
#include "deepair/model.hpp"
#include "deepair/pipeline.hpp"
#include "deepair/synthcity.hpp"
#include "deepair/tensor.hpp"
#include "deepair/trainer.hpp"
#include "support.hpp"

using namespace deepair;
using namespace deepair::nn;
namespace fs = std::filesystem;
using testing_support::check_gradients;
using testing_support::random_tensor;
using testing_support::random_weights;
using testing_support::seconds_since;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome verdict(bool pass, std::string detail) { return {pass, std::move(detail)}; }

Tensor<double> scaled_sum(Tape<double>& tape, const Tensor<double>& x, const std::vector<double>& w) {
  return weighted_sum<double>(tape, x, w);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = "'" DEEPAIR_CLI_PATH "' " + args + " -q >/dev/null";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  std::vector<std::pair<std::string, double>> errors;
  auto record = [&](const std::string& op, const testing_support::GradCheckResult& r) {
    errors.emplace_back(op, r.max_rel_error);
  };

  {
    auto x = random_tensor<double>({2, 3, 5, 5}, rng);
    auto k = random_tensor<double>({4, 3, 3, 3}, rng, 0.5);
    auto b = random_tensor<double>({4}, rng);
    const auto w = random_weights(2 * 4 * 25, rng);
    record("conv2d", check_gradients({{"x", x}, {"kernel", k}, {"bias", b}},
                                     [&](Tape<double>& t) { return scaled_sum(t, conv2d(t, x, k, b), w); }));
  }
  {
    auto x = random_tensor<double>({3, 2, 4, 4}, rng);
    auto scale = random_tensor<double>({2}, rng);
    auto shift = random_tensor<double>({2}, rng);
    const auto w = random_weights(x.size(), rng);
    record("batchnorm(train)", check_gradients({{"x", x}, {"scale", scale}, {"shift", shift}}, [&](Tape<double>& t) {
             BatchNormState<double> st{Tensor<double>({2}, 0.0), Tensor<double>({2}, 1.0)};
             return scaled_sum(t, batchnorm(t, x, scale, shift, st, Mode::train), w);
           }));
    BatchNormState<double> st{Tensor<double>::from({2}, {0.3, -0.2}), Tensor<double>::from({2}, {1.7, 0.6})};
    record("batchnorm(eval)", check_gradients({{"x", x}, {"scale", scale}, {"shift", shift}}, [&](Tape<double>& t) {
             return scaled_sum(t, batchnorm(t, x, scale, shift, st, Mode::eval), w);
           }));
  }
  {
    auto x = random_tensor<double>({40}, rng);
    for (auto& v : x.data()) v += v >= 0 ? 0.1 : -0.1;
    const auto w = random_weights(40, rng);
    record("relu", check_gradients({{"x", x}}, [&](Tape<double>& t) { return scaled_sum(t, relu(t, x), w); }));
  }
  {
    auto table = random_tensor<double>({7, 3}, rng);
    const auto w = random_weights(3, rng);
    record("embedding", check_gradients({{"table", table}},
                                        [&](Tape<double>& t) { return scaled_sum(t, embedding(t, table, 4), w); }));
  }
  {
    auto x = random_tensor<double>({6}, rng);
    auto w = random_tensor<double>({4, 6}, rng);
    auto b = random_tensor<double>({4}, rng);
    const auto ws = random_weights(4, rng);
    record("linear", check_gradients({{"x", x}, {"w", w}, {"b", b}},
                                     [&](Tape<double>& t) { return scaled_sum(t, linear(t, x, w, b), ws); }));
  }
  {
    auto x = random_tensor<double>({3}, rng);
    auto h0 = random_tensor<double>({4}, rng);
    auto c0 = random_tensor<double>({4}, rng);
    LstmWeights<double> p{random_tensor<double>({16, 3}, rng, 0.5), random_tensor<double>({16, 4}, rng, 0.5),
                          random_tensor<double>({16}, rng, 0.5)};
    const auto wh = random_weights(4, rng), wc = random_weights(4, rng);
    record("lstm_cell", check_gradients({{"x", x}, {"h", h0}, {"c", c0}, {"w_ih", p.w_ih}, {"w_hh", p.w_hh}, {"bias", p.bias}},
                                        [&](Tape<double>& t) {
                                          auto [h, c] = lstm_cell(t, x, h0, c0, p);
                                          return add(t, scaled_sum(t, h, wh), scaled_sum(t, c, wc));
                                        }));
  }
  {
    auto pred = random_tensor<double>({5}, rng);
    const std::vector<double> target{0.1, -0.3, 0.7, 0.0, 1.2};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
    record("mse_loss", check_gradients({{"pred", pred}}, [&](Tape<double>& t) {
             return mse_loss<double>(t, pred, target, mask);
           }));
  }
  {
    auto x = random_tensor<double>({2, 3, 5, 5}, rng);
    const auto w = random_weights(12, rng);
    record("center_and_mean",
           check_gradients({{"x", x}}, [&](Tape<double>& t) { return scaled_sum(t, center_and_mean(t, x), w); }));
  }
  {
    auto x = random_tensor<double>({2, 2, 3, 3}, rng);
    auto v = random_tensor<double>({2, 2}, rng);
    auto a = random_tensor<double>({3}, rng);
    auto b = random_tensor<double>({2}, rng);
    const auto w1 = random_weights(72, rng), w2 = random_weights(10, rng);
    record("append_planes/stack/concat/select_row/add",
           check_gradients({{"x", x}, {"v", v}, {"a", a}, {"b", b}}, [&](Tape<double>& t) {
             auto planes = scaled_sum(t, append_constant_planes(t, x, v), w1);
             auto joined = concat<double>(t, {a, b, select_row(t, stack<double>(t, {a, a}), 1), b});
             return add(t, planes, scaled_sum(t, joined, w2));
           }));
  }
  double ops_worst = 0;
  std::string ops_worst_name;
  for (const auto& [op, e] : errors)
    if (e >= ops_worst) {
      ops_worst = e;
      ops_worst_name = op;
    }

  // End to end, toy config: patch 15, 8 channels, hidden 16, W = 4. A 1e-6 step
  // keeps every ReLU of the network on one side of its kink.
  double e2e_worst = 0;
  for (bool residual : {false, true}) {
    ModelConfig cfg;
    cfg.airres = {4, 8, 15, true};
    cfg.head = {2, 16, 4, 5, residual};
    cfg.seed = 21;
    Model<double> m(cfg);
    std::mt19937_64 wr(16);
    Window<double> win{random_tensor<double>({4, 14, 15, 15}, wr, 1.0, false), {}, {}};
    for (std::size_t s = 0; s < 4; ++s) {
      win.calendar.push_back({static_cast<int>(s % 7), static_cast<int>((5 + s) % 24)});
      win.hours.push_back(100 + s);
    }
    const std::vector<double> target{0.3, -0.2, 0.1, 0.5, -0.4};
    const auto r = check_gradients(
        m.params().params(),
        [&](Tape<double>& t) {
          for (auto [name, b] : m.params().buffers())
            std::fill(b.data().begin(), b.data().end(), name.ends_with("running_var") ? 1.0 : 0.0);
          return mse_loss<double>(t, m.forward(t, win, Mode::train), target);
        },
        1e-6, 20, 1e-6, 17);
    e2e_worst = std::max(e2e_worst, r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  return verdict(ops_worst < 1e-4 && e2e_worst < 1e-3 && secs < 120,
                 fmt::format("{} ops worst {:.2e} ({}), end-to-end worst {:.2e}, {:.1f}s", errors.size(), ops_worst,
                             ops_worst_name, e2e_worst, secs));
}

// ---------------------------------------------------------------------------
// 2. Kriging exactness and oracle equivalence

std::vector<long double> dense_solve(std::vector<std::vector<long double>> a, std::vector<long double> b) {
  const std::size_t n = b.size();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::fabs(a[i][k]) > std::fabs(a[p][k])) p = i;
    std::swap(a[k], a[p]);
    std::swap(b[k], b[p]);
    for (std::size_t i = k + 1; i < n; ++i) {
      const long double f = a[i][k] / a[k][k];
      for (std::size_t j = k; j < n; ++j) a[i][j] -= f * a[k][j];
      b[i] -= f * b[k];
    }
  }
  std::vector<long double> x(n);
  for (std::size_t k = n; k-- > 0;) {
    long double s = b[k];
    for (std::size_t j = k + 1; j < n; ++j) s -= a[k][j] * x[j];
    x[k] = s / a[k][k];
  }
  return x;
}

double oracle_krige(const std::vector<SpatialSample>& obs, Point2 target, const Variogram& v) {
  auto gamma = [&](Point2 p, Point2 q) -> long double {
    const long double h = std::hypot((long double)p.x - q.x, (long double)p.y - q.y);
    if (h <= 0) return 0;
    return v.nugget + ((long double)v.sill - v.nugget) * (1 - std::exp(-3 * h / v.range_km));
  };
  const std::size_t n = obs.size();
  std::vector<std::vector<long double>> a(n + 1, std::vector<long double>(n + 1, 1.0L));
  std::vector<long double> b(n + 1, 1.0L);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a[i][j] = gamma(obs[i].at, obs[j].at);
    b[i] = gamma(obs[i].at, target);
  }
  a[n][n] = 0;
  const auto w = dense_solve(a, b);
  long double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += w[i] * obs[i].value;
  return static_cast<double>(s);
}

Outcome kriging() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> loc(0, 40), val(5, 150);
  double exact_worst = 0, oracle_worst = 0;
  for (std::size_t n : {3u, 5u}) {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<SpatialSample> obs(n);
      for (auto& o : obs) o = {{loc(rng), loc(rng)}, val(rng)};
      const Variogram v{0.0, 1.0 + trial, 5.0 + 3 * trial};
      std::vector<Point2> at;
      for (const auto& o : obs) at.push_back(o.at);
      const auto self = krige(obs, at, v);
      for (std::size_t i = 0; i < n; ++i) exact_worst = std::max(exact_worst, std::fabs(self[i] - obs[i].value));
      std::vector<Point2> targets(6);
      for (auto& t : targets) t = {loc(rng), loc(rng)};
      const auto pred = krige(obs, targets, v);
      for (std::size_t i = 0; i < targets.size(); ++i)
        oracle_worst = std::max(oracle_worst, std::fabs(pred[i] - oracle_krige(obs, targets[i], v)));
    }
  }
  return verdict(exact_worst < 1e-8 && oracle_worst < 1e-8,
                 fmt::format("max |pred - obs| at stations {:.1e}, max |pred - oracle| {:.1e}", exact_worst, oracle_worst));
}

// ---------------------------------------------------------------------------
// 3. Gating reproduction

Outcome gating() {
  const std::vector<std::pair<std::string, double>> table{
      {"PM2.5", 0.84},          {"PM10", 0.76},          {"NO2", 0.67},           {"CO", 0.70},
      {"O3", 0.88},             {"pressure", 0.99},      {"temperature", 0.98},   {"wind_direction", 0.91},
      {"traffic_status", 0.31}, {"traffic_speed", 0.43}, {"traffic_count", 0.24}, {"precipitation", 0.25},
      {"wind_speed", 0.56},     {"humidity", 0.19}};
  CorrelationReport rep;
  for (const auto& [name, r] : table) rep.channels.push_back({name, r, 10, 5});
  const auto policy = build_fill_policy(rep, ChannelSchema::canonical(), 0.6);
  std::set<std::string> krige_set, zero_set;
  for (std::size_t i = 0; i < policy.channels.size(); ++i)
    (policy.modes[i] == FillMode::krige ? krige_set : zero_set).insert(policy.channels[i]);
  const std::set<std::string> want_krige{"PM2.5", "PM10", "NO2", "CO", "O3", "pressure", "temperature", "wind_direction"};
  const std::set<std::string> want_zero{"traffic_status", "traffic_speed", "traffic_count", "precipitation", "wind_speed",
                                        "humidity"};
  return verdict(krige_set == want_krige && zero_set == want_zero,
                 fmt::format("krige {} channels, zero_fill {} channels", krige_set.size(), zero_set.size()));
}

// ---------------------------------------------------------------------------
// 4. Model ordering on the default synthetic city

struct OrderingSetup {
  std::size_t window = 12;
  std::size_t channels = 8;
  std::size_t units = 4;
  std::size_t hidden = 32;
  std::size_t layers = 2;
  bool residual = true;
  double lr = 0.01;
  std::size_t batch = 1;
  std::size_t max_epochs = 10;
  std::size_t patience = 5;
};

Outcome ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const OrderingSetup setup;
  const std::vector<ModelKind> kinds{ModelKind::persistence, ModelKind::lstm_only, ModelKind::resnet_lstm,
                                     ModelKind::deepair};
  std::map<ModelKind, std::vector<double>> scores;
  for (std::uint64_t seed : {1, 2, 3}) {
    SynthConfig sc;  // default 20x20, 2160 h, 25 stations
    sc.seed = seed;
    const auto sim = simulate(sc);
    PreprocessConfig pc;
    pc.window = setup.window;
    const auto data = prepare(sim.observed, pc);
    PatchSource source(data, 15);
    source.precompute(data.stations, {0, data.inputs.hours()}, default_thread_count());
    for (auto kind : kinds) {
      ModelConfig mc;
      mc.kind = kind;
      mc.airres = {setup.units, setup.channels, 15, true};
      mc.head = {setup.layers, setup.hidden, setup.window, 5, setup.residual};
      mc.seed = seed;
      Model<float> model(mc);
      Trainer trainer(model, source, {setup.lr, setup.patience, setup.max_epochs, seed, setup.batch});
      if (model.learned()) trainer.fit();
      const double score = *mape(trainer.predict(data.split.test)).value;
      scores[kind].push_back(score);
      std::cout << fmt::format("    seed {} {:<12} test MAPE {:6.3f}  ({:.0f}s elapsed)\n", seed, to_string(kind),
                               score, seconds_since(t0))
                << std::flush;
    }
  }
  auto median = [&](ModelKind k) {
    auto v = scores[k];
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double deep = median(ModelKind::deepair), lstm = median(ModelKind::lstm_only),
               resnet = median(ModelKind::resnet_lstm), persist = median(ModelKind::persistence);
  const double minutes = seconds_since(t0) / 60;
  return verdict(deep < lstm && deep < persist && deep <= resnet + 1.0 && minutes < 45,
                 fmt::format("median test MAPE deepair {:.3f}, resnet_lstm {:.3f}, lstm_only {:.3f}, persistence "
                             "{:.3f}; {:.1f} min",
                             deep, resnet, lstm, persist, minutes));
}

// ---------------------------------------------------------------------------
// 5. Early stopping

Outcome early_stopping() {
  const std::vector<double> scripted{10, 9, 9.5, 9.6, 9.7, 9.8, 9.9};
  ParameterSet<float> live;
  auto w = live.add("w", {1});
  std::map<std::size_t, ParameterSet<float>> checkpoints;
  std::size_t trained = 0;
  const auto result = run_early_stopping(
      100, 5,
      [&](std::size_t epoch) {
        ++trained;
        w.data()[0] = static_cast<float>(epoch);  // parameters identify their epoch
        return 1.0;
      },
      [&](std::size_t epoch) -> std::optional<double> {
        return epoch <= scripted.size() ? std::optional(scripted[epoch - 1]) : std::optional(0.0);
      },
      [&](std::size_t epoch) { checkpoints.emplace(epoch, live.clone()); });
  const auto& restored = checkpoints.at(result.best_epoch);
  const float restored_w = restored.params().front().second.data()[0];
  return verdict(trained == 7 && result.log.size() == 7 && result.best_epoch == 2 && restored_w == 2.0f,
                 fmt::format("halted after {} epochs, best epoch {}, restored parameters of epoch {}", trained,
                             result.best_epoch, restored_w));
}

// ---------------------------------------------------------------------------
// 6. Leave-one-out integrity

Outcome leave_one_out() {
  SynthConfig sc;
  sc.rows = 18;
  sc.cols = 18;
  sc.hours = 200;
  sc.stations = 12;
  sc.seed = 6;
  const auto sim = simulate(sc);
  PreprocessConfig pc;
  pc.window = 6;
  const auto clean = prepare(sim.observed, pc);
  std::size_t compared = 0, differing = 0;
  for (auto kind : {ModelKind::deepair, ModelKind::resnet_lstm, ModelKind::lstm_only, ModelKind::persistence}) {
    ModelConfig mc;
    mc.kind = kind;
    mc.airres = {2, 6, 15, true};
    mc.head = {1, 12, pc.window, 5, kind == ModelKind::deepair};
    mc.seed = 4;
    Model<float> model(mc);
    for (std::size_t s = 0; s < clean.stations.size(); s += 3) {
      const auto target = clean.stations[s];
      const std::size_t t = 150 + s;
      auto poisoned = clean;
      for (std::size_t h = t - pc.window; h < t; ++h)
        for (auto c : poisoned.inputs.schema().dynamic_indices()) {
          poisoned.inputs.set(h, c, target.row, target.col, 1e30f);
          poisoned.observed.set(h, c, target.row, target.col, 1e30f);
        }
      PatchSource a(clean, 15), b(poisoned, 15);
      Forecaster fa(model, a), fb(model, b);
      const auto ya = fa.forecast_standardized(target, t), yb = fb.forecast_standardized(target, t);
      ++compared;
      if (std::memcmp(ya.data(), yb.data(), ya.size() * sizeof(float)) != 0) ++differing;
    }
  }
  return verdict(differing == 0 && compared > 0,
                 fmt::format("{} poisoned forecasts, {} differ in any bit", compared, differing));
}

// ---------------------------------------------------------------------------
// 7. Determinism

Outcome determinism() {
  const auto dir = testing_support::temp_dir("acceptance_det");
  const std::string cfg =
      "--seed 9 --deterministic --set synth.rows=16 --set synth.cols=16 --set synth.hours=300 --set synth.stations=10 "
      "--set model.window=6 --set model.channels=6 --set model.units=2 --set model.hidden=12 --set train.max_epochs=3 "
      "--set train.patience=3 ";
  if (run_cli("synth " + cfg + "--out " + (dir / "data").string()) != 0) return verdict(false, "synth failed");
  for (const char* r : {"a", "b"})
    if (run_cli("train " + cfg + "--data " + (dir / "data").string() + " --out " + (dir / r).string()) != 0)
      return verdict(false, "train failed");
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    const auto name = e.path().filename().string();
    if (!(name.ends_with(".bin") || name == "train_log.csv")) continue;
    ++files;
    if (slurp(e.path()) != slurp(dir / "b" / name)) ++differ;
  }
  return verdict(files >= 3 && differ == 0,
                 fmt::format("{} checkpoint/log files compared across two runs, {} differ", files, differ));
}

// ---------------------------------------------------------------------------
// 8. Metric fidelity

Outcome metrics() {
  static const std::vector<std::string> names{"PM2.5", "PM10", "NO2", "CO", "O3"};
  std::mt19937_64 rng(808);
  std::uniform_real_distribution<double> u(0.0, 400.0), noise(-0.6, 0.6);
  std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
  std::vector<PredictionRecord> records;
  for (std::size_t i = 0; i < 1000; ++i) {
    const double y = u(rng);
    records.push_back({"s" + std::to_string(i % 9), UtcHour{static_cast<std::int64_t>(i)}, names[pick(rng)], y,
                       std::max(0.0, y * (1 + noise(rng)))});
  }
  // Independent oracles: compensated MAPE, two-pass R^2, linear-scan AQI levels.
  long double sum = 0, comp = 0;
  std::size_t used = 0;
  for (const auto& r : records) {
    if (r.y_true < kDefaultMapeFloor) continue;
    const long double term = std::fabs((long double)r.y_true - r.y_pred) / r.y_true - comp;
    const long double next = sum + term;
    comp = (next - sum) - term;
    sum = next;
    ++used;
  }
  const double mape_oracle = static_cast<double>(100 * sum / used);
  long double mean = 0;
  for (const auto& r : records) mean += r.y_true;
  mean /= records.size();
  long double res = 0, tot = 0;
  for (const auto& r : records) {
    res += ((long double)r.y_true - r.y_pred) * ((long double)r.y_true - r.y_pred);
    tot += ((long double)r.y_true - mean) * ((long double)r.y_true - mean);
  }
  const double r2_oracle = static_cast<double>(1 - res / tot);
  const auto breakpoints =
      nlohmann::json::parse(std::ifstream(std::string(DEEPAIR_DATA_DIR) + "/aqi_breakpoints.json")).at("pollutants");
  auto level = [&](const std::string& p, double v) {
    int l = 1;
    for (double b : breakpoints.at(p).at("upper_bounds").get<std::vector<double>>())
      if (v >= b) ++l;
    return l;
  };
  std::size_t hits = 0;
  for (const auto& r : records) hits += level(r.pollutant, r.y_true) == level(r.pollutant, r.y_pred);
  const double level_oracle = 100.0 * static_cast<double>(hits) / static_cast<double>(records.size());

  const double e_mape = std::fabs(*mape(records).value - mape_oracle);
  const double e_r2 = std::fabs(*r_squared(records) - r2_oracle);
  const double e_level = std::fabs(*level_accuracy(records, AqiLevelTable::shipped()) - level_oracle);

  auto perfect = records;
  for (auto& r : perfect) r.y_pred = r.y_true;
  const auto scatter = testing_support::temp_dir("acceptance_scatter") / "scatter.csv";
  write_scatter_csv(scatter, perfect);
  const auto back = read_scatter_csv(scatter);
  const auto r2_perfect = r_squared(back);
  const bool pass = e_mape < 1e-9 && e_r2 < 1e-9 && e_level < 1e-9 && !back.empty() && r2_perfect && *r2_perfect == 1.0;
  return verdict(pass, fmt::format("|d mape| {:.1e}, |d r2| {:.1e}, |d level| {:.1e}; perfect scatter ({} rows) R2 = {}",
                                   e_mape, e_r2, e_level, back.size(), r2_perfect ? fmt::format("{}", *r2_perfect) : "undefined"));
}

// ---------------------------------------------------------------------------
// 9. Conservation

Outcome conservation() {
  std::mt19937_64 rng(909);
  std::uniform_real_distribution<double> u(1.0, 100.0);
  std::vector<double> c(20 * 20);
  for (auto& v : c) v = u(rng);
  double worst = 0;
  for (int block = 0; block < 10; ++block) {
    long double before = 0, after = 0;
    for (double v : c) before += v;
    for (int s = 0; s < 100; ++s) advect_diffuse_step(c, 20, 20, 0.05, 0.0, 0.0);
    for (double v : c) after += v;
    worst = std::max(worst, static_cast<double>(std::fabs(after - before) / before));
  }
  return verdict(worst < 1e-6, fmt::format("worst relative mass change per 100 steps {:.1e}", worst));
}

// ---------------------------------------------------------------------------
// 10. Citywide coverage

Outcome coverage() {
  const auto dir = testing_support::temp_dir("acceptance_forecast");
  const std::string cfg =
      "--seed 1 --set model.window=12 --set model.channels=8 --set model.hidden=32 --set train.max_epochs=1 ";
  if (run_cli("synth " + cfg + "--out " + (dir / "data").string()) != 0) return verdict(false, "synth failed");
  if (run_cli("train " + cfg + "--data " + (dir / "data").string() + " --out " + (dir / "train").string()) != 0)
    return verdict(false, "train failed");
  if (run_cli("forecast --model " + (dir / "train" / "best.bin").string() + " --data " + (dir / "data").string() +
              " --out " + (dir / "forecast").string()) != 0)
    return verdict(false, "forecast failed");
  const auto map = load_dataset(dir / "forecast" / "forecast");
  const auto data = load_dataset(dir / "data");
  const auto stations = station_cells(data);
  std::size_t good = 0, good_unobserved = 0;
  for (std::size_t r = 0; r < map.rows(); ++r)
    for (std::size_t c = 0; c < map.cols(); ++c) {
      bool ok = true;
      for (std::size_t k = 0; k < map.channels(); ++k) {
        const auto v = map.get(0, k, {r, c});
        ok = ok && v && std::isfinite(*v) && *v >= 0;
      }
      good += ok;
      const bool station = std::find(stations.begin(), stations.end(), CellIndex{r, c}) != stations.end();
      good_unobserved += ok && !station;
    }
  const std::size_t cells = map.rows() * map.cols();
  return verdict(map.rows() == 20 && map.cols() == 20 && good == cells && good_unobserved == cells - stations.size(),
                 fmt::format("{}/{} cells finite and nonnegative, {} of them without a station", good, cells,
                             good_unobserved));
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"kriging exactness and oracle equivalence", kriging},
      {"correlation gating", gating},
      {"model ordering on the default synthetic city", ordering},
      {"early stopping", early_stopping},
      {"leave-one-out integrity", leave_one_out},
      {"determinism", determinism},
      {"metric fidelity", metrics},
      {"conservation", conservation},
      {"citywide coverage", coverage},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << fmt::format("criterion {:>2}: {} {} -- {} [{:.1f}s]\n", i + 1, o.pass ? "PASS" : "FAIL",
                             criteria[i].first, o.detail, seconds_since(t0))
              << std::flush;
  }
  return failures == 0 ? 0 : 1;
}
