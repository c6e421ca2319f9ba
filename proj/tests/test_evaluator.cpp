#include <gtest/gtest.h>

#include <random>

#include "deepair/evaluator.hpp"
#include "deepair/synthcity.hpp"
#include "support.hpp"

using namespace deepair;

namespace {

PredictionRecord rec(const std::string& pollutant, double y, double p) { return {"s", UtcHour{0}, pollutant, y, p}; }

std::vector<PredictionRecord> random_records(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> names{"PM2.5", "PM10", "NO2", "CO", "O3"};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 300.0), noise(-0.5, 0.5);
  std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = u(rng);
    out.push_back({"r" + std::to_string(i % 7), UtcHour{static_cast<std::int64_t>(400000 + i)}, names[pick(rng)], y,
                   std::max(0.0, y * (1 + noise(rng)))});
  }
  return out;
}

/// Kahan-summed Eq. 3 in long double.
std::optional<long double> oracle_mape(const std::vector<PredictionRecord>& r, double floor = 1.0) {
  long double sum = 0, comp = 0;
  std::size_t n = 0;
  for (const auto& x : r) {
    if (x.y_true < floor) continue;
    const long double term = std::fabs((long double)x.y_true - x.y_pred) / x.y_true - comp;
    const long double next = sum + term;
    comp = (next - sum) - term;
    sum = next;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return 100 * sum / n;
}

/// Two-pass R^2.
long double oracle_r2(const std::vector<PredictionRecord>& r) {
  long double mean = 0;
  for (const auto& x : r) mean += x.y_true;
  mean /= r.size();
  long double res = 0, tot = 0;
  for (const auto& x : r) {
    res += ((long double)x.y_true - x.y_pred) * ((long double)x.y_true - x.y_pred);
    tot += ((long double)x.y_true - mean) * ((long double)x.y_true - mean);
  }
  return 1 - res / tot;
}

AqiLevelTable pm_table() {
  AqiLevelTable t;
  t.add("PM2.5", {35, 75, 115, 150, 250});
  return t;
}

}  // namespace

TEST(Mape, Examples) {
  const std::vector<PredictionRecord> exact{rec("CO", 3, 3), rec("CO", 9, 9)};
  EXPECT_EQ(*mape(exact).value, 0.0);
  const std::vector<PredictionRecord> one{rec("PM2.5", 100, 80)};
  EXPECT_DOUBLE_EQ(*mape(one).value, 20.0);
  const std::vector<PredictionRecord> three{rec("NO2", 100, 110), rec("NO2", 100, 80), rec("NO2", 100, 130)};
  EXPECT_DOUBLE_EQ(*mape(three).value, 20.0);
}

TEST(Mape, FloorExcludesAndCounts) {
  const std::vector<PredictionRecord> r{rec("O3", 0.0, 5), rec("O3", 0.5, 5), rec("O3", 10, 11)};
  const auto m = mape(r);
  EXPECT_EQ(m.used, 1u);
  EXPECT_EQ(m.excluded, 2u);
  EXPECT_DOUBLE_EQ(*m.value, 10.0);
  const std::vector<PredictionRecord> none{rec("O3", 0.2, 1)};
  EXPECT_FALSE(mape(none).value);
  EXPECT_FALSE(mape(std::vector<PredictionRecord>{}).value);
}

TEST(Mape, MatchesOracleOnRandomFixture) {
  const auto r = random_records(1000, 1);
  EXPECT_NEAR(*mape(r).value, static_cast<double>(*oracle_mape(r)), 1e-9);
}

TEST(Mape, ScaleInvariant) {
  auto r = random_records(500, 2);
  const double base = *mape(r, 0.0).value;
  for (auto& x : r) {
    x.y_true *= 7.25;
    x.y_pred *= 7.25;
  }
  EXPECT_NEAR(*mape(r, 0.0).value, base, 1e-10);
}

TEST(RSquared, Examples) {
  const std::vector<PredictionRecord> perfect{rec("CO", 1, 1), rec("CO", 2, 2), rec("CO", 4, 4)};
  EXPECT_EQ(*r_squared(perfect), 1.0);
  const std::vector<PredictionRecord> mean{rec("CO", 1, 3), rec("CO", 2, 3), rec("CO", 6, 3)};
  EXPECT_NEAR(*r_squared(mean), 0.0, 1e-15);
  const auto r = random_records(1000, 3);
  EXPECT_NEAR(*r_squared(r), static_cast<double>(oracle_r2(r)), 1e-9);
}

TEST(RSquared, UndefinedCases) {
  EXPECT_FALSE(r_squared(std::vector<PredictionRecord>{rec("CO", 1, 1)}));
  EXPECT_FALSE(r_squared(std::vector<PredictionRecord>{rec("CO", 2, 1), rec("CO", 2, 3)}));
}

TEST(Levels, RightOpenBoundaries) {
  const auto t = pm_table();
  EXPECT_EQ(t.level("PM2.5", 0), 1);
  EXPECT_EQ(t.level("PM2.5", 34.999), 1);
  EXPECT_EQ(t.level("PM2.5", 35), 2);
  EXPECT_EQ(t.level("PM2.5", 250), 6);
  EXPECT_EQ(t.level("PM2.5", 1e6), 6);
  const std::vector<PredictionRecord> straddle{rec("PM2.5", 34.9, 35.1)};
  EXPECT_EQ(*level_accuracy(straddle, t), 0.0);
  EXPECT_THROW(t.level("SO2", 3), Error);
  EXPECT_THROW(level_accuracy(std::vector<PredictionRecord>{rec("SO2", 1, 1)}, t), Error);
  AqiLevelTable bad;
  EXPECT_THROW(bad.add("x", {3, 2}), Error);
  EXPECT_THROW(bad.add("x", {}), Error);
}

TEST(Levels, CountingAndOracle) {
  const auto t = pm_table();
  std::vector<PredictionRecord> ten;
  for (int i = 0; i < 8; ++i) ten.push_back(rec("PM2.5", 10 + i, 12 + i));
  ten.push_back(rec("PM2.5", 30, 80));
  ten.push_back(rec("PM2.5", 200, 100));
  EXPECT_DOUBLE_EQ(*level_accuracy(ten, t), 80.0);
  EXPECT_EQ(*level_accuracy(std::vector<PredictionRecord>{rec("PM2.5", 5, 5)}, t), 100.0);

  const auto table = AqiLevelTable::shipped();
  const auto r = random_records(1000, 4);
  auto level_oracle = [&](const std::string& p, double v) {
    // Linear scan over the same breakpoints, right-open.
    const auto bounds = nlohmann::json::parse(std::ifstream(std::string(DEEPAIR_DATA_DIR) + "/aqi_breakpoints.json"))
                            .at("pollutants")
                            .at(p)
                            .at("upper_bounds")
                            .get<std::vector<double>>();
    int level = 1;
    for (double b : bounds)
      if (v >= b) ++level;
    return level;
  };
  std::size_t hits = 0;
  for (const auto& x : r) hits += level_oracle(x.pollutant, x.y_true) == level_oracle(x.pollutant, x.y_pred);
  EXPECT_NEAR(*level_accuracy(r, table), 100.0 * hits / r.size(), 1e-9);
}

TEST(Levels, InvariantUnderMonotoneRelabeling) {
  // Shifting every breakpoint and value by the same increasing map keeps bin membership.
  const auto r = random_records(300, 5);
  AqiLevelTable a, b;
  const std::vector<double> bounds{35, 75, 115, 150, 250};
  std::vector<double> mapped;
  for (double x : bounds) mapped.push_back(std::sqrt(x) + 3);
  for (const char* p : {"PM2.5", "PM10", "NO2", "CO", "O3"}) {
    a.add(p, bounds);
    b.add(p, mapped);
  }
  auto m = r;
  for (auto& x : m) {
    x.y_true = std::sqrt(x.y_true) + 3;
    x.y_pred = std::sqrt(x.y_pred) + 3;
  }
  EXPECT_EQ(*level_accuracy(r, a), *level_accuracy(m, b));
}

TEST(Levels, ShippedTableCoversPollutants) {
  const auto t = AqiLevelTable::shipped();
  for (const char* p : {"PM2.5", "PM10", "NO2", "CO", "O3"}) EXPECT_TRUE(t.covers(p)) << p;
  EXPECT_EQ(t.level("PM2.5", 34), 1);
  EXPECT_EQ(t.level("PM2.5", 35), 2);
}

TEST(PerPollutant, GroupByOracle) {
  const auto r = random_records(1000, 6);
  const auto rows = per_pollutant_report(r);
  long double weighted = 0;
  std::size_t total = 0;
  for (const auto& row : rows) {
    std::vector<PredictionRecord> group;
    for (const auto& x : r)
      if (x.pollutant == row.pollutant) group.push_back(x);
    EXPECT_EQ(row.records, group.size());
    EXPECT_NEAR(*row.mape.value, static_cast<double>(*oracle_mape(group)), 1e-9);
    weighted += (long double)*row.mape.value * row.mape.used;
    total += row.mape.used;
  }
  EXPECT_NEAR(*mape(r).value, static_cast<double>(weighted / total), 1e-9);
}

TEST(PerPollutant, SingleAndEqualRows) {
  const std::vector<PredictionRecord> co{rec("CO", 2, 2.2), rec("CO", 4, 4.4)};
  const auto rows = per_pollutant_report(co);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].pollutant, "CO");
  std::vector<PredictionRecord> same;
  for (const char* p : {"PM2.5", "NO2", "O3"}) same.push_back(rec(p, 50, 55));
  for (const auto& row : per_pollutant_report(same)) EXPECT_NEAR(*row.mape.value, *mape(same).value, 1e-12);
  const std::vector<PredictionRecord> low{rec("O3", 0.1, 1)};
  EXPECT_FALSE(per_pollutant_report(low)[0].mape.value);
}

TEST(Files, PredictionsRoundTripExactly) {
  const auto r = random_records(200, 7);
  const auto dir = testing_support::temp_dir("pred");
  write_predictions_csv(dir / "p.csv", r);
  const auto back = read_predictions_csv(dir / "p.csv");
  ASSERT_EQ(back.size(), r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(back[i].station_id, r[i].station_id);
    EXPECT_EQ(back[i].hour, r[i].hour);
    EXPECT_EQ(back[i].pollutant, r[i].pollutant);
    EXPECT_EQ(back[i].y_true, r[i].y_true);
    EXPECT_EQ(back[i].y_pred, r[i].y_pred);
  }
  std::ifstream in(dir / "p.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "station_id,hour,pollutant,y_true,y_pred");
}

TEST(Files, ScatterOfPerfectPredictorHasUnitR2) {
  auto r = random_records(1000, 8);
  for (auto& x : r) x.y_pred = x.y_true;
  const auto dir = testing_support::temp_dir("scatter");
  write_scatter_csv(dir / "s.csv", r);
  const auto back = read_scatter_csv(dir / "s.csv");
  std::size_t pm = 0;
  for (const auto& x : r) pm += x.pollutant == "PM2.5";
  EXPECT_EQ(back.size(), pm);
  EXPECT_EQ(*r_squared(back), 1.0);
}

TEST(Files, ReportJsonFields) {
  const auto r = random_records(100, 9);
  const auto j = evaluation_report(r, AqiLevelTable::shipped());
  for (const char* key : {"mape", "r2", "level_accuracy", "per_pollutant", "excluded_count"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_NEAR(j["mape"].get<double>(), *mape(r).value, 1e-12);
  const auto dir = testing_support::temp_dir("rows");
  write_per_pollutant_csv(dir / "t.csv", r);
  std::ifstream in(dir / "t.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "pollutant,mape,records,excluded");
}

class CityForecast : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SynthConfig c;
    c.rows = 15;
    c.cols = 16;
    c.hours = 120;
    c.stations = 8;
    c.seed = 2;
    PreprocessConfig p;
    p.window = 4;
    data_ = new PreparedData(prepare(simulate(c).observed, p));
  }
  static void TearDownTestSuite() { delete data_; }

  static ModelConfig model(ModelKind kind) {
    ModelConfig m;
    m.kind = kind;
    m.airres = {2, 4, 5, true};
    m.head = {1, 8, 4, 5};
    m.seed = 1;
    return m;
  }

  static PreparedData* data_;
};
PreparedData* CityForecast::data_ = nullptr;

TEST_F(CityForecast, EveryCellFiniteAndNonnegative) {
  PatchSource src(*data_, 5);
  Model<float> m(model(ModelKind::deepair));
  Forecaster f(m, src);
  const auto map = citywide_forecast(f, *data_, 100);
  EXPECT_EQ(map.channels(), 5u);
  EXPECT_TRUE(map.fully_present());
  for (float v : map.values()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0f);
  }
  EXPECT_THROW(citywide_forecast(f, *data_, 3), Error);
}

TEST_F(CityForecast, PersistenceEqualsPreviousFilledMap) {
  PatchSource src(*data_, 5);
  Model<float> m(model(ModelKind::persistence));
  Forecaster f(m, src);
  const std::size_t t = 90;
  const auto map = citywide_forecast(f, *data_, t);
  for (std::size_t r = 0; r < map.rows(); ++r)
    for (std::size_t c = 0; c < map.cols(); ++c) {
      // The persistence input at a cell is the center of its own leave-one-out patch at t-1.
      const auto p = src.patch({r, c}, t - 1);
      for (std::size_t k = 0; k < 5; ++k) {
        const double raw = std::max(0.0, data_->standardizer.to_raw(k, (*p)[k * 25 + 12]));
        EXPECT_EQ(map.value(0, k, r, c), static_cast<float>(raw));
      }
    }
}

TEST_F(CityForecast, StationCellsMatchValidationPath) {
  PatchSource src(*data_, 5);
  Model<float> m(model(ModelKind::deepair));
  Forecaster city(m, src), val(m, src);
  const auto targets = data_->split.targets(data_->split.validation);
  const auto records = forecast_records(val, *data_, targets);
  const auto map = citywide_forecast(city, *data_, targets.begin);
  std::size_t checked = 0;
  for (const auto& r : records) {
    if (r.hour != data_->observed.hour_at(targets.begin)) continue;
    for (auto s : data_->stations)
      if (station_id(s) == r.station_id) {
        const auto k = data_->observed.schema().require(r.pollutant);
        EXPECT_EQ(map.value(0, k, s.row, s.col), static_cast<float>(r.y_pred));
        ++checked;
      }
  }
  EXPECT_GT(checked, 0u);
}

TEST_F(CityForecast, ResidualHeadMatchesDirectForward) {
  PatchSource src(*data_, 5);
  for (auto kind : {ModelKind::deepair, ModelKind::lstm_only}) {
    auto cfg = model(kind);
    cfg.head.residual = true;
    Model<float> m(cfg);
    Forecaster f(m, src);
    for (std::size_t t : {50u, 77u}) {
      const auto cell = data_->stations[t % data_->stations.size()];
      nn::Tape<float> tape(false);
      const auto direct = m.forward(tape, src.window<float>(cell, t, 4), nn::Mode::eval);
      const auto cached = f.forecast_standardized(cell, t);
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(cached[k], direct.data()[k], 1e-5) << to_string(kind);
    }
  }
}
