// deepair: command-line driver for the forecasting pipeline.
//
// Exit status: 0 ok, 1 pipeline error (one line "error: <module>: <message>"
// on stderr), 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "deepair/cli.hpp"
#include "deepair/evaluator.hpp"
#include "deepair/gridstore.hpp"
#include "deepair/pipeline.hpp"
#include "deepair/synthcity.hpp"
#include "deepair/trainer.hpp"

namespace fs = std::filesystem;
using namespace deepair;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool quiet = false;
};

void add_common(CLI::App& app, Common& c, bool with_out = true) {
  app.add_option("--config", c.config_file, "JSON file of flat dotted config keys")->check(CLI::ExistingFile);
  app.add_option("--set", c.overrides, "Config override key=value (repeatable, wins over --config)");
  app.add_option("--seed", c.seed, "Shorthand for --set seed=N");
  app.add_flag("--deterministic", c.deterministic, "Single worker thread (same as --set deterministic=true)");
  app.add_flag("-q,--quiet", c.quiet, "Log warnings and errors only");
  if (with_out) app.add_option("--out", c.out, "Run directory (default: runs/<timestamp>_seed<seed>)");
}

RunConfig build_config(const Common& c) {
  RunConfig cfg;
  try {
    if (!c.config_file.empty()) cfg.merge_file(c.config_file);
    for (const auto& o : c.overrides) cfg.override_with(o);
    if (c.seed) cfg.set("seed", *c.seed);
    if (c.deterministic) cfg.set("deterministic", true);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

/// Run directory, logging and bookkeeping shared by every subcommand.
class Run {
 public:
  Run(std::string command, const Common& common, RunConfig cfg) : command_(std::move(command)), cfg_(std::move(cfg)) {
    dir_ = common.out.empty() ? default_run_dir("runs", cfg_.seed()) : fs::path(common.out);
    fs::create_directories(dir_);
    auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((dir_ / (command_ + ".log")).string(), true);
    auto console = std::make_shared<spdlog::sinks::stderr_sink_mt>();
    console->set_level(common.quiet ? spdlog::level::warn : spdlog::level::info);
    auto logger = std::make_shared<spdlog::logger>("deepair", spdlog::sinks_init_list{file, console});
    logger->set_level(spdlog::level::info);
    spdlog::set_default_logger(logger);
    std::ofstream(dir_ / "config.json") << cfg_.values().dump(2) << '\n';
    spdlog::info("cli: {} -> {} (threads {})", command_, dir_.string(), cfg_.threads());
  }

  ~Run() { spdlog::default_logger()->flush(); }

  const fs::path& dir() const { return dir_; }
  const RunConfig& config() const { return cfg_; }
  void input(const std::string& name, const fs::path& p) { inputs_[name] = fs::absolute(p).lexically_normal().string(); }
  void artifact(const std::string& name) { artifacts_.push_back(name); }

  /// Deterministic: depends only on the command, inputs, config and artifact list.
  void write_manifest() const {
    nlohmann::json m = {{"format", "deepair-run"},
                        {"version", kRunManifestVersion},
                        {"command", command_},
                        {"seed", cfg_.seed()},
                        {"inputs", inputs_},
                        {"config", "config.json"},
                        {"log", command_ + ".log"},
                        {"artifacts", artifacts_}};
    std::ofstream(dir_ / "run_manifest.json") << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  RunConfig cfg_;
  fs::path dir_;
  nlohmann::json inputs_ = nlohmann::json::object();
  std::vector<std::string> artifacts_;
};

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw Error("cli", "cannot write " + p.string());
  out << j.dump(2) << '\n';
}

AqiLevelTable aqi_table(const RunConfig& cfg) {
  const auto path = cfg.get<std::string>("eval.aqi_table");
  return path.empty() ? AqiLevelTable::shipped() : AqiLevelTable::load(path);
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& common, bool with_truth) {
  Run run("synth", common, build_config(common));
  const auto& cfg = run.config();
  auto result = simulate(cfg.synth());
  const auto rate = cfg.get<double>("synth.missing_rate");
  if (rate > 0) {
    const auto cleared = plant_missingness(result.observed, rate, cfg.get<double>("synth.missing_burst"), cfg.seed());
    spdlog::info("synthcity: cleared {} station readings", cleared);
  }
  save_dataset(result.observed, run.dir());
  for (const char* f : {"manifest.json", "values.f32", "mask.bits"}) run.artifact(f);
  if (with_truth) {
    save_dataset(result.truth, run.dir() / "truth");
    run.artifact("truth/");
  }
  std::ofstream st(run.dir() / "stations.csv");
  st << "station_id,row,col\n";
  for (auto c : result.stations) st << station_id(c) << ',' << c.row << ',' << c.col << '\n';
  run.artifact("stations.csv");
  run.write_manifest();
  spdlog::info("synthcity: {}x{} grid, {} hours, {} stations", result.observed.rows(), result.observed.cols(),
               result.observed.hours(), result.stations.size());
  return 0;
}

int cmd_ingest(const Common& common, const std::vector<std::string>& csvs) {
  Run run("ingest", common, build_config(common));
  const auto& cfg = run.config();
  const auto spec = cfg.grid();
  spec.validate();
  const auto schema = ChannelSchema::canonical();
  std::vector<StationObservation> all;
  std::ofstream rejected(run.dir() / "rejected.csv");
  rejected << "file,line,reason\n";
  std::size_t n_rejected = 0;
  for (const auto& path : csvs) {
    std::ifstream in(path);
    if (!in) throw Error("gridstore", "cannot open " + path);
    run.input("csv:" + fs::path(path).filename().string(), path);
    auto r = ingest_station_csv(in, schema);
    for (const auto& rej : r.rejected) {
      rejected << '"' << path << "\"," << rej.line << ",\"" << rej.reason << "\"\n";
      ++n_rejected;
    }
    all.insert(all.end(), r.observations.begin(), r.observations.end());
  }
  if (all.empty()) throw Error("gridstore", "no valid observations in the input files");
  const auto hourly = align_all(all);
  auto map = rasterize(hourly, spec, schema);
  attach_auxiliary(map, cfg.get<int>("time.utc_offset_hours"));
  save_dataset(map, run.dir());
  for (const char* f : {"manifest.json", "values.f32", "mask.bits", "rejected.csv"}) run.artifact(f);
  run.write_manifest();
  spdlog::info("gridstore: {} observations, {} rejected lines, {} hours from {}", all.size(), n_rejected, map.hours(),
               format_utc_hour(map.start()));
  return 0;
}

int cmd_preprocess(const Common& common, const std::string& data_dir) {
  Run run("preprocess", common, build_config(common));
  run.input("data", data_dir);
  const auto data = prepare(load_dataset(data_dir), run.config().preprocess());
  write_json(run.dir() / "preprocess.json", data.state_json());
  run.artifact("preprocess.json");
  run.write_manifest();
  for (const auto& c : data.correlation.channels)
    spdlog::info("interp: {:<16} r={:<10} -> {}", c.channel, c.r ? fmt::format("{:.4f}", *c.r) : "undefined",
                 to_string(data.policy.mode_of(c.channel)));
  return 0;
}

int cmd_train(const Common& common, const std::string& data_dir) {
  Run run("train", common, build_config(common));
  const auto& cfg = run.config();
  run.input("data", data_dir);
  const auto model_cfg = cfg.model();
  const auto train_cfg = cfg.train();
  const auto data = prepare(load_dataset(data_dir), cfg.preprocess());
  write_json(run.dir() / "preprocess.json", data.state_json());
  run.artifact("preprocess.json");

  auto mc = model_cfg;
  mc.dynamic_channels = data.inputs.schema().dynamic_indices().size();
  Model<float> model(mc);
  PatchSource source(data, model.patch(), cfg.scope());
  const nlohmann::json extra = {{"config", cfg.values()}, {"preprocess", data.state_json()}};

  fs::path best;
  if (model.learned()) {
    spdlog::info("trainer: precomputing leave-one-out patches for {} stations", data.stations.size());
    source.precompute(data.stations, {0, data.inputs.hours()}, cfg.threads());
    Trainer trainer(model, source, train_cfg);
    const auto fit = trainer.fit(run.dir(), extra);
    best = run.dir() / ("ckpt_" + std::to_string(fit.stopping.best_epoch) + ".bin");
    for (const auto& e : fs::directory_iterator(run.dir()))
      if (e.path().filename().string().starts_with("ckpt_")) run.artifact(e.path().filename().string());
    run.artifact("train_log.csv");
    if (fit.stopping.diverged) spdlog::warn("trainer: stopped on divergence: {}", fit.stopping.diagnostic);
  } else {
    auto meta = model.checkpoint_meta();
    meta["extra"] = extra;
    best = run.dir() / "ckpt_0.bin";
    nn::save_checkpoint(best, model.snapshot(), meta);
    run.artifact("ckpt_0.bin");
  }
  fs::copy_file(best, run.dir() / "best.bin", fs::copy_options::overwrite_existing);
  run.artifact("best.bin");
  run.write_manifest();
  std::cout << (run.dir() / "best.bin").string() << '\n';
  return 0;
}

/// Model, preprocessing state and patch source rebuilt from a checkpoint.
struct Loaded {
  RunConfig trained;
  std::unique_ptr<Model<float>> model;
  std::unique_ptr<PreparedData> data;
  std::unique_ptr<PatchSource> source;
};

Loaded load_model(const fs::path& ckpt, const fs::path& data_dir) {
  auto c = nn::load_checkpoint(ckpt);
  const auto& meta = c.header.at("meta");
  Loaded l;
  l.trained.merge(meta.at("extra").at("config"));
  l.model = std::make_unique<Model<float>>(ModelConfig::from_json(meta.at("model")));
  l.model->load(c.params);
  l.data = std::make_unique<PreparedData>(restore(load_dataset(data_dir), meta.at("extra").at("preprocess"),
                                                  l.model->window(), l.trained.get<std::size_t>("interp.max_gap")));
  l.source = std::make_unique<PatchSource>(*l.data, l.model->patch(), l.trained.scope());
  return l;
}

int cmd_evaluate(const Common& common, const std::string& model_path, const std::string& data_dir) {
  Run run("evaluate", common, build_config(common));
  const auto& cfg = run.config();
  run.input("model", model_path);
  run.input("data", data_dir);
  auto l = load_model(model_path, data_dir);
  const auto targets = l.data->split.targets(l.data->split.test);
  l.source->precompute(l.data->stations, {targets.begin - l.model->window(), targets.end}, cfg.threads());
  Forecaster f(*l.model, *l.source);
  const auto records = forecast_records(f, *l.data, targets);
  const auto floor = cfg.get<double>("eval.mape_floor");
  write_predictions_csv(run.dir() / "predictions.csv", records);
  write_scatter_csv(run.dir() / "scatter.csv", records);
  write_per_pollutant_csv(run.dir() / "per_pollutant.csv", records, floor);
  auto report = evaluation_report(records, aqi_table(cfg), floor);
  report["model"] = to_string(l.model->kind());
  report["test_hours"] = {targets.begin, targets.end};
  write_json(run.dir() / "report.json", report);
  for (const char* f : {"predictions.csv", "scatter.csv", "per_pollutant.csv", "report.json"}) run.artifact(f);
  run.write_manifest();
  std::cout << "mape " << report["mape"].dump() << '\n';
  return 0;
}

int cmd_forecast(const Common& common, const std::string& model_path, const std::string& data_dir,
                 std::optional<long long> hour) {
  Run run("forecast", common, build_config(common));
  const auto& cfg = run.config();
  run.input("model", model_path);
  run.input("data", data_dir);
  auto l = load_model(model_path, data_dir);
  long long t = hour.value_or(cfg.get<long long>("forecast.hour"));
  if (t < 0) t = static_cast<long long>(l.data->observed.hours());
  Forecaster f(*l.model, *l.source);
  const auto map = citywide_forecast(f, *l.data, static_cast<std::size_t>(t));
  save_dataset(map, run.dir() / "forecast");
  run.artifact("forecast/");
  std::ofstream csv(run.dir() / "forecast.csv");
  csv << "row,col";
  for (std::size_t k = 0; k < map.channels(); ++k) csv << ',' << map.schema()[k].name;
  csv << '\n';
  for (std::size_t r = 0; r < map.rows(); ++r)
    for (std::size_t c = 0; c < map.cols(); ++c) {
      csv << r << ',' << c;
      for (std::size_t k = 0; k < map.channels(); ++k) csv << ',' << map.value(0, k, r, c);
      csv << '\n';
    }
  run.artifact("forecast.csv");
  run.write_manifest();
  spdlog::info("evaluator: citywide forecast for {} ({} cells)", format_utc_hour(map.start()), map.plane_size());
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  bool any = false;
  if (fs::exists(dir / "report.json")) {
    any = true;
    std::ifstream in(dir / "report.json");
    const auto r = nlohmann::json::parse(in);
    auto num = [](const nlohmann::json& v) { return v.is_null() ? std::string("undefined") : fmt::format("{:.3f}", v.get<double>()); };
    std::cout << "model           " << r.value("model", "?") << '\n'
              << "mape            " << num(r["mape"]) << '\n'
              << "r2              " << num(r["r2"]) << '\n'
              << "level_accuracy  " << num(r["level_accuracy"]) << '\n'
              << "records         " << r["records"] << " (excluded " << r["excluded_count"] << ")\n"
              << "\npollutant  mape      r2\n";
    for (const auto& p : r["per_pollutant"])
      std::cout << fmt::format("{:<10} {:<9} {}\n", p["pollutant"].get<std::string>(), num(p["mape"]), num(p["r2"]));
  }
  if (fs::exists(dir / "train_log.csv")) {
    any = true;
    std::ifstream in(dir / "train_log.csv");
    std::cout << (any ? "\n" : "") << in.rdbuf();
  }
  if (!any) throw Error("cli", "no report.json or train_log.csv in " + run_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepair: fine-grained urban air-quality forecasting pipeline"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common common;
  bool truth = false;
  std::vector<std::string> csvs;
  std::string data_dir, model_path, run_dir;
  std::optional<long long> hour;

  auto* synth = app.add_subcommand("synth", "Simulate a synthetic city and write its station observations");
  add_common(*synth, common);
  synth->add_flag("--truth", truth, "Also write the dense ground truth under truth/");

  auto* ingest = app.add_subcommand("ingest", "Rasterize station CSV files into a dataset");
  add_common(*ingest, common);
  ingest->add_option("--csv", csvs, "station_id,lat,lon,timestamp,channel,value file (repeatable)")
      ->required()
      ->check(CLI::ExistingFile);

  auto* preprocess = app.add_subcommand("preprocess", "Split, gap-fill, standardize and gate a dataset");
  add_common(*preprocess, common);
  preprocess->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  auto* train = app.add_subcommand("train", "Train a model with early stopping");
  add_common(*train, common);
  train->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  auto* evaluate = app.add_subcommand("evaluate", "Forecast the test segment and score it");
  add_common(*evaluate, common);
  evaluate->add_option("--model", model_path, "Checkpoint (best.bin of a train run)")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data", data_dir, "Dataset directory the model was trained on")
      ->required()
      ->check(CLI::ExistingDirectory);

  auto* forecast = app.add_subcommand("forecast", "Forecast every grid cell for one hour");
  add_common(*forecast, common);
  forecast->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  forecast->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  forecast->add_option("--hour", hour, "Target hour index (default: the hour after the data ends)");

  auto* report = app.add_subcommand("report", "Print the metrics and training log of a run directory");
  report->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth(common, truth);
    if (*ingest) return cmd_ingest(common, csvs);
    if (*preprocess) return cmd_preprocess(common, data_dir);
    if (*train) return cmd_train(common, data_dir);
    if (*evaluate) return cmd_evaluate(common, model_path, data_dir);
    if (*forecast) return cmd_forecast(common, model_path, data_dir, hour);
    if (*report) return cmd_report(run_dir);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  } catch (const Error& e) {
    spdlog::default_logger()->flush();
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: cli: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
