#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include <spdlog/spdlog.h>

#include "deepair/evaluator.hpp"
#include "deepair/model.hpp"
#include "deepair/pipeline.hpp"

namespace deepair {

struct TrainConfig {
  double lr = 0.01;
  std::size_t patience = 5;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  std::size_t batch = 1;  // stations sampled per hour; gradients averaged

  void validate() const {
    if (!(lr > 0)) throw Error("trainer", "train.lr must be > 0");
    if (patience < 1) throw Error("trainer", "train.patience must be >= 1");
    if (max_epochs < 1) throw Error("trainer", "train.max_epochs must be >= 1");
    if (batch < 1) throw Error("trainer", "train.batch must be >= 1");
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  std::optional<double> val_mape;
  std::size_t epochs_since_best = 0;
};

struct StoppingResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;  // 0 = no epoch improved on the initial state
  std::optional<double> best_validation;
  bool diverged = false;
  std::string diagnostic;
};

/// Epoch loop with patience-based early stopping. "Improved" means strictly
/// lower validation error; training halts once `patience` consecutive epochs
/// fail to improve, or after `max_epochs`. A non-finite training loss (or a
/// NonFiniteError) aborts the loop with `diverged` set.
inline StoppingResult run_early_stopping(std::size_t max_epochs, std::size_t patience,
                                         const std::function<double(std::size_t)>& train_epoch,
                                         const std::function<std::optional<double>(std::size_t)>& validate,
                                         const std::function<void(std::size_t)>& on_improvement) {
  StoppingResult r;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since = 0;
  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    double loss;
    try {
      loss = train_epoch(epoch);
    } catch (const NonFiniteError& e) {
      r.diverged = true;
      r.diagnostic = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    if (!std::isfinite(loss)) {
      r.diverged = true;
      r.diagnostic = "epoch " + std::to_string(epoch) + ": training loss is not finite";
      break;
    }
    const auto val = validate(epoch);
    if (val && *val < best) {
      best = *val;
      r.best_epoch = epoch;
      r.best_validation = val;
      since = 0;
      on_improvement(epoch);
    } else {
      ++since;
    }
    r.log.push_back({epoch, loss, val, since});
    if (since >= patience) break;
  }
  return r;
}

inline void write_training_log(const std::filesystem::path& path, const StoppingResult& r) {
  std::ofstream out(path);
  if (!out) throw Error("trainer", "cannot write " + path.string());
  out << "epoch,train_loss,val_mape,epochs_since_best\n";
  out << std::setprecision(17);
  for (const auto& e : r.log)
    out << e.epoch << ',' << e.train_loss << ',' << (e.val_mape ? std::to_string(*e.val_mape) : std::string("nan")) << ','
        << e.epochs_since_best << '\n';
  out << "# best=" << (r.best_epoch ? "ckpt_" + std::to_string(r.best_epoch) + ".bin" : std::string("ckpt_0.bin"));
  if (r.diverged) out << " diverged=\"" << r.diagnostic << '"';
  out << '\n';
}

struct FitResult {
  StoppingResult stopping;
  nn::ParameterSet<float> best;  // parameters of the best epoch (initial ones if none improved)
  std::size_t skipped_iterations = 0;
};

/// Patch training of one model on prepared data.
class Trainer {
 public:
  Trainer(Model<float>& model, const PatchSource& source, TrainConfig cfg)
      : model_(&model), source_(&source), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
    if (source.edge() != model.patch()) throw Error("trainer", "patch source and model disagree on patch size");
    if (source.data().split.window != model.window())
      throw Error("trainer", "data split window " + std::to_string(source.data().split.window) +
                                 " differs from model window " + std::to_string(model.window()));
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t skipped() const { return skipped_; }
  /// (station index, hour) of every sampled iteration in the last epoch.
  const std::vector<std::pair<std::size_t, std::size_t>>& last_samples() const { return samples_; }
  const std::vector<double>& last_losses() const { return losses_; }

  /// Standardized ground truth at (cell, t) and its presence mask.
  std::pair<std::vector<float>, std::vector<std::uint8_t>> target(CellIndex cell, std::size_t t) const {
    const auto& d = source_->data();
    std::vector<float> y(kAirQualityChannels, 0.0f);
    std::vector<std::uint8_t> m(kAirQualityChannels, 0);
    for (std::size_t k = 0; k < kAirQualityChannels; ++k)
      if (auto v = d.observed.get(t, k, cell)) {
        y[k] = static_cast<float>(d.standardizer.to_standard(k, *v));
        m[k] = 1;
      }
    return {y, m};
  }

  /// Forward + backward for one (station, hour); gradients accumulate.
  /// Returns nullopt (and counts a skip) when the station has no truth at t.
  std::optional<double> accumulate(CellIndex cell, std::size_t t) {
    auto [y, m] = target(cell, t);
    if (std::none_of(m.begin(), m.end(), [](auto v) { return v != 0; })) {
      ++skipped_;
      return std::nullopt;
    }
    const auto window = source_->window<float>(cell, t, model_->window());
    nn::Tape<float> tape;
    const auto pred = model_->forward(tape, window, nn::Mode::train);
    const auto loss = nn::mse_loss<float>(tape, pred, std::span<const float>(y), std::span<const std::uint8_t>(m));
    tape.backward(loss);
    return loss.item();
  }

  /// One SGD update from a single (station, hour).
  std::optional<double> train_iteration(CellIndex cell, std::size_t t) {
    const auto loss = accumulate(cell, t);
    if (loss) nn::sgd_step(model_->params(), cfg_.lr);
    return loss;
  }

  /// Walks the training targets in order, sampling stations uniformly per hour.
  double train_epoch() {
    const auto& d = source_->data();
    const auto targets = d.split.targets(d.split.train);
    std::uniform_int_distribution<std::size_t> pick(0, d.stations.size() - 1);
    samples_.clear();
    losses_.clear();
    for (std::size_t t = targets.begin; t < targets.end; ++t) {
      double sum = 0;
      std::size_t used = 0;
      for (std::size_t b = 0; b < cfg_.batch; ++b) {
        const auto s = pick(rng_);
        samples_.emplace_back(s, t);
        if (auto l = accumulate(d.stations[s], t)) {
          sum += *l;
          ++used;
        }
      }
      if (used == 0) continue;
      nn::sgd_step(model_->params(), cfg_.lr, 1.0 / static_cast<double>(used));
      losses_.push_back(sum / static_cast<double>(used));
    }
    if (losses_.empty()) throw Error("trainer", "no executable training iterations: the dataset is unusable");
    double total = 0;
    for (double l : losses_) total += l;
    return total / static_cast<double>(losses_.size());
  }

  std::vector<PredictionRecord> predict(Segment segment) const {
    Forecaster f(*model_, *source_);
    return forecast_records(f, source_->data(), source_->data().split.targets(segment));
  }

  /// Validation MAPE over every (station, hour, pollutant) with truth.
  std::optional<double> validate() const { return mape(predict(source_->data().split.validation)).value; }

  /// Full loop. When `run_dir` is set, writes ckpt_<epoch>.bin per improvement
  /// and train_log.csv. The model ends holding the best parameters.
  FitResult fit(const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                const nlohmann::json& checkpoint_extra = nlohmann::json::object()) {
    FitResult out{{}, model_->snapshot(), 0};
    auto meta = model_->checkpoint_meta();
    meta["extra"] = checkpoint_extra;
    if (run_dir) nn::save_checkpoint(*run_dir / "ckpt_0.bin", out.best, meta);
    out.stopping = run_early_stopping(
        cfg_.max_epochs, cfg_.patience,
        [&](std::size_t epoch) {
          const double loss = train_epoch();
          spdlog::info("trainer: epoch {} train_loss {:.6f} skipped {}", epoch, loss, skipped_);
          return loss;
        },
        [&](std::size_t epoch) {
          const auto v = validate();
          spdlog::info("trainer: epoch {} val_mape {}", epoch, v ? std::to_string(*v) : "undefined");
          return v;
        },
        [&](std::size_t epoch) {
          out.best = model_->snapshot();
          if (run_dir) nn::save_checkpoint(*run_dir / ("ckpt_" + std::to_string(epoch) + ".bin"), out.best, meta);
        });
    if (out.stopping.diverged) spdlog::error("trainer: diverged ({}), restoring best checkpoint", out.stopping.diagnostic);
    out.skipped_iterations = skipped_;
    model_->load(out.best);
    if (run_dir) write_training_log(*run_dir / "train_log.csv", out.stopping);
    return out;
  }

 private:
  Model<float>* model_;
  const PatchSource* source_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::size_t skipped_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> samples_;
  std::vector<double> losses_;
};

}  // namespace deepair
