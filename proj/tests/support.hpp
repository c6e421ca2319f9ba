#pragma once

// Shared test oracles. Everything here is written independently of the
// library code paths it checks.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "deepair/tensor.hpp"

namespace testing_support {

using deepair::nn::Tape;
using deepair::nn::Tensor;

inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("deepair_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class T>
Tensor<T> random_tensor(deepair::nn::Shape shape, std::mt19937_64& rng, double scale = 1.0, bool grad = true) {
  Tensor<T> t(std::move(shape), T(0), grad);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = static_cast<T>(n(rng));
  return t;
}

inline std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::vector<double> w(n);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : w) v = u(rng);
  return w;
}

/// Direct six-loop cross-correlation with zero padding (k-1)/2.
/// in [N,Ci,H,W], w [Co,Ci,k,k] -> out [N,Co,H,W].
inline std::vector<double> naive_conv(const std::vector<double>& in, const std::vector<double>& w,
                                      const std::vector<double>& bias, std::size_t n, std::size_t ci, std::size_t co,
                                      std::size_t h, std::size_t wd, std::size_t k) {
  std::vector<double> out(n * co * h * wd, 0.0);
  const long p = static_cast<long>(k / 2);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < wd; ++x) {
          long double s = bias.empty() ? 0.0L : bias[o];
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long yy = static_cast<long>(y) + static_cast<long>(ky) - p;
                const long xx = static_cast<long>(x) + static_cast<long>(kx) - p;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd)) continue;
                s += static_cast<long double>(w[((o * ci + i) * k + ky) * k + kx]) *
                     in[((b * ci + i) * h + static_cast<std::size_t>(yy)) * wd + static_cast<std::size_t>(xx)];
              }
          out[((b * co + o) * h + y) * wd + x] = static_cast<double>(s);
        }
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;
};

/// Compares reverse-mode gradients against central differences.
/// `loss` builds the scalar loss on the given tape. At most `samples` coordinates
/// per tensor are probed (all when 0). Relative error is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheckResult check_gradients(const std::vector<std::pair<std::string, Tensor<double>>>& inputs,
                                       const std::function<Tensor<double>(Tape<double>&)>& loss, double step = 1e-3,
                                       std::size_t samples = 0, double floor = 1e-3, std::uint64_t seed = 7) {
  for (const auto& [_, t] : inputs) {
    auto tt = t;
    tt.zero_grad();
  }
  {
    Tape<double> tape;
    const auto l = loss(tape);
    tape.backward(l);
  }
  std::mt19937_64 rng(seed);
  GradCheckResult r;
  for (const auto& [name, t] : inputs) {
    auto tensor = t;
    std::vector<double> analytic(tensor.grad().begin(), tensor.grad().end());
    std::vector<std::size_t> idx(tensor.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (samples && samples < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples);
    }
    for (auto i : idx) {
      const double orig = tensor.data()[i];
      auto eval = [&](double v) {
        tensor.data()[i] = v;
        Tape<double> tape(false);
        return loss(tape).item();
      };
      const double plus = eval(orig + step);
      const double minus = eval(orig - step);
      tensor.data()[i] = orig;
      const double numeric = (plus - minus) / (2 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      ++r.checked;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[i]) +
                  " numeric=" + std::to_string(numeric);
      }
    }
  }
  return r;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace testing_support
