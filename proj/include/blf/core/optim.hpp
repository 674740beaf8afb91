#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "blf/core/autograd.hpp"
#include "blf/core/error.hpp"
#include "blf/core/tensor.hpp"

namespace blf {

struct ScheduleConfig {
  double base_lr = 5e-4;
  std::int64_t warmup_steps = 10000;
  std::int64_t total_steps = 100000;

  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

// Linear warmup to base_lr at warmup_steps, then linear decay to zero at
// total_steps. Clamped at zero past the end.
inline double scheduled_lr(const ScheduleConfig& cfg, std::int64_t step) {
  if (step <= 0) return 0.0;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  const double t = static_cast<double>(cfg.total_steps);
  double factor;
  if (step <= cfg.warmup_steps) {
    factor = s / w;
  } else if (cfg.total_steps <= cfg.warmup_steps) {
    factor = 0.0;
  } else {
    factor = 1.0 - (s - w) / (t - w);
  }
  return cfg.base_lr * std::clamp(factor, 0.0, 1.0);
}

struct AdamWConfig {
  ScheduleConfig schedule;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;

  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = nlohmann::json{{"base_lr", c.schedule.base_lr}, {"warmup_steps", c.schedule.warmup_steps},
                     {"total_steps", c.schedule.total_steps}, {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  j.at("base_lr").get_to(c.schedule.base_lr);
  j.at("warmup_steps").get_to(c.schedule.warmup_steps);
  j.at("total_steps").get_to(c.schedule.total_steps);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
}

// Per-parameter-list optimizer state. Moments are indexed like the parameter
// list passed to optimizer_step and are created lazily on the first step.
template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;

  OptimizerState() = default;
  explicit OptimizerState(AdamWConfig cfg) : config(cfg) {
    if (!(cfg.schedule.base_lr >= 0.0)) throw ConfigError("base_lr must be non-negative");
    if (cfg.schedule.warmup_steps <= 0) throw ConfigError("warmup_steps must be positive");
    if (cfg.schedule.total_steps <= 0) throw ConfigError("total_steps must be positive");
    if (cfg.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  }

  double current_lr() const { return scheduled_lr(config.schedule, step); }
};

// One decoupled-weight-decay Adam update followed by zeroing the gradients.
// Weight decay applies to matrices only; biases, norms and other vectors are
// left undecayed.
template <typename T>
void optimizer_step(std::span<Parameter<T>> params, OptimizerState<T>& state) {
  if (state.first_moment.empty()) {
    for (auto& p : params) {
      state.first_moment.emplace_back(p.value().shape());
      state.second_moment.emplace_back(p.value().shape());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw UsageError("optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  state.step += 1;
  const auto& c = state.config;
  const double lr = scheduled_lr(c.schedule, state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& w = p.value_mut();
    const auto& g = p.grad_view();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.shape() != w.shape()) {
      throw DimensionError("moment shape " + shape_string(m.shape()) + " does not match parameter " + p.name());
    }
    const T decay = w.rank() >= 2 ? static_cast<T>(1.0 - lr * c.weight_decay) : T{1};
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      w[j] = w[j] * decay - static_cast<T>(lr * mhat / (std::sqrt(vhat) + c.eps));
    }
    p.zero_grad();
  }
}

}  // namespace blf
