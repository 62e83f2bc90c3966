#pragma once

// Named parameter collection, Adam, and the warmup/decay learning-rate
// schedule.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gran/tensor.hpp"

namespace gran {

template <typename S>
class ParamStore {
 public:
  struct Moments {
    std::vector<S> m, v;
  };

  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    if (params_.count(name)) throw contract_error("param '" + name + "' already registered");
    t.set_requires_grad(true);
    order_.push_back(name);
    return params_.emplace(name, std::move(t)).first->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Tensor<S>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw contract_error("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<S>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void zero_grads() {
    for (auto& name : order_) params_.at(name).zero_grad();
  }

  bool optimizer_initialized() const { return !moments_.empty(); }
  Moments& moments(const std::string& name) { return moments_[name]; }
  const Moments* find_moments(const std::string& name) const {
    auto it = moments_.find(name);
    return it == moments_.end() ? nullptr : &it->second;
  }
  std::int64_t& step_count() { return step_; }
  std::int64_t step_count() const { return step_; }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor<S>> params_;
  std::unordered_map<std::string, Moments> moments_;
  std::int64_t step_ = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update over every parameter in the store; gradients are consumed
// (zeroed) afterwards. Moment buffers are created on first use.
template <typename S>
void adam_step(ParamStore<S>& store, double lr, const AdamConfig& cfg = {}) {
  for (const auto& name : store.names()) {
    if (store.at(name).grad().empty())
      throw contract_error("adam_step: missing gradient for parameter '" + name + "'");
  }
  const std::int64_t t = ++store.step_count();
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (const auto& name : store.names()) {
    Tensor<S>& p = store.at(name);
    auto& mo = store.moments(name);
    if (mo.m.size() != p.size()) {
      mo.m.assign(p.size(), S(0));
      mo.v.assign(p.size(), S(0));
    }
    auto w = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = double(g[i]);
      const double m = cfg.beta1 * double(mo.m[i]) + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * double(mo.v[i]) + (1.0 - cfg.beta2) * gi * gi;
      mo.m[i] = S(m);
      mo.v[i] = S(v);
      w[i] -= S(lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps));
    }
    p.zero_grad();
  }
}

// Linear ramp 0 -> peak over the warmup steps, then linear decay peak -> 0.
struct LrSchedule {
  double peak_lr = 5e-4;
  std::int64_t total_steps = 0;
  std::int64_t warmup_steps = 0;

  static LrSchedule make(double peak, std::int64_t total) {
    if (peak <= 0.0 || total <= 0) throw input_error("lr schedule: peak and total must be positive");
    LrSchedule s;
    s.peak_lr = peak;
    s.total_steps = total;
    s.warmup_steps = (total + 9) / 10;  // ceil(0.1 * total)
    return s;
  }
};

inline double lr_at(const LrSchedule& s, std::int64_t step) {
  if (step < 0 || step > s.total_steps)
    throw input_error("lr_at: step " + std::to_string(step) + " outside [0," +
                      std::to_string(s.total_steps) + "]");
  if (step < s.warmup_steps) return s.peak_lr * double(step + 1) / double(s.warmup_steps);
  if (s.total_steps == s.warmup_steps) return 0.0;
  return s.peak_lr * double(s.total_steps - step) / double(s.total_steps - s.warmup_steps);
}

}  // namespace gran
