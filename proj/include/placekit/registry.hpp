#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "placekit/rng.hpp"
#include "placekit/tensor.hpp"

namespace placekit {

// Named parameter store with deterministic iteration order (insertion
// order) and per-parameter Adam state.
class ParamRegistry {
 public:
  struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
  };

  Tensor add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
    Tensor t = Tensor::zeros(std::move(shape), true);
    index_[name] = order_.size();
    order_.push_back(name);
    params_.push_back(t);
    adam_.push_back(AdamState{std::vector<double>(t.numel(), 0.0),
                              std::vector<double>(t.numel(), 0.0)});
    return t;
  }

  // Kaiming-style uniform fan-in init.
  Tensor add_kaiming(const std::string& name, Shape shape, int fan_in, Rng& rng) {
    Tensor t = add(name, std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
  }

  Tensor add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor t = add(name, std::move(shape));
    for (auto& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
  }

  Tensor add_const(const std::string& name, Shape shape, double value) {
    Tensor t = add(name, std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
    return params_[it->second];
  }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }
  Tensor param(size_t i) const { return params_[i]; }
  AdamState& adam_state(size_t i) { return adam_[i]; }
  uint64_t& adam_step_count() { return step_; }
  uint64_t adam_step_count() const { return step_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_requires_grad(bool rg) {
    for (auto& p : params_) p.set_requires_grad(rg);
  }

  size_t total_numel() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> params_;
  std::vector<AdamState> adam_;
  std::unordered_map<std::string, size_t> index_;
  uint64_t step_ = 0;
};

// One bias-corrected Adam update over every parameter in the registry;
// gradients are zeroed afterward. `lr_scale` (optional) multiplies the
// learning rate per parameter name, which is how the backbone/rest split
// is expressed.
inline void adam_step(ParamRegistry& reg, double lr, double beta1 = 0.5,
                      double beta2 = 0.999, double eps = 1e-8,
                      const std::function<double(const std::string&)>& lr_scale = {}) {
  const uint64_t t = ++reg.adam_step_count();
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < reg.size(); ++i) {
    Tensor p = reg.param(i);
    if (p.grad_view().empty()) continue;  // never touched by backward
    auto& st = reg.adam_state(i);
    const double step_lr = lr * (lr_scale ? lr_scale(reg.names()[i]) : 1.0);
    auto& val = p.data();
    auto& g = p.grad();
    for (size_t k = 0; k < val.size(); ++k) {
      st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g[k];
      st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g[k] * g[k];
      const double mhat = st.m[k] / bc1;
      const double vhat = st.v[k] / bc2;
      val[k] -= step_lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.zero_grad();
  }
}

}  // namespace placekit
