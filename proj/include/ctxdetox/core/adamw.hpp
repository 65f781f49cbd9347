// Copyright 2026 The ctxdetox Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ctxdetox/core/common.hpp"

namespace ctxdetox {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adaptive-moment optimizer with bias correction and decoupled weight decay.
///
/// Parameters are registered once as (value, gradient) span pairs; step()
/// then updates every registered tensor in registration order.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void add(std::span<T> values, std::span<const T> grads) {
    require(values.size() == grads.size(), "AdamW: value/grad size mismatch");
    slots_.push_back({values, grads, std::vector<double>(values.size(), 0.0),
                      std::vector<double>(values.size(), 0.0)});
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        const double g = static_cast<double>(s.grads[i]);
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        double w = static_cast<double>(s.values[i]);
        w -= cfg_.lr * cfg_.weight_decay * w;
        w -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        s.values[i] = static_cast<T>(w);
      }
    }
  }

  long steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  struct Slot {
    std::span<T> values;
    std::span<const T> grads;
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace ctxdetox
