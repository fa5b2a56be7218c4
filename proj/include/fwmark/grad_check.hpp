/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "fwmark/tensor.hpp"

namespace fwmark {

template <typename T>
using ScalarFn = std::function<BasicTensor<T>(const BasicTensor<T>&)>;

// Compares the tape gradient of a scalar function against central finite
// differences. Returns max_i |g_i - d_i| / (|g_i| + |d_i| + eps), where g is
// the analytic and d the numeric derivative. NaN means a broken rule.
template <typename T>
double grad_check(const ScalarFn<T>& f, const BasicTensor<T>& x, T eps) {
  BasicTensor<T> probe = x.detach();
  probe.set_requires_grad(true);
  BasicTape<T> tape;
  {
    auto rec = tape.record();
    BasicTensor<T> loss = f(probe);
    backward(loss, tape);
  }
  std::vector<T> analytic(probe.numel(), T(0));
  if (probe.has_grad()) {
    auto g = probe.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    BasicTensor<T> plus = x.detach();
    BasicTensor<T> minus = x.detach();
    plus.data()[i] += eps;
    minus.data()[i] -= eps;
    const double numeric =
        (static_cast<double>(f(plus).item()) -
         static_cast<double>(f(minus).item())) /
        (2.0 * static_cast<double>(eps));
    const double a = static_cast<double>(analytic[i]);
    const double err = std::abs(a - numeric) /
                       (std::abs(a) + std::abs(numeric) + static_cast<double>(eps));
    if (std::isnan(err)) return err;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fwmark
