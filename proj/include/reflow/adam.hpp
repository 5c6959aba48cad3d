#ifndef REFLOW_ADAM_HPP
#define REFLOW_ADAM_HPP

#include <cmath>
#include <cstddef>
#include <vector>

namespace reflow::optim {

// Adaptive-moment update with bias correction; the epsilon sits inside the
// denominator after correction.
struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-15;
};

struct AdamState {
  std::vector<double> m, v;

  explicit AdamState(size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
  void resize(size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }
};

// One update over a flat span; step_index is 1-based for bias correction.
inline void adam_step_span(double* param, const double* grad, double* m, double* v, size_t n,
                           double lr, int step_index, const AdamParams& ap = {}) {
  const double bc1 = 1.0 - std::pow(ap.beta1, step_index);
  const double bc2 = 1.0 - std::pow(ap.beta2, step_index);
  for (size_t i = 0; i < n; ++i) {
    m[i] = ap.beta1 * m[i] + (1.0 - ap.beta1) * grad[i];
    v[i] = ap.beta2 * v[i] + (1.0 - ap.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + ap.epsilon);
  }
}

}  // namespace reflow::optim

#endif  // REFLOW_ADAM_HPP
