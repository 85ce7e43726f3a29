#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "embedmask/ops.hpp"
#include "embedmask/tensor.hpp"

namespace embedmask {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
  std::size_t coordinates = 0;
  std::size_t narrowed = 0;  // coordinates whose step was shrunk to stay off a kink
};

struct FiniteDiffOptions {
  // When set, a stencil whose +-step evaluations take a different branch at any
  // kink than the base point is retried at step / 10, up to `max_narrowing` times.
  bool single_piece = false;
  std::size_t max_narrowing = 3;
};

class GradCheckError : public std::runtime_error {
 public:
  GradCheckError(const std::string& what, std::size_t tensor, std::size_t index)
      : std::runtime_error(what + " at tensor " + std::to_string(tensor) + " coordinate " + std::to_string(index)),
        tensor_(tensor),
        index_(index) {}
  std::size_t tensor() const noexcept { return tensor_; }
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t tensor_, index_;
};

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of `f` at `point` with central differences.
/// Error per coordinate is |a - n| / max(1e-8, |a| + |n|); the maximum wins.
inline GradCheckResult finite_diff_check(const ScalarFn& f, const std::vector<Tensor<double>>& point, double step,
                                         const FiniteDiffOptions& options = {}) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(point.size());
    for (const auto& t : point) leaves.push_back(tape.leaf(t));
    Var<double> root = f(leaves);
    tape.backward(root);
    for (const auto& leaf : leaves) analytic.push_back(leaf.grad());
  }

  auto evaluate = [&](const std::vector<Tensor<double>>& at, std::size_t ti, std::size_t idx, BranchTrace* trace) {
    std::optional<BranchRecording> rec;
    if (trace) rec.emplace(*trace);
    std::vector<Var<double>> inputs;
    inputs.reserve(at.size());
    for (const auto& t : at) inputs.push_back(Var<double>::constant(t));
    double v = 0.0;
    try {
      v = f(inputs).item();
    } catch (const NonFiniteError& e) {
      throw GradCheckError(std::string("non-finite evaluation (") + e.what() + ")", ti, idx);
    }
    if (!std::isfinite(v)) throw GradCheckError("non-finite evaluation", ti, idx);
    return v;
  };

  GradCheckResult result;
  std::vector<Tensor<double>> work = point;
  BranchTrace base;
  if (options.single_piece) evaluate(work, 0, 0, &base);
  for (std::size_t ti = 0; ti < work.size(); ++ti) {
    for (std::size_t idx = 0; idx < work[ti].numel(); ++idx) {
      const double orig = work[ti][idx];
      double h = step, numeric = 0.0;
      for (std::size_t attempt = 0;; ++attempt) {
        BranchTrace tp, tm;
        BranchTrace* rp = options.single_piece ? &tp : nullptr;
        BranchTrace* rm = options.single_piece ? &tm : nullptr;
        work[ti][idx] = orig + h;
        const double plus = evaluate(work, ti, idx, rp);
        work[ti][idx] = orig - h;
        const double minus = evaluate(work, ti, idx, rm);
        work[ti][idx] = orig;
        numeric = (plus - minus) / (2.0 * h);
        const bool straddles = options.single_piece && (tp.decisions != base.decisions || tm.decisions != base.decisions);
        if (!straddles || attempt == options.max_narrowing) break;
        if (attempt == 0) ++result.narrowed;
        h /= 10.0;
      }
      const double a = analytic[ti][idx];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = err;
        result.worst_tensor = ti;
        result.worst_index = idx;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace embedmask
