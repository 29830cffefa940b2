#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aspectrec/param_store.hpp"
#include "aspectrec/tape.hpp"

namespace aspectrec {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  double tol = 0.0;

  bool pass() const { return max_rel_err <= tol; }
};

// Relative error with an absolute floor: elements where both gradients are
// below the floor compare as equal, so finite-difference noise on true zeros
// does not dominate the report.
inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max(std::abs(analytic), std::abs(numeric));
  if (denom < 1e-6) return 0.0;
  return std::abs(analytic - numeric) / denom;
}

// Central-difference check of the tape gradients for every trainable
// parameter in the store. `build_loss` must be deterministic: it is invoked
// repeatedly on fresh tapes while parameter elements are nudged in place.
template <class S>
GradCheckReport grad_check(
    ParamStore<S>& store,
    const std::function<typename Tape<S>::Id(Tape<S>&)>& build_loss,
    double step, double tol) {
  Gradients<S> analytic(store.count());
  {
    Tape<S> tape(store);
    const auto loss = build_loss(tape);
    tape.backward(loss);
    tape.export_grads(analytic);
  }
  const auto eval_loss = [&]() -> double {
    Tape<S> tape(store);
    const auto loss = build_loss(tape);
    return static_cast<double>(tape.value(loss).values[0]);
  };

  GradCheckReport report;
  report.tol = tol;
  for (int id : store.trainable_ids()) {
    GradCheckEntry entry;
    entry.name = store.param(id).name;
    Tensor<S>& w = store.value(id);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const S saved = w[i];
      w[i] = saved + static_cast<S>(step);
      const double up = eval_loss();
      w[i] = saved - static_cast<S>(step);
      const double down = eval_loss();
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a =
          analytic.has(id) ? static_cast<double>(analytic.get(id)[i]) : 0.0;
      const double err = grad_rel_err(a, numeric);
      if (err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = i;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace aspectrec
