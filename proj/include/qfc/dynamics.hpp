#pragma once

// Generic controlled Ito dynamics dx = A(t,x,u) dt + B(t,x,u) dW in real
// coordinates, shared by the HJB, cost and DP layers.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "qfc/control.hpp"
#include "qfc/qstate.hpp"

namespace qfc {

struct Dynamics {
  using Drift = std::function<RVector(double, const RVector&,
                                      const ControlVector&)>;
  using Diffusion = std::function<RMatrix(double, const RVector&,
                                          const ControlVector&)>;
  using Projection = std::function<RVector(const RVector&)>;

  int state_dim = 0;
  int noise_dim = 0;
  Drift drift;
  /// state_dim x noise_dim; one column per independent Wiener process.
  /// Left empty for deterministic dynamics.
  Diffusion diffusion;
  /// Optional map applied after each simulated step (e.g. relabelling
  /// sorted eigenvalues); identity when empty.
  Projection project;

  RVector a(double t, const RVector& x, const ControlVector& v) const {
    RVector out = drift(t, x, v);
    if (out.size() != state_dim)
      throw DimensionError("Dynamics: drift has wrong dimension");
    return out;
  }
  RMatrix b(double t, const RVector& x, const ControlVector& v) const {
    if (!diffusion || noise_dim == 0) return RMatrix::Zero(state_dim, 0);
    RMatrix out = diffusion(t, x, v);
    if (out.rows() != state_dim || out.cols() != noise_dim)
      throw DimensionError("Dynamics: diffusion has wrong shape");
    return out;
  }
};

using RunningCost =
    std::function<double(double, const RVector&, const ControlVector&)>;
using TerminalCost = std::function<double(const RVector&)>;

inline RunningCost zero_running_cost() {
  return [](double, const RVector&, const ControlVector&) { return 0.0; };
}

}  // namespace qfc
