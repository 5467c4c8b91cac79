#pragma once

// Control vectors, admissible regions and Markovian feedback protocols.

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qfc/error.hpp"
#include "qfc/qstate.hpp"

namespace qfc {

/// Control inputs u: Hamiltonian coefficients plus the measured observable.
///
/// `alternate` marks a relaxed control: the observable is switched infinitely
/// fast between `obs` and `*alternate` with equal duty, so generators are
/// averaged. It is a discrete option and takes no part in the flat
/// parametrization.
struct ControlVector {
  RVector mu;
  UnitaryParams obs;
  std::optional<UnitaryParams> alternate;

  Eigen::Index flat_size() const {
    return mu.size() + static_cast<Eigen::Index>(obs.angles.size() +
                                                 obs.diag.size());
  }

  RVector flat() const {
    RVector f(flat_size());
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) f(k++) = mu(i);
    for (double a : obs.angles) f(k++) = a;
    for (double d : obs.diag) f(k++) = d;
    return f;
  }

  /// Copy of this vector with the flat coordinates replaced.
  ControlVector with_flat(const RVector& f) const {
    if (f.size() != flat_size())
      throw DimensionError("ControlVector::with_flat: size mismatch");
    ControlVector v = *this;
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < v.mu.size(); ++i) v.mu(i) = f(k++);
    for (double& a : v.obs.angles) a = f(k++);
    for (double& d : v.obs.diag) d = f(k++);
    return v;
  }

  bool is_finite() const {
    if (!flat().allFinite()) return false;
    if (alternate) {
      for (double a : alternate->angles)
        if (!std::isfinite(a)) return false;
      for (double d : alternate->diag)
        if (!std::isfinite(d)) return false;
    }
    return true;
  }

  bool operator==(const ControlVector& o) const {
    return mu.size() == o.mu.size() && (mu.size() == 0 || mu == o.mu) &&
           obs == o.obs && alternate == o.alternate;
  }

  static ControlVector scalar(double v) {
    ControlVector c;
    c.mu = RVector::Constant(1, v);
    return c;
  }
  static ControlVector observable(UnitaryParams p) {
    ControlVector c;
    c.obs = std::move(p);
    return c;
  }
};

/// Componentwise bounds on the flat control coordinates, optionally
/// restricted to a finite list of allowed controls.
struct ControlRegion {
  RVector lower;
  RVector upper;
  std::vector<ControlVector> discrete;
  /// Structure (Hamiltonian count, observable dimension) of members; flat
  /// coordinates in [lower, upper] are mapped back through it.
  ControlVector prototype;

  static ControlRegion box(const ControlVector& lo, const ControlVector& hi) {
    if (lo.flat_size() != hi.flat_size() || lo.mu.size() != hi.mu.size())
      throw DimensionError("ControlRegion::box: bounds have different shapes");
    ControlRegion r{lo.flat(), hi.flat(), {}, lo};
    r.check();
    return r;
  }
  static ControlRegion finite(std::vector<ControlVector> options) {
    if (options.empty())
      throw DomainError("ControlRegion::finite: empty option list");
    RVector lo = options.front().flat(), hi = lo;
    for (const auto& o : options) {
      if (o.flat_size() != lo.size())
        throw DimensionError("ControlRegion::finite: inconsistent options");
      lo = lo.cwiseMin(o.flat());
      hi = hi.cwiseMax(o.flat());
    }
    ControlVector proto = options.front();
    return ControlRegion{lo, hi, std::move(options), std::move(proto)};
  }

  void check() const {
    if (lower.size() != upper.size())
      throw DimensionError("ControlRegion: bound sizes differ");
    for (Eigen::Index i = 0; i < lower.size(); ++i)
      if (!(lower(i) <= upper(i)))
        throw InvariantError("ControlRegion: lower > upper at coordinate " +
                             std::to_string(i));
  }

  bool is_discrete() const { return !discrete.empty(); }

  ControlVector at(const RVector& flat) const {
    return prototype.with_flat(clamp(flat));
  }

  bool contains(const ControlVector& v, double eps = 1e-12) const {
    if (!v.is_finite()) return false;
    if (is_discrete())
      return std::any_of(discrete.begin(), discrete.end(),
                         [&](const ControlVector& o) {
                           return o.flat_size() == v.flat_size() &&
                                  (o.flat() - v.flat()).cwiseAbs().maxCoeff() <=
                                      eps &&
                                  o.alternate.has_value() ==
                                      v.alternate.has_value();
                         });
    if (v.flat_size() != lower.size()) return false;
    const RVector f = v.flat();
    for (Eigen::Index i = 0; i < f.size(); ++i)
      if (f(i) < lower(i) - eps || f(i) > upper(i) + eps) return false;
    return true;
  }

  RVector clamp(const RVector& f) const {
    return f.cwiseMax(lower).cwiseMin(upper);
  }
};

/// u(x, t): constant, piecewise-constant in time, or a Markovian state
/// feedback rule. Evaluation is a pure function of (t, state).
template <class State>
class ControlProtocol {
 public:
  enum class Kind { constant, time_switching, state_feedback };
  using Rule = std::function<ControlVector(double, const State&)>;

  static ControlProtocol constant(ControlVector v) {
    ControlProtocol p;
    p.kind_ = Kind::constant;
    p.name_ = "constant";
    p.segments_.push_back(std::move(v));
    return p;
  }

  /// controls[i] applies on [times[i-1], times[i]); the new control holds at
  /// the switch instant itself.
  static ControlProtocol switching(std::vector<double> times,
                                   std::vector<ControlVector> controls) {
    if (controls.size() != times.size() + 1)
      throw DomainError(
          "ControlProtocol::switching: need one more control than switch "
          "times");
    if (!std::is_sorted(times.begin(), times.end()))
      throw DomainError("ControlProtocol::switching: switch times unsorted");
    ControlProtocol p;
    p.kind_ = Kind::time_switching;
    p.name_ = "time-switching";
    p.switch_times_ = std::move(times);
    p.segments_ = std::move(controls);
    return p;
  }

  static ControlProtocol feedback(std::string name, Rule rule) {
    ControlProtocol p;
    p.kind_ = Kind::state_feedback;
    p.name_ = std::move(name);
    p.rule_ = std::move(rule);
    return p;
  }

  ControlVector operator()(double t, const State& x) const {
    switch (kind_) {
      case Kind::constant:
        return segments_.front();
      case Kind::time_switching: {
        const auto it =
            std::upper_bound(switch_times_.begin(), switch_times_.end(), t);
        return segments_[static_cast<std::size_t>(it - switch_times_.begin())];
      }
      case Kind::state_feedback:
        return rule_(t, x);
    }
    throw Error("ControlProtocol: corrupt kind");
  }

  Kind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  const std::vector<double>& switch_times() const { return switch_times_; }
  const std::vector<ControlVector>& segments() const { return segments_; }

 private:
  Kind kind_ = Kind::constant;
  std::string name_;
  std::vector<double> switch_times_;
  std::vector<ControlVector> segments_;
  Rule rule_;
};

/// Evaluates the protocol and enforces the declared region.
template <class State>
ControlVector evaluate_protocol(const ControlProtocol<State>& p, double t,
                                const State& x, const ControlRegion& region) {
  ControlVector v = p(t, x);
  if (!region.contains(v, 1e-9))
    throw InvariantError("protocol '" + p.name() + "' left its region at t=" +
                         std::to_string(t));
  return v;
}

/// True iff every sampled evaluation lies in the region. Samples are spread
/// uniformly over [0, horizon], and every switch instant plus each segment
/// midpoint is included for time-switching protocols.
template <class State, class Sampler>
bool validate_region(const ControlProtocol<State>& p,
                     const ControlRegion& region, int samples, double horizon,
                     Sampler&& state_at) {
  if (samples < 1) throw DomainError("validate_region: samples must be >= 1");
  std::vector<double> ts;
  for (int i = 0; i < samples; ++i)
    ts.push_back(samples == 1 ? 0.0 : horizon * i / (samples - 1));
  double prev = 0.0;
  for (double s : p.switch_times()) {
    ts.push_back(s);
    ts.push_back(0.5 * (prev + s));
    prev = s;
  }
  ts.push_back(0.5 * (prev + horizon));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const State x = state_at(static_cast<int>(i), ts[i]);
    if (!region.contains(p(ts[i], x), 1e-9)) return false;
  }
  return true;
}

}  // namespace qfc
