#pragma once

// Complex linear-algebra substrate: density matrices, Hermitian observables,
// Givens-rotation unitaries and the Lindblad dissipator.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qfc/error.hpp"

namespace qfc {

using cplx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using RVector = Eigen::VectorXd;
using RMatrix = Eigen::MatrixXd;

namespace tol {
inline constexpr double hermitian = 1e-12;
inline constexpr double trace = 1e-12;
inline constexpr double psd = -1e-10;
inline constexpr double unitary = 1e-10;
inline constexpr double imag_expectation = 1e-10;
}  // namespace tol

inline CMatrix hermitize(const CMatrix& a) { return 0.5 * (a + a.adjoint()); }

inline double max_abs(const CMatrix& a) {
  return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
}

inline void require_same_dim(const CMatrix& a, const CMatrix& b,
                             const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(where) + ": dimension mismatch (" +
                         std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
}

/// Hermitian operator: measured observable, coupling operator or Hamiltonian.
class Observable {
 public:
  Observable() = default;
  explicit Observable(CMatrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols())
      throw DimensionError("Observable: matrix must be square");
    if (max_abs(m_ - m_.adjoint()) > tol::hermitian)
      throw InvariantError("Observable: matrix is not Hermitian");
  }

  static Observable zero(int dim) {
    return Observable(CMatrix::Zero(dim, dim));
  }
  static Observable diagonal(const std::vector<double>& d) {
    CMatrix m = CMatrix::Zero(static_cast<Eigen::Index>(d.size()),
                              static_cast<Eigen::Index>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = d[i];
    return Observable(std::move(m));
  }

  const CMatrix& matrix() const { return m_; }
  int dim() const { return static_cast<int>(m_.rows()); }
  cplx operator()(int i, int j) const { return m_(i, j); }

 private:
  CMatrix m_;
};

/// Hermitian, unit-trace, positive-semidefinite matrix.
class DensityMatrix {
 public:
  DensityMatrix() = default;
  explicit DensityMatrix(CMatrix m) : m_(std::move(m)) { validate(); }

  /// Hermitizes and renormalizes the trace before validating.
  static DensityMatrix normalized(const CMatrix& m) {
    CMatrix h = hermitize(m);
    const double tr = h.trace().real();
    if (!(tr > 0.0) || !std::isfinite(tr))
      throw InvariantError("DensityMatrix: non-positive trace " +
                           std::to_string(tr));
    return DensityMatrix(CMatrix(h / tr));
  }

  static DensityMatrix pure(const CVector& psi) {
    const CVector v = psi / psi.norm();
    return DensityMatrix(CMatrix(v * v.adjoint()));
  }

  static DensityMatrix diagonal(const std::vector<double>& p) {
    CMatrix m = CMatrix::Zero(static_cast<Eigen::Index>(p.size()),
                              static_cast<Eigen::Index>(p.size()));
    for (std::size_t i = 0; i < p.size(); ++i)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = p[i];
    return DensityMatrix(std::move(m));
  }

  static DensityMatrix maximally_mixed(int dim) {
    return DensityMatrix(CMatrix(CMatrix::Identity(dim, dim) / double(dim)));
  }

  const CMatrix& matrix() const { return m_; }
  int dim() const { return static_cast<int>(m_.rows()); }
  cplx operator()(int i, int j) const { return m_(i, j); }

 private:
  void validate() const {
    if (m_.rows() != m_.cols() || m_.rows() == 0)
      throw DimensionError("DensityMatrix: matrix must be square, non-empty");
    if (!m_.allFinite())
      throw InvariantError("DensityMatrix: non-finite entries");
    if (max_abs(m_ - m_.adjoint()) > tol::hermitian)
      throw InvariantError("DensityMatrix: not Hermitian");
    const cplx tr = m_.trace();
    if (std::abs(tr - 1.0) > tol::trace)
      throw InvariantError("DensityMatrix: trace " + std::to_string(tr.real()) +
                           " != 1");
    Eigen::SelfAdjointEigenSolver<CMatrix> es(hermitize(m_),
                                              Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < tol::psd)
      throw InvariantError("DensityMatrix: negative eigenvalue " +
                           std::to_string(es.eigenvalues().minCoeff()));
  }

  CMatrix m_;
};

enum class DissipatorConvention {
  printed,   ///< 2c†ρc − c†cρ − ρc†c
  standard,  ///< 2cρc† − c†cρ − ρc†c
};

inline CMatrix dissipator(const CMatrix& c, const CMatrix& rho,
                          DissipatorConvention conv =
                              DissipatorConvention::printed) {
  require_same_dim(c, rho, "dissipator");
  const CMatrix cdc = c.adjoint() * c;
  const CMatrix jump = conv == DissipatorConvention::printed
                           ? CMatrix(c.adjoint() * rho * c)
                           : CMatrix(c * rho * c.adjoint());
  return 2.0 * jump - cdc * rho - rho * cdc;
}

inline CMatrix dissipator(const Observable& c, const DensityMatrix& rho,
                          DissipatorConvention conv =
                              DissipatorConvention::printed) {
  return dissipator(c.matrix(), rho.matrix(), conv);
}

/// Re Tr[Xρ]; a non-negligible imaginary part means a non-Hermitian input.
inline double expectation(const CMatrix& x, const CMatrix& rho) {
  require_same_dim(x, rho, "expectation");
  const cplx v = (x * rho).trace();
  if (std::abs(v.imag()) > tol::imag_expectation)
    throw InvariantError("expectation: imaginary part " +
                         std::to_string(v.imag()) +
                         " (non-Hermitian input?)");
  return v.real();
}

inline double expectation(const Observable& x, const DensityMatrix& rho) {
  return expectation(x.matrix(), rho.matrix());
}

// --- unitary parametrization -----------------------------------------------

/// Angles for X = U D U†. U is the product of complex Givens rotations over
/// planes (i,j), i<j, in lexicographic order; each plane contributes
/// (theta, phi), so angles.size() == dim*(dim-1).
struct UnitaryParams {
  std::vector<double> angles;
  std::vector<double> diag;

  int dim() const { return static_cast<int>(diag.size()); }
  static std::size_t angle_count(int dim) {
    return static_cast<std::size_t>(dim) * static_cast<std::size_t>(dim - 1);
  }
  static UnitaryParams identity(std::vector<double> diag) {
    UnitaryParams p;
    p.angles.assign(angle_count(static_cast<int>(diag.size())), 0.0);
    p.diag = std::move(diag);
    return p;
  }
  bool operator==(const UnitaryParams&) const = default;
};

inline std::vector<std::pair<int, int>> givens_planes(int dim) {
  std::vector<std::pair<int, int>> planes;
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j) planes.emplace_back(i, j);
  return planes;
}

inline CMatrix givens(int dim, int i, int j, double theta, double phi) {
  CMatrix g = CMatrix::Identity(dim, dim);
  const double c = std::cos(theta), s = std::sin(theta);
  g(i, i) = c;
  g(j, j) = c;
  g(i, j) = -std::polar(s, phi);
  g(j, i) = std::polar(s, -phi);
  return g;
}

inline CMatrix unitary_from(const UnitaryParams& p) {
  const int n = p.dim();
  if (n < 1) throw DimensionError("unitary_from: empty diagonal");
  if (p.angles.size() != UnitaryParams::angle_count(n))
    throw DimensionError("unitary_from: expected " +
                         std::to_string(UnitaryParams::angle_count(n)) +
                         " angles for dim " + std::to_string(n) + ", got " +
                         std::to_string(p.angles.size()));
  CMatrix u = CMatrix::Identity(n, n);
  std::size_t k = 0;
  for (auto [i, j] : givens_planes(n)) {
    u = u * givens(n, i, j, p.angles[k], p.angles[k + 1]);
    k += 2;
  }
  return u;
}

inline Observable observable_from(const UnitaryParams& p) {
  const CMatrix u = unitary_from(p);
  const int n = p.dim();
  CMatrix d = CMatrix::Zero(n, n);
  for (int i = 0; i < n; ++i) d(i, i) = p.diag[static_cast<std::size_t>(i)];
  return Observable(hermitize(u * d * u.adjoint()));
}

/// Inverse of unitary_from up to a right diagonal phase: returns params whose
/// unitary V satisfies V D V† = U D U† for every diagonal D.
inline UnitaryParams unitary_params_from(const CMatrix& u,
                                         std::vector<double> diag) {
  const int n = static_cast<int>(u.rows());
  if (u.cols() != n || static_cast<int>(diag.size()) != n)
    throw DimensionError("unitary_params_from: dimension mismatch");
  if (max_abs(u.adjoint() * u - CMatrix::Identity(n, n)) > 1e-8)
    throw InvariantError("unitary_params_from: matrix is not unitary");

  UnitaryParams p;
  p.diag = std::move(diag);
  p.angles.assign(UnitaryParams::angle_count(n), 0.0);

  CMatrix w = u;
  std::size_t k = 0;
  for (int i = 0; i < n; ++i) {
    // Rotations in planes (i, i+1..n-1) map column i of w onto e_i.
    const CVector col = w.col(i);
    const double alpha = std::arg(col(i));
    double r = std::abs(col(i));
    std::vector<std::pair<double, double>> tp(static_cast<std::size_t>(n));
    for (int j = i + 1; j < n; ++j) {
      const double aj = std::abs(col(j));
      const double rr = std::hypot(r, aj);
      const double theta = rr > 0.0 ? std::asin(std::clamp(aj / rr, 0.0, 1.0))
                                    : 0.0;
      tp[static_cast<std::size_t>(j)] = {theta, alpha - std::arg(col(j))};
      r = rr;
    }
    CMatrix g = CMatrix::Identity(n, n);
    for (int j = i + 1; j < n; ++j) {
      auto [theta, phi] = tp[static_cast<std::size_t>(j)];
      p.angles[k] = theta;
      p.angles[k + 1] = phi;
      k += 2;
      g = g * givens(n, i, j, theta, phi);
    }
    w = g.adjoint() * w;
  }
  return p;
}

// --- spectral helpers ------------------------------------------------------

struct EigenDecomposition {
  RVector values;   ///< descending
  CMatrix vectors;  ///< columns match values
};

/// Eigen-decomposition with eigenvalues sorted in descending order.
inline EigenDecomposition eig_sorted(const CMatrix& m) {
  Eigen::SelfAdjointEigenSolver<CMatrix> es(hermitize(m));
  if (es.info() != Eigen::Success)
    throw NumericalError("eig_sorted: eigensolver failed");
  const auto n = m.rows();
  // Eigen returns ascending order.
  EigenDecomposition out{RVector(n), CMatrix(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = es.eigenvalues()(n - 1 - i);
    out.vectors.col(i) = es.eigenvectors().col(n - 1 - i);
  }
  return out;
}

inline EigenDecomposition eig_sorted(const DensityMatrix& rho) {
  return eig_sorted(rho.matrix());
}

/// Row-major flattening of a complex matrix into (re, im) real coordinates.
inline RVector flatten(const CMatrix& m) {
  RVector x(2 * m.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      x(k++) = m(i, j).real();
      x(k++) = m(i, j).imag();
    }
  return x;
}

inline CMatrix unflatten(const RVector& x, int dim) {
  if (x.size() != 2 * dim * dim)
    throw DimensionError("unflatten: expected " + std::to_string(2 * dim * dim) +
                         " coordinates");
  CMatrix m(dim, dim);
  Eigen::Index k = 0;
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j, k += 2) m(i, j) = cplx(x(k), x(k + 1));
  return m;
}

}  // namespace qfc
