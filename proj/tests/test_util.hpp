#pragma once

#include <random>

#include "qfc/qstate.hpp"

namespace testutil {

inline qfc::CMatrix random_complex(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  qfc::CMatrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = qfc::cplx(g(rng), g(rng));
  return m;
}

inline qfc::CMatrix random_hermitian(int n, std::mt19937_64& rng) {
  return qfc::hermitize(random_complex(n, rng));
}

/// Full-rank density matrix from a Wishart-like draw.
inline qfc::DensityMatrix random_density(int n, std::mt19937_64& rng) {
  const qfc::CMatrix g = random_complex(n, rng);
  return qfc::DensityMatrix::normalized(g * g.adjoint() +
                                        0.05 * qfc::CMatrix::Identity(n, n));
}

}  // namespace testutil
