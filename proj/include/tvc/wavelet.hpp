#pragma once

// Separable multilevel discrete wavelet transform with the 8-tap
// least-asymmetric Daubechies filter (four vanishing moments) and periodic
// boundaries, so the analysis/synthesis pair reconstructs exactly.

#include "tvc/tensor.hpp"

#include <array>
#include <stdexcept>

namespace tvc {

// Least-asymmetric scaling filter, four vanishing moments (8 taps).
inline constexpr std::array<double, 8> kSym4Lo = {
    -0.07576571478927333, -0.02963552764599851, 0.49761866763201545, 0.8037387518059161,
    0.29785779560527736,  -0.09921954357684722, -0.012603967262037833, 0.0322231006040427};

inline std::array<double, 8> sym4_hi() {
  std::array<double, 8> hi{};
  for (std::size_t m = 0; m < 8; ++m)
    hi[m] = ((m % 2 == 0) ? 1.0 : -1.0) * kSym4Lo[7 - m];
  return hi;
}

// In-place layout: after `levels` steps the approximation cube occupies the
// low p_d / 2^levels indices along every mode, finer detail bands fill the
// rest.  Each extent must be divisible by 2^levels.
void dwt_forward(DenseTensorD& x, int levels);
void dwt_inverse(DenseTensorD& x, int levels);

}  // namespace tvc
