#pragma once

// Scoring and convergence diagnostics: relative prediction error, Pearson
// correlation (per-voxel-averaged and pooled), Geweke z with Bartlett
// spectral variance.

#include "tvc/tensor.hpp"

#include <span>

namespace tvc {

// ||truth - pred||_F / ||truth||_F over the concatenated tensors.
double rpe(std::span<const DenseTensorD> truth, std::span<const DenseTensorD> pred);
double rpe(const DenseTensorD& truth, const DenseTensorD& pred);

// Voxel-wise RPE (across subjects at each voxel) averaged over voxels with a
// nonzero truth norm; used for coefficient-estimation scoring.
double rpe_per_voxel_avg(std::span<const DenseTensorD> truth, std::span<const DenseTensorD> pred);

enum class PearsonMode { PerVoxelAverage, Pooled };

struct PearsonResult {
  double value = 0;
  Index skipped_voxels = 0;  // voxels with zero variance (per-voxel mode only)
};

PearsonResult pearson(std::span<const DenseTensorD> truth, std::span<const DenseTensorD> pred,
                      PearsonMode mode);

double pearson_pair(std::span<const double> a, std::span<const double> b);

struct GewekeOptions {
  double first = 0.1;
  double last = 0.5;
};

struct GewekeResult {
  double z = 0;
  bool degenerate = false;  // constant trace
};

// z = (mean_first - mean_last) / sqrt(sv_f/n_f + sv_l/n_l) with
// spectral-density-at-zero variances from Bartlett-windowed autocovariances.
GewekeResult geweke_z(std::span<const double> trace, GewekeOptions opt = {});

}  // namespace tvc
