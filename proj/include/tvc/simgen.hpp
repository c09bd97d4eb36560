#pragma once

// Synthetic benchmark data: four outcome scenarios (patch GP map, voxel GP
// map, fixed log map, linear map, plus the sine-of-patch-sum variant), four
// input strategies (normal, uniform, wavelet-synthesized, smooth GP field)
// and two slope constructions (CP, pyramid).  Generation is a pure function
// of the design, so datasets regenerate bit for bit from their manifests.

#include "tvc/model.hpp"
#include "tvc/tensor.hpp"

#include <string>
#include <vector>

namespace tvc {

enum class Scenario {
  PatchGP = 1,      // GP map over the voxel-centered input patch
  VoxelGP = 2,      // GP map over the center value (patch of size 1)
  LogMap = 3,       // log(1 + x^2)
  Linear = 4,       // identity map
  PatchSumSine = 5  // sin of the patch sum ("3alt")
};

Scenario scenario_from_string(const std::string& s);
std::string scenario_to_string(Scenario s);

struct SimDesign {
  Scenario scenario = Scenario::PatchGP;
  char strategy = 'a';  // a: N(0,1)  b: U(0,1)  c: wavelet synthesis  d: smooth GP field
  int construction = 1; // 1: CP slope  2: pyramid slope
  Shape shape = {8, 8, 8};
  Index n_train = 100;
  Index n_test = 20;
  Index gen_rank = 2;
  double noise_sd = 0.1;
  Index patch = 3;

  // generator scales; the paper-style tables depend on these, so they are
  // explicit design fields recorded in every manifest
  double intercept_margin_sd = 0.5;
  double slope_margin_sd = 1.0;
  double pyramid_value = 3.0;
  double map_gp_var = 1.0;          // variance of the generating map GP
  double lengthscale_factor = 0.55; // map GP inverse-lengthscale = factor / mean patch distance^2

  std::uint64_t seed = 0;

  void validate() const;
};

struct SimDataset {
  Dataset data;
  DenseTensorD intercept_true;
  DenseTensorD slope_true;
  std::vector<DenseTensorD> effect_true;  // slope ⊙ map, per subject
  double map_phi2 = 0;                    // realized map-GP inverse-lengthscale (scenarios 1-2)
};

SimDataset generate(const SimDesign& d);

// Inputs only (strategy a-d); one tensor per subject.
std::vector<DenseTensorD> gen_inputs(char strategy, const Shape& shape, Index n, Index patch_for_wavelet_check,
                                     std::uint64_t seed);

// Nonlinear-map values per (subject, voxel) for the given inputs; scenarios
// 1 and 2 share the GP path (2 is the patch-size-1 case).  Returns the
// realized map-GP inverse-lengthscale through phi2_out (0 for fixed maps).
Eigen::MatrixXd map_values(const SimDesign& d, const std::vector<DenseTensorD>& inputs,
                           double& phi2_out);

// Slope tensor under the pyramid construction; every voxel is `value` or 0.
DenseTensorD pyramid_coefficients(const Shape& shape, double value);

// Voxel count of a D-simplex with base edge b: C(b + D - 1, D).
Index pyramid_voxel_count(Index base, Index dims);

}  // namespace tvc
