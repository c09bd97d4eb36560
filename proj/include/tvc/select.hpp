#pragma once

// Deviance information criterion over retained states and the rank sweep
// that selects the CP rank minimizing it.

#include "tvc/model.hpp"
#include "tvc/sampler.hpp"

#include <span>
#include <vector>

namespace tvc {

struct DicResult {
  double dic = 0;
  double d_bar = 0;  // mean deviance over retained states
  double p_d = 0;    // effective parameter count, d_bar - deviance at the posterior mean
};

DicResult compute_dic(const Chain& chain, const Dataset& ds);

struct RankSweepRow {
  Index rank = 0;
  double d_bar = 0, p_d = 0, dic = 0;
  double seconds = 0;
};

struct RankSweepResult {
  std::vector<RankSweepRow> rows;
  Index selected_rank = 0;  // ties break toward the smaller rank
};

// One chain per candidate rank, each started from the same seed.
RankSweepResult rank_sweep(const ModelConfig& base, const Dataset& ds,
                           std::span<const Index> ranks, std::uint64_t seed);

}  // namespace tvc
