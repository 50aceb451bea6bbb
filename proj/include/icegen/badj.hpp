#pragma once

#include <map>

#include "icegen/grid.hpp"

namespace icegen {

// Lead-dependent climatological mean adjustment: the benchmark shifts every
// member by (obs climatology - ensemble-mean climatology) for its
// (calendar init month, lead) stratum. Member anomalies are preserved.
struct LeadClimatology {
  // Keyed by (init month 1..12, lead 1..L).
  std::map<std::pair<int, int>, Array2D> model_mean;  // climatology of the ensemble mean
  std::map<std::pair<int, int>, Array2D> obs_mean;
  std::map<std::pair<int, int>, int> years_used;
  GridPtr grid;

  bool has(int month, int lead) const { return model_mean.count({month, lead}) > 0; }
};

// Per-cell means over the training init years, stratified by (init month, lead).
LeadClimatology fit_climatology(const SampleSet& train);

// x' = x - model_clim + obs_clim, optionally clamped to [0, 1] afterwards.
HindcastSet badj_adjust(const HindcastSet& hindcasts, const LeadClimatology& clim,
                        bool clamp = true);

}  // namespace icegen
