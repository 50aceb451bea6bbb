#pragma once

#include <array>
#include <memory>
#include <vector>

#include "icegen/common.hpp"

namespace icegen {

// Spatial domain shared by every dataset: cell areas and the land mask.
// Immutable after construction; land cells are excluded from all statistics.
struct GridSpec {
  int height = 0;
  int width = 0;
  Array2D cell_area;    // > 0 at ocean cells
  MaskArray land_mask;  // true = land

  GridSpec() = default;
  GridSpec(int h, int w, Array2D area, MaskArray land);

  bool is_land(int y, int x) const { return land_mask(y, x); }
  int ocean_count() const { return ocean_count_; }
  Scalar ocean_area() const { return ocean_area_; }

  // Uniform unit-area all-ocean grid, the default for small tests.
  static std::shared_ptr<const GridSpec> uniform(int h, int w);

  bool same_domain(const GridSpec& other) const;

 private:
  int ocean_count_ = 0;
  Scalar ocean_area_ = 0.0;
};

using GridPtr = std::shared_ptr<const GridSpec>;

// A single 2-D array bound to its grid. Land cells carry kLandValue.
struct Field {
  GridPtr grid;
  Array2D values;

  Field() = default;
  Field(GridPtr g, Array2D v) : grid(std::move(g)), values(std::move(v)) {}

  // Constant at ocean cells, sentinel at land.
  static Field constant(GridPtr g, Scalar value);
};

// Calendar timestamp; month in 1..12.
struct TimeIndex {
  int year = 0;
  int month = 1;

  int linear() const { return year * 12 + (month - 1); }
  static TimeIndex from_linear(int m) { return {m >= 0 ? m / 12 : -((11 - m) / 12), ((m % 12) + 12) % 12 + 1}; }
  bool operator==(const TimeIndex&) const = default;
};

// Ensemble hindcasts indexed by (init time t, member k, lead month l), lead in 1..L.
// The index space is rectangular and all fields share one grid.
class HindcastSet {
 public:
  HindcastSet() = default;
  HindcastSet(GridPtr grid, std::vector<TimeIndex> init_times, int members, int leads);

  const GridPtr& grid() const { return grid_; }
  const std::vector<TimeIndex>& init_times() const { return init_times_; }
  int n_init() const { return static_cast<int>(init_times_.size()); }
  int members() const { return members_; }
  int leads() const { return leads_; }

  const Array2D& at(int t, int k, int l) const { return fields_[index(t, k, l)]; }
  Array2D& at(int t, int k, int l) { return fields_[index(t, k, l)]; }

  TimeIndex valid_time(int t, int l) const {
    return TimeIndex::from_linear(init_times_[t].linear() + l);
  }

 private:
  std::size_t index(int t, int k, int l) const;

  GridPtr grid_;
  std::vector<TimeIndex> init_times_;
  int members_ = 0;
  int leads_ = 0;
  std::vector<Array2D> fields_;
};

// Observations re-arranged to the hindcast layout: y_{tl} is the observed
// field valid at init time t plus l months.
class ObsSet {
 public:
  ObsSet() = default;
  ObsSet(GridPtr grid, std::vector<TimeIndex> init_times, int leads);

  const GridPtr& grid() const { return grid_; }
  const std::vector<TimeIndex>& init_times() const { return init_times_; }
  int n_init() const { return static_cast<int>(init_times_.size()); }
  int leads() const { return leads_; }

  const Array2D& at(int t, int l) const { return fields_[index(t, l)]; }
  Array2D& at(int t, int l) { return fields_[index(t, l)]; }

 private:
  std::size_t index(int t, int l) const;

  GridPtr grid_;
  std::vector<TimeIndex> init_times_;
  int leads_ = 0;
  std::vector<Array2D> fields_;
};

// Inclusive range of linear months.
struct SplitRange {
  int first = 0;
  int last = -1;  // empty when last < first

  bool empty() const { return last < first; }
  bool contains(int linear_month) const { return linear_month >= first && linear_month <= last; }
};

struct SplitSpec {
  SplitRange train;
  SplitRange val;
  SplitRange test;
};

struct SamplePair {
  int t = 0;  // index into init_times
  int l = 1;  // lead month, 1..L
  bool operator==(const SamplePair&) const = default;
};

// A non-rectangular view over aligned (hindcast, obs) pairs; the temporal
// split produces these because leakage trimming drops individual (t, l).
struct SampleSet {
  const HindcastSet* hindcast = nullptr;
  const ObsSet* obs = nullptr;
  std::vector<SamplePair> pairs;

  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }
};

// Per-ocean-cell mean over members; land cells sentinel.
Field ensemble_mean(const HindcastSet& h, int t, int l);

// Sum(values * area) / sum(area) over ocean cells.
Scalar area_weighted_mean(const Field& f);
Scalar area_weighted_mean(const GridSpec& grid, const Array2D& values);

// True exactly where lo <= obs <= hi at ocean cells; land always false.
MaskArray marginal_mask(const Field& obs, Scalar lo, Scalar hi);
MaskArray marginal_mask(const GridSpec& grid, const Array2D& obs, Scalar lo, Scalar hi);

// Split (t, l) pairs by init time; a pair whose valid time t+l falls inside a
// later split's range is dropped from the earlier split.
std::array<SampleSet, 3> temporal_split(const HindcastSet& h, const ObsSet& o,
                                        const SplitSpec& s);

}  // namespace icegen
