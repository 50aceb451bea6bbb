#include "icegen/grid.hpp"

#include <cmath>
#include <cstdio>

namespace icegen {

std::string format_sig9(Scalar v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

GridSpec::GridSpec(int h, int w, Array2D area, MaskArray land)
    : height(h), width(w), cell_area(std::move(area)), land_mask(std::move(land)) {
  require(h > 0 && w > 0, ErrorCode::invalid_argument, "grid dimensions must be positive");
  require(cell_area.rows() == h && cell_area.cols() == w, ErrorCode::invalid_argument,
          "cell_area shape mismatch");
  require(land_mask.rows() == h && land_mask.cols() == w, ErrorCode::invalid_argument,
          "land_mask shape mismatch");
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!land_mask(y, x)) {
        require(cell_area(y, x) > 0.0, ErrorCode::invalid_argument,
                "cell_area must be positive at ocean cells");
        ocean_count_ += 1;
        ocean_area_ += cell_area(y, x);
      }
    }
  }
}

std::shared_ptr<const GridSpec> GridSpec::uniform(int h, int w) {
  Array2D area = Array2D::Constant(h, w, 1.0);
  MaskArray land = MaskArray::Constant(h, w, false);
  return std::make_shared<const GridSpec>(h, w, std::move(area), std::move(land));
}

bool GridSpec::same_domain(const GridSpec& other) const {
  if (height != other.height || width != other.width) return false;
  if ((land_mask != other.land_mask).any()) return false;
  return (cell_area == other.cell_area).all();
}

Field Field::constant(GridPtr g, Scalar value) {
  Array2D v = Array2D::Constant(g->height, g->width, value);
  for (int y = 0; y < g->height; ++y)
    for (int x = 0; x < g->width; ++x)
      if (g->is_land(y, x)) v(y, x) = kLandValue;
  return Field(std::move(g), std::move(v));
}

HindcastSet::HindcastSet(GridPtr grid, std::vector<TimeIndex> init_times, int members, int leads)
    : grid_(std::move(grid)), init_times_(std::move(init_times)), members_(members), leads_(leads) {
  require(grid_ != nullptr, ErrorCode::invalid_argument, "hindcast grid is null");
  require(!init_times_.empty(), ErrorCode::invalid_argument, "hindcast needs init times");
  require(members_ > 0, ErrorCode::invalid_argument, "hindcast needs at least one member");
  require(leads_ > 0, ErrorCode::invalid_argument, "hindcast needs at least one lead");
  fields_.assign(init_times_.size() * static_cast<std::size_t>(members_) * leads_,
                 Array2D::Zero(grid_->height, grid_->width));
}

std::size_t HindcastSet::index(int t, int k, int l) const {
  require(t >= 0 && t < n_init(), ErrorCode::invalid_argument, "init index out of range");
  require(k >= 0 && k < members_, ErrorCode::invalid_argument, "member index out of range");
  require(l >= 1 && l <= leads_, ErrorCode::invalid_argument, "lead index out of range");
  return (static_cast<std::size_t>(t) * members_ + k) * leads_ + (l - 1);
}

ObsSet::ObsSet(GridPtr grid, std::vector<TimeIndex> init_times, int leads)
    : grid_(std::move(grid)), init_times_(std::move(init_times)), leads_(leads) {
  require(grid_ != nullptr, ErrorCode::invalid_argument, "obs grid is null");
  require(!init_times_.empty(), ErrorCode::invalid_argument, "obs needs init times");
  require(leads_ > 0, ErrorCode::invalid_argument, "obs needs at least one lead");
  fields_.assign(init_times_.size() * static_cast<std::size_t>(leads_),
                 Array2D::Zero(grid_->height, grid_->width));
}

std::size_t ObsSet::index(int t, int l) const {
  require(t >= 0 && t < n_init(), ErrorCode::invalid_argument, "init index out of range");
  require(l >= 1 && l <= leads_, ErrorCode::invalid_argument, "lead index out of range");
  return static_cast<std::size_t>(t) * leads_ + (l - 1);
}

Field ensemble_mean(const HindcastSet& h, int t, int l) {
  const GridSpec& g = *h.grid();
  Array2D out = Array2D::Zero(g.height, g.width);
  for (int k = 0; k < h.members(); ++k) out += h.at(t, k, l);
  out /= static_cast<Scalar>(h.members());
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      if (g.is_land(y, x)) out(y, x) = kLandValue;
  return Field(h.grid(), std::move(out));
}

Scalar area_weighted_mean(const GridSpec& grid, const Array2D& values) {
  require(grid.ocean_count() > 0, ErrorCode::invalid_argument, "all-land grid");
  Scalar num = 0.0, den = 0.0;
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      if (grid.is_land(y, x)) continue;
      num += values(y, x) * grid.cell_area(y, x);
      den += grid.cell_area(y, x);
    }
  }
  return num / den;
}

Scalar area_weighted_mean(const Field& f) { return area_weighted_mean(*f.grid, f.values); }

MaskArray marginal_mask(const GridSpec& grid, const Array2D& obs, Scalar lo, Scalar hi) {
  require(lo >= 0.0 && lo < hi && hi <= 1.0, ErrorCode::invalid_argument,
          "marginal mask bounds must satisfy 0 <= lo < hi <= 1");
  MaskArray out = MaskArray::Constant(grid.height, grid.width, false);
  for (int y = 0; y < grid.height; ++y)
    for (int x = 0; x < grid.width; ++x)
      if (!grid.is_land(y, x)) out(y, x) = obs(y, x) >= lo && obs(y, x) <= hi;
  return out;
}

MaskArray marginal_mask(const Field& obs, Scalar lo, Scalar hi) {
  return marginal_mask(*obs.grid, obs.values, lo, hi);
}

std::array<SampleSet, 3> temporal_split(const HindcastSet& h, const ObsSet& o,
                                        const SplitSpec& s) {
  require(h.n_init() == o.n_init() && h.leads() == o.leads(), ErrorCode::grid_mismatch,
          "hindcast and obs index spaces differ");
  const SplitRange ranges[3] = {s.train, s.val, s.test};
  for (int a = 0; a < 3; ++a) {
    for (int b = a + 1; b < 3; ++b) {
      if (ranges[a].empty() || ranges[b].empty()) continue;
      require(ranges[a].last < ranges[b].first, ErrorCode::invalid_argument,
              "split ranges must be disjoint and ordered train < val < test");
    }
  }

  std::array<SampleSet, 3> out;
  for (auto& set : out) {
    set.hindcast = &h;
    set.obs = &o;
  }
  for (int t = 0; t < h.n_init(); ++t) {
    int init_lin = h.init_times()[t].linear();
    int split = -1;
    for (int i = 0; i < 3; ++i)
      if (ranges[i].contains(init_lin)) split = i;
    if (split < 0) continue;
    for (int l = 1; l <= h.leads(); ++l) {
      int valid_lin = init_lin + l;
      bool leaks = false;
      for (int later = split + 1; later < 3; ++later)
        if (ranges[later].contains(valid_lin)) leaks = true;
      if (!leaks) out[split].pairs.push_back({t, l});
    }
  }
  return out;
}

}  // namespace icegen
