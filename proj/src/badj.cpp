#include "icegen/badj.hpp"

namespace icegen {

LeadClimatology fit_climatology(const SampleSet& train) {
  require(train.hindcast && train.obs && !train.pairs.empty(), ErrorCode::invalid_argument,
          "empty training set");
  const HindcastSet& h = *train.hindcast;
  const ObsSet& o = *train.obs;

  LeadClimatology clim;
  clim.grid = h.grid();
  for (const SamplePair& p : train.pairs) {
    int month = h.init_times()[p.t].month;
    auto key = std::make_pair(month, p.l);
    Field em = ensemble_mean(h, p.t, p.l);
    auto it = clim.model_mean.find(key);
    if (it == clim.model_mean.end()) {
      clim.model_mean[key] = em.values;
      clim.obs_mean[key] = o.at(p.t, p.l);
      clim.years_used[key] = 1;
    } else {
      it->second += em.values;
      clim.obs_mean[key] += o.at(p.t, p.l);
      clim.years_used[key] += 1;
    }
  }
  for (auto& [key, sum] : clim.model_mean) sum /= clim.years_used[key];
  for (auto& [key, sum] : clim.obs_mean) sum /= clim.years_used[key];
  return clim;
}

HindcastSet badj_adjust(const HindcastSet& hindcasts, const LeadClimatology& clim, bool clamp) {
  require(clim.grid && clim.grid->same_domain(*hindcasts.grid()), ErrorCode::grid_mismatch,
          "climatology grid differs from hindcast grid");
  HindcastSet out(hindcasts.grid(), hindcasts.init_times(), hindcasts.members(),
                  hindcasts.leads());
  const GridSpec& g = *hindcasts.grid();
  for (int t = 0; t < hindcasts.n_init(); ++t) {
    int month = hindcasts.init_times()[t].month;
    for (int l = 1; l <= hindcasts.leads(); ++l) {
      auto key = std::make_pair(month, l);
      require(clim.model_mean.count(key) > 0, ErrorCode::invalid_argument,
              "missing climatology stratum for init month " + std::to_string(month) +
                  " lead " + std::to_string(l));
      const Array2D& mc = clim.model_mean.at(key);
      const Array2D& oc = clim.obs_mean.at(key);
      for (int k = 0; k < hindcasts.members(); ++k) {
        Array2D v = hindcasts.at(t, k, l) - mc + oc;
        if (clamp) v = v.min(1.0).max(0.0);
        for (int y = 0; y < g.height; ++y)
          for (int x = 0; x < g.width; ++x)
            if (g.is_land(y, x)) v(y, x) = kLandValue;
        out.at(t, k, l) = std::move(v);
      }
    }
  }
  return out;
}

}  // namespace icegen
