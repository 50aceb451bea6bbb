#include "icegen/synth.hpp"

#include <algorithm>
#include <cmath>

#include "icegen/gridpack.hpp"

namespace icegen {

namespace {

std::vector<Scalar> blur_kernel(Scalar sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<Scalar> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i)
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  return k;
}

Array2D blur_1d(const Array2D& a, const std::vector<Scalar>& k, bool rows) {
  int radius = (static_cast<int>(k.size()) - 1) / 2;
  int h = static_cast<int>(a.rows()), w = static_cast<int>(a.cols());
  Array2D out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Scalar s = 0.0, wsum = 0.0;
      for (int d = -radius; d <= radius; ++d) {
        int yy = rows ? y + d : y;
        int xx = rows ? x : x + d;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        s += k[d + radius] * a(yy, xx);
        wsum += k[d + radius];
      }
      out(y, x) = s / wsum;
    }
  }
  return out;
}

Scalar sigmoid(Scalar x) { return 1.0 / (1.0 + std::exp(-x)); }

// Everything deterministic the two generators share, derived from cfg.seed.
struct Latents {
  GridPtr grid;
  Array2D radius;        // normalized distance from the pole
  Array2D texture;       // fixed fine-scale climatological pattern
  Array2D bias_pattern;  // spatial shape of b(m, l)
  std::vector<Array2D> anomaly_large;  // per linear month 0..months_total-1
  std::vector<Array2D> anomaly_fine;
  int months_total = 0;

  Scalar edge_logit(int month, int y, int x, const SynthConfig& cfg) const {
    Scalar r0 = cfg.edge_radius +
                cfg.seasonal_amplitude * std::cos(2.0 * M_PI * (month - 3) / 12.0);
    return cfg.edge_sharpness * (r0 - radius(y, x));
  }

  // Pre-squash truth composite at a valid linear month.
  Scalar truth_logit(int linear_month, int y, int x, const SynthConfig& cfg) const {
    TimeIndex ti = TimeIndex::from_linear(linear_month);
    Scalar yr = ti.year - 0.5 * cfg.years;
    return edge_logit(ti.month, y, x, cfg) + cfg.trend_per_year * yr +
           cfg.texture_amplitude * texture(y, x) + anomaly_large[linear_month](y, x) +
           anomaly_fine[linear_month](y, x);
  }
};

Latents make_latents(const SynthConfig& cfg) {
  require(cfg.years > 0 && cfg.members > 0 && cfg.leads > 0, ErrorCode::invalid_argument,
          "synth config needs positive years/members/leads");
  require(cfg.deflation > 0.0 && cfg.deflation <= 1.0, ErrorCode::invalid_argument,
          "deflation must be in (0, 1]");

  Latents lat;
  int h = cfg.height, w = cfg.width;
  lat.months_total = cfg.years * 12 + cfg.leads;

  lat.radius = Array2D(h, w);
  Scalar cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);
  Scalar rmax = 0.5 * std::min(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      lat.radius(y, x) = std::hypot(y - cy, x - cx) / rmax;

  // Land: outer-ring continent with ragged coast plus island bumps.
  RandomStream land_rng = RandomStream::from(cfg.seed, {fnv1a64("land")});
  Array2D score = lat.radius + 0.12 * correlated_field(h, w, 3.0, land_rng);
  for (int i = 0; i < cfg.islands; ++i) {
    Scalar iy = land_rng.uniform(0.15 * h, 0.85 * h);
    Scalar ix = land_rng.uniform(0.15 * w, 0.85 * w);
    Scalar rad = land_rng.uniform(1.5, 3.5);
    // Islands only outside the permanent pack so the pole stays ocean.
    if (std::hypot(iy - cy, ix - cx) / rmax < 0.35) continue;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        Scalar d2 = (y - iy) * (y - iy) + (x - ix) * (x - ix);
        score(y, x) += 1.5 * std::exp(-0.5 * d2 / (rad * rad));
      }
  }
  std::vector<Scalar> sorted(score.data(), score.data() + score.size());
  std::sort(sorted.begin(), sorted.end());
  int n_ocean = static_cast<int>(std::lround((1.0 - cfg.land_fraction) * h * w));
  n_ocean = std::clamp(n_ocean, 1, h * w);
  Scalar thresh = sorted[std::min<std::size_t>(n_ocean, sorted.size() - 1)];

  MaskArray land(h, w);
  Array2D area(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      land(y, x) = score(y, x) >= thresh && n_ocean < h * w;
      area(y, x) = 1.0 + 0.3 * (1.0 - lat.radius(y, x));  // polar cells slightly larger
    }
  lat.grid = std::make_shared<const GridSpec>(h, w, std::move(area), std::move(land));

  RandomStream tex_rng = RandomStream::from(cfg.seed, {fnv1a64("texture")});
  lat.texture = correlated_field(h, w, cfg.fine_length, tex_rng);
  RandomStream bias_rng = RandomStream::from(cfg.seed, {fnv1a64("bias")});
  lat.bias_pattern = correlated_field(h, w, cfg.correlation_length, bias_rng);

  auto ar1_series = [&](const char* tag, Scalar length, Scalar sigma, Scalar rho) {
    std::vector<Array2D> series;
    series.reserve(lat.months_total);
    for (int m = 0; m < lat.months_total; ++m) {
      RandomStream rng = RandomStream::from(cfg.seed, {fnv1a64(tag), static_cast<std::uint64_t>(m)});
      Array2D innov = correlated_field(h, w, length, rng);
      if (m == 0) {
        series.push_back(sigma * innov);
      } else {
        series.push_back(rho * series.back() + std::sqrt(1.0 - rho * rho) * sigma * innov);
      }
    }
    return series;
  };
  lat.anomaly_large = ar1_series("anomaly_large", cfg.correlation_length, cfg.sigma_large,
                                 cfg.rho_large);
  lat.anomaly_fine = ar1_series("anomaly_fine", cfg.fine_length, cfg.sigma_fine, cfg.rho_fine);
  return lat;
}

Scalar bias_logit(const SynthConfig& cfg, const Latents& lat, int init_month, int lead, int y,
                  int x) {
  Scalar seasonal = 0.5 + 0.5 * std::cos(2.0 * M_PI * (init_month - 1) / 12.0);
  Scalar lead_ramp = 0.5 + 0.5 * static_cast<Scalar>(lead) / cfg.leads;
  return cfg.bias_amplitude * seasonal * lead_ramp * lat.bias_pattern(y, x);
}

}  // namespace

Array2D gaussian_blur(const Array2D& a, Scalar sigma) {
  if (sigma <= 0.0) return a;
  auto k = blur_kernel(sigma);
  return blur_1d(blur_1d(a, k, true), k, false);
}

Array2D correlated_field(int h, int w, Scalar length, RandomStream& rng) {
  Array2D white(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) white(y, x) = rng.normal();
  if (length <= 0.0) return white;

  Scalar sigma = 0.5 * length;
  auto k = blur_kernel(sigma);
  int radius = (static_cast<int>(k.size()) - 1) / 2;

  // Blur without the normalization that blur_1d applies, then rescale each
  // cell by the exact std of its in-bounds tap sum so variance is 1 everywhere.
  auto pass = [&](const Array2D& in, bool rows, Array2D& wsum2) {
    Array2D out(h, w);
    Array2D w2(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        Scalar s = 0.0, sw2 = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          int yy = rows ? y + d : y;
          int xx = rows ? x : x + d;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          s += k[d + radius] * in(yy, xx);
          sw2 += k[d + radius] * k[d + radius];
        }
        out(y, x) = s;
        w2(y, x) = sw2;
      }
    wsum2 = w2;
    return out;
  };

  Array2D w2rows(h, w), w2cols(h, w);
  Array2D blurred = pass(white, true, w2rows);
  blurred = pass(blurred, false, w2cols);
  // Separable taps: variance multiplies across the two passes.
  return blurred / (w2rows * w2cols).sqrt();
}

ObsSet generate_truth(const SynthConfig& cfg) {
  Latents lat = make_latents(cfg);
  const GridSpec& g = *lat.grid;

  std::vector<TimeIndex> init_times;
  for (int yr = 0; yr < cfg.years; ++yr)
    for (int m = 1; m <= 12; ++m) init_times.push_back({yr, m});

  ObsSet obs(lat.grid, init_times, cfg.leads);
  std::vector<Array2D> truth_by_month(lat.months_total);
  for (int lm = 0; lm < lat.months_total; ++lm) {
    Array2D f(g.height, g.width);
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        if (g.is_land(y, x)) {
          f(y, x) = kLandValue;
        } else {
          f(y, x) = quantize_f32(sigmoid(lat.truth_logit(lm, y, x, cfg)));
        }
      }
    truth_by_month[lm] = std::move(f);
  }
  for (int t = 0; t < obs.n_init(); ++t)
    for (int l = 1; l <= cfg.leads; ++l)
      obs.at(t, l) = truth_by_month[init_times[t].linear() + l];
  return obs;
}

HindcastSet generate_hindcast(const ObsSet& truth, const SynthConfig& cfg) {
  Latents lat = make_latents(cfg);
  require(truth.grid()->same_domain(*lat.grid), ErrorCode::grid_mismatch,
          "truth was generated with a different config");
  const GridSpec& g = *lat.grid;
  int h = g.height, w = g.width;

  HindcastSet hind(lat.grid, truth.init_times(), cfg.members, cfg.leads);

  // Model-resolution (smoothed) versions of the shared deterministic parts.
  std::vector<Array2D> clim_obs(13), clim_model(13);
  for (int m = 1; m <= 12; ++m) {
    Array2D c(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        c(y, x) = lat.edge_logit(m, y, x, cfg) + cfg.texture_amplitude * lat.texture(y, x);
    clim_obs[m] = c;
    clim_model[m] = gaussian_blur(c, cfg.model_smooth_sigma);
  }
  std::vector<Array2D> anomaly_model(truth.n_init());
  for (int t = 0; t < truth.n_init(); ++t)
    anomaly_model[t] =
        gaussian_blur(lat.anomaly_large[truth.init_times()[t].linear()], cfg.model_smooth_sigma);

  for (int t = 0; t < truth.n_init(); ++t) {
    TimeIndex init = truth.init_times()[t];
    for (int l = 1; l <= cfg.leads; ++l) {
      TimeIndex valid = TimeIndex::from_linear(init.linear() + l);
      Scalar yr = valid.year - 0.5 * cfg.years;
      Scalar alpha = std::pow(cfg.rho_large, l);
      Scalar noise_sd = cfg.sigma_large * std::sqrt(1.0 - alpha * alpha);
      for (int k = 0; k < cfg.members; ++k) {
        RandomStream rng = RandomStream::from(
            cfg.seed, {fnv1a64("member_noise"), static_cast<std::uint64_t>(t),
                       static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(l)});
        // One correlated draw at the model's effective resolution; blur stds add
        // in quadrature, so this stays unit variance.
        Scalar eta_length = 2.0 * std::hypot(0.5 * cfg.correlation_length, cfg.model_smooth_sigma);
        Array2D eta = correlated_field(h, w, eta_length, rng);
        Array2D& f = hind.at(t, k, l);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            if (g.is_land(y, x)) {
              f(y, x) = kLandValue;
              continue;
            }
            Scalar signal = clim_obs[valid.month](y, x) + cfg.trend_per_year * yr +
                            anomaly_model[t](y, x);
            Scalar model_clim = clim_model[valid.month](y, x) + cfg.trend_per_year * yr +
                                cfg.drift_per_lead * l;
            Scalar logit = alpha * signal + (1.0 - alpha) * model_clim +
                           bias_logit(cfg, lat, init.month, l, y, x) +
                           cfg.deflation * noise_sd * eta(y, x);
            f(y, x) = quantize_f32(sigmoid(logit));
          }
      }
    }
  }
  return hind;
}

}  // namespace icegen
