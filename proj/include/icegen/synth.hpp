#pragma once

#include "icegen/grid.hpp"

namespace icegen {

// Synthetic truth + biased-hindcast generator. The truth is a logistic squash
// of [seasonal ice-edge cycle + trend + spatially correlated AR(1) anomaly]
// around a persistent high-SIC pole. Hindcast members blend the truth signal
// with a smoothed model climatology, add a (month, lead)-dependent bias and
// deflated, coarse-resolution member noise, so the raw ensemble is biased,
// underdispersive and missing fine-scale structure.
struct SynthConfig {
  int height = 64;
  int width = 64;
  int years = 12;
  int members = 5;
  int leads = 4;

  Scalar land_fraction = 0.14;
  int islands = 3;

  // Ice-edge geometry in normalized radius units (pole at grid center).
  Scalar edge_radius = 0.55;
  Scalar seasonal_amplitude = 0.35;  // seasonal swing of the edge radius
  Scalar edge_sharpness = 14.0;      // logit units per radius unit
  Scalar trend_per_year = -0.03;     // logit units per year

  // Anomaly model: large-scale + fine-scale AR(1) components (logit units).
  Scalar correlation_length = 5.0;  // cells, e-folding of spatial autocorrelation
  Scalar fine_length = 1.2;
  Scalar sigma_large = 0.9;
  Scalar sigma_fine = 0.5;
  Scalar rho_large = 0.75;  // monthly AR(1) coefficient; skill decay alpha(l) = rho^l
  Scalar rho_fine = 0.4;
  Scalar texture_amplitude = 0.35;  // fixed fine-scale climatological texture

  // Hindcast error model.
  Scalar bias_amplitude = 1.2;     // peak of b(m, l), logit units
  Scalar drift_per_lead = -0.15;   // model climatology drift, logit units per lead
  Scalar deflation = 0.6;          // member-noise deflation (underdispersion)
  Scalar model_smooth_sigma = 2.0; // cells; emulates coarse raw-forecast resolution

  std::uint64_t seed = 1;
};

ObsSet generate_truth(const SynthConfig& cfg);
HindcastSet generate_hindcast(const ObsSet& truth, const SynthConfig& cfg);

// Unit-variance spatially correlated field: Gaussian-blurred white noise with
// per-cell renormalization (blur std = length / 2, so autocorrelation reaches
// 1/e at the given length).
Array2D correlated_field(int h, int w, Scalar length, RandomStream& rng);

// Separable Gaussian blur, taps truncated at 3 sigma, in-bounds normalization.
Array2D gaussian_blur(const Array2D& a, Scalar sigma);

}  // namespace icegen
