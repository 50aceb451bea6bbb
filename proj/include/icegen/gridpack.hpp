#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "icegen/grid.hpp"

namespace icegen {

// On-disk dataset directory: a JSON manifest plus raw little-endian float32
// arrays in C row-major order, index order (t, k, l, y, x). See
// docs/gridpack_format.md for the byte-exact layout.
//
// Roles: "obs" (k collapsed to 1), "hindcast", "adjusted", "badj".

using Provenance = std::map<std::string, std::string>;

struct GridPack {
  std::string role;
  HindcastSet data;  // obs packs are stored with members == 1
  Provenance provenance;
};

void write_gridpack(const GridPack& pack, const std::filesystem::path& dir);
GridPack read_gridpack(const std::filesystem::path& dir);

// Conversions between the obs view and its 1-member pack representation.
GridPack obs_to_pack(const ObsSet& obs, Provenance prov);
ObsSet pack_to_obs(const GridPack& pack);

GridPack hindcast_to_pack(const HindcastSet& h, std::string role, Provenance prov);

// Quantize through float32, matching what a write/read round trip produces.
Scalar quantize_f32(Scalar v);
void quantize_f32_inplace(Array2D& a);

}  // namespace icegen
