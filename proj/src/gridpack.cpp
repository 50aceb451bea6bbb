#include "icegen/gridpack.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <vector>

namespace icegen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

std::vector<float> to_f32(const Array2D& a) {
  std::vector<float> out(static_cast<std::size_t>(a.size()));
  const Scalar* p = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(p[i]);
  return out;
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorCode::missing_input, "cannot open for write: " + path.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  require(f.good(), ErrorCode::missing_input, "write failed: " + path.string());
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  require(f.good(), ErrorCode::missing_input, "missing file: " + path.string());
  std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(n));
  f.read(buf.data(), n);
  require(f.good(), ErrorCode::corrupt_data, "read failed: " + path.string());
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

Scalar quantize_f32(Scalar v) { return static_cast<Scalar>(static_cast<float>(v)); }

void quantize_f32_inplace(Array2D& a) {
  Scalar* p = a.data();
  for (Eigen::Index i = 0; i < a.size(); ++i) p[i] = quantize_f32(p[i]);
}

void write_gridpack(const GridPack& pack, const fs::path& dir) {
  const HindcastSet& d = pack.data;
  require(d.n_init() > 0 && d.members() > 0 && d.leads() > 0, ErrorCode::invalid_argument,
          "refusing to write an empty axis");
  const GridSpec& g = *d.grid();

  fs::create_directories(dir);

  // values.f32: (t, k, l, y, x) row-major
  std::size_t cells = static_cast<std::size_t>(g.height) * g.width;
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(d.n_init()) * d.members() * d.leads() * cells);
  for (int t = 0; t < d.n_init(); ++t)
    for (int k = 0; k < d.members(); ++k)
      for (int l = 1; l <= d.leads(); ++l) {
        auto f = to_f32(d.at(t, k, l));
        values.insert(values.end(), f.begin(), f.end());
      }
  std::size_t values_bytes = values.size() * sizeof(float);
  std::uint64_t values_sum = fnv1a64(values.data(), values_bytes);
  write_bytes(dir / "values.f32", values.data(), values_bytes);

  auto area = to_f32(g.cell_area);
  std::uint64_t area_sum = fnv1a64(area.data(), area.size() * sizeof(float));
  write_bytes(dir / "cell_area.f32", area.data(), area.size() * sizeof(float));

  std::vector<std::uint8_t> land(cells);
  for (std::size_t i = 0; i < cells; ++i) land[i] = g.land_mask.data()[i] ? 1 : 0;
  std::uint64_t land_sum = fnv1a64(land.data(), land.size());
  write_bytes(dir / "land_mask.u8", land.data(), land.size());

  json manifest;
  manifest["format"] = "gridpack";
  manifest["version"] = kFormatVersion;
  manifest["role"] = pack.role;
  manifest["dims"] = {{"init_times", d.n_init()},
                      {"members", d.members()},
                      {"leads", d.leads()},
                      {"height", g.height},
                      {"width", g.width}};
  json times = json::array();
  for (const auto& t : d.init_times()) times.push_back({t.year, t.month});
  manifest["init_times"] = times;
  manifest["checksums"] = {{"values.f32", hex64(values_sum)},
                           {"cell_area.f32", hex64(area_sum)},
                           {"land_mask.u8", hex64(land_sum)}};
  manifest["provenance"] = pack.provenance;

  std::string text = manifest.dump(2);
  text.push_back('\n');
  write_bytes(dir / "manifest.json", text.data(), text.size());
}

GridPack read_gridpack(const fs::path& dir) {
  auto mbytes = read_bytes(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(mbytes.begin(), mbytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::corrupt_data, "bad manifest: " + std::string(e.what()));
  }
  require(manifest.value("format", "") == "gridpack", ErrorCode::corrupt_data,
          "not a gridpack manifest");
  require(manifest.value("version", -1) == kFormatVersion, ErrorCode::corrupt_data,
          "unsupported gridpack version");

  const auto& dims = manifest.at("dims");
  int n_init = dims.at("init_times").get<int>();
  int members = dims.at("members").get<int>();
  int leads = dims.at("leads").get<int>();
  int height = dims.at("height").get<int>();
  int width = dims.at("width").get<int>();
  require(n_init > 0 && members > 0 && leads > 0 && height > 0 && width > 0,
          ErrorCode::corrupt_data, "non-positive dimension in manifest");

  auto check = [&](const char* name, const std::vector<char>& bytes) {
    std::string expect = manifest.at("checksums").at(name).get<std::string>();
    std::string got = hex64(fnv1a64(bytes.data(), bytes.size()));
    require(expect == got, ErrorCode::corrupt_data,
            std::string("checksum mismatch for ") + name);
  };

  std::size_t cells = static_cast<std::size_t>(height) * width;

  auto area_bytes = read_bytes(dir / "cell_area.f32");
  check("cell_area.f32", area_bytes);
  require(area_bytes.size() == cells * sizeof(float), ErrorCode::corrupt_data,
          "cell_area.f32 size mismatch");
  auto land_bytes = read_bytes(dir / "land_mask.u8");
  check("land_mask.u8", land_bytes);
  require(land_bytes.size() == cells, ErrorCode::corrupt_data, "land_mask.u8 size mismatch");

  Array2D area(height, width);
  MaskArray land(height, width);
  {
    const float* ap = reinterpret_cast<const float*>(area_bytes.data());
    for (std::size_t i = 0; i < cells; ++i) {
      area.data()[i] = static_cast<Scalar>(ap[i]);
      land.data()[i] = land_bytes[static_cast<std::size_t>(i)] != 0;
    }
  }
  auto grid = std::make_shared<const GridSpec>(height, width, std::move(area), std::move(land));

  std::vector<TimeIndex> init_times;
  for (const auto& t : manifest.at("init_times"))
    init_times.push_back({t.at(0).get<int>(), t.at(1).get<int>()});
  require(static_cast<int>(init_times.size()) == n_init, ErrorCode::corrupt_data,
          "init_times length mismatch");

  auto value_bytes = read_bytes(dir / "values.f32");
  check("values.f32", value_bytes);
  std::size_t expect_n = static_cast<std::size_t>(n_init) * members * leads * cells;
  require(value_bytes.size() == expect_n * sizeof(float), ErrorCode::corrupt_data,
          "values.f32 size does not match manifest dims");

  GridPack pack;
  pack.role = manifest.value("role", "");
  pack.data = HindcastSet(grid, std::move(init_times), members, leads);
  const float* vp = reinterpret_cast<const float*>(value_bytes.data());
  std::size_t off = 0;
  for (int t = 0; t < n_init; ++t)
    for (int k = 0; k < members; ++k)
      for (int l = 1; l <= leads; ++l) {
        Array2D& f = pack.data.at(t, k, l);
        for (std::size_t i = 0; i < cells; ++i) f.data()[i] = static_cast<Scalar>(vp[off + i]);
        off += cells;
      }

  if (manifest.contains("provenance"))
    pack.provenance = manifest.at("provenance").get<Provenance>();
  return pack;
}

GridPack obs_to_pack(const ObsSet& obs, Provenance prov) {
  HindcastSet h(obs.grid(), obs.init_times(), 1, obs.leads());
  for (int t = 0; t < obs.n_init(); ++t)
    for (int l = 1; l <= obs.leads(); ++l) h.at(t, 0, l) = obs.at(t, l);
  return GridPack{"obs", std::move(h), std::move(prov)};
}

ObsSet pack_to_obs(const GridPack& pack) {
  require(pack.role == "obs", ErrorCode::invalid_argument, "pack role is not obs");
  require(pack.data.members() == 1, ErrorCode::corrupt_data, "obs pack must have one member");
  ObsSet o(pack.data.grid(), pack.data.init_times(), pack.data.leads());
  for (int t = 0; t < o.n_init(); ++t)
    for (int l = 1; l <= o.leads(); ++l) o.at(t, l) = pack.data.at(t, 0, l);
  return o;
}

GridPack hindcast_to_pack(const HindcastSet& h, std::string role, Provenance prov) {
  return GridPack{std::move(role), h, std::move(prov)};
}

}  // namespace icegen
