#pragma once

#include <da/core.hpp>
#include <da/pod.hpp>

#include <json.hpp>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace da {

using Json = nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "array files are little-endian; big-endian hosts need swaps");

// --- raw float64 arrays with JSON sidecars -------------------------------
//
// Arrays are stored as raw little-endian IEEE doubles. The sidecar
// (<file>.meta.json) records shape, layout and free-form metadata, so files
// are exchangeable bit-exactly without a heavyweight container format.

inline void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error("write_json: cannot open " + path.string());
  out << j.dump(2) << "\n";
}

inline Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_json: cannot open " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("read_json: " + path.string() + ": " + e.what());
  }
  return j;
}

inline fs::path sidecar_path(const fs::path& array_path) {
  fs::path p = array_path;
  p += ".meta.json";
  return p;
}

inline void write_array(const fs::path& path, const double* data,
                        std::vector<Index> shape, const std::string& layout,
                        Json extra = Json::object()) {
  std::size_t count = 1;
  for (Index s : shape) count *= static_cast<std::size_t>(s);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_array: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) throw Error("write_array: short write to " + path.string());
  Json meta = std::move(extra);
  meta["dtype"] = "float64-le";
  meta["shape"] = shape;
  meta["layout"] = layout;
  write_json(sidecar_path(path), meta);
}

inline void write_vector(const fs::path& path, const Vector& v,
                         Json extra = Json::object()) {
  write_array(path, v.data(), {v.size()}, "row-major", std::move(extra));
}

// Row-major: sample-per-row ensembles and trajectories.
inline void write_matrix_rowmajor(const fs::path& path, const Matrix& m,
                                  Json extra = Json::object()) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  write_array(path, rm.data(), {m.rows(), m.cols()}, "row-major",
              std::move(extra));
}

// Column-major: basis matrices.
inline void write_matrix_colmajor(const fs::path& path, const Matrix& m,
                                  Json extra = Json::object()) {
  write_array(path, m.data(), {m.rows(), m.cols()}, "column-major",
              std::move(extra));
}

struct LoadedArray {
  std::vector<double> data;
  std::vector<Index> shape;
  std::string layout;
  Json meta;
};

inline LoadedArray read_array(const fs::path& path) {
  LoadedArray out;
  out.meta = read_json(sidecar_path(path));
  for (const auto& s : out.meta.at("shape"))
    out.shape.push_back(s.get<Index>());
  out.layout = out.meta.at("layout").get<std::string>();
  std::size_t count = 1;
  for (Index s : out.shape) count *= static_cast<std::size_t>(s);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_array: cannot open " + path.string());
  out.data.resize(count);
  in.read(reinterpret_cast<char*>(out.data.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double))
    throw Error("read_array: short read from " + path.string());
  return out;
}

inline Vector read_vector(const fs::path& path) {
  LoadedArray a = read_array(path);
  require(a.shape.size() == 1, "read_vector: " + path.string() +
                                   " is not one-dimensional");
  return Eigen::Map<Vector>(a.data.data(), a.shape[0]);
}

inline Matrix read_matrix(const fs::path& path) {
  LoadedArray a = read_array(path);
  require(a.shape.size() == 2,
          "read_matrix: " + path.string() + " is not two-dimensional");
  if (a.layout == "row-major") {
    return Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                    Eigen::RowMajor>>(a.data.data(),
                                                      a.shape[0], a.shape[1]);
  }
  return Eigen::Map<Matrix>(a.data.data(), a.shape[0], a.shape[1]);
}

// --- basis export / import ------------------------------------------------

inline void save_basis(const fs::path& path, const PodBasis& basis,
                       std::uint64_t seed) {
  Json meta;
  meta["full_dim"] = basis.full_dim();
  meta["reduced_dim"] = basis.reduced_dim();
  meta["gamma"] = basis.gamma();
  meta["singular_values"] =
      std::vector<double>(basis.singular_values().begin(),
                          basis.singular_values().end());
  meta["provenance"] = basis.provenance();
  meta["seed"] = seed;
  write_matrix_colmajor(path, basis.matrix(), std::move(meta));
}

inline PodBasis load_basis(const fs::path& path) {
  LoadedArray a = read_array(path);
  require(a.shape.size() == 2 && a.layout == "column-major",
          "load_basis: " + path.string() + " is not a column-major matrix");
  Matrix v = Eigen::Map<Matrix>(a.data.data(), a.shape[0], a.shape[1]);
  std::vector<double> sv =
      a.meta.at("singular_values").get<std::vector<double>>();
  Vector svec = Eigen::Map<Vector>(sv.data(), static_cast<Index>(sv.size()));
  return PodBasis(std::move(v), svec, a.meta.at("gamma").get<double>(),
                  a.meta.at("provenance").get<std::string>());
}

// --- checksums -------------------------------------------------------------

inline std::string fnv1a64_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setfill('0') << std::setw(16) << h;
  return os.str();
}

inline std::string checksum_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checksum_file: cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 15];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  return fnv1a64_hex(h);
}

inline std::string checksum_string(const std::string& s) {
  return fnv1a64_hex(fnv1a64(s.data(), s.size()));
}

}  // namespace da
