#pragma once

// Raw array files plus JSON metadata. Every array lives in its own file:
// contiguous row-major, little-endian; complex arrays as interleaved (re, im)
// float64 pairs ("complex128"), real arrays as float64, masks as uint8. The
// manifest records file name, shape, dtype and a CRC-32 of the file bytes.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "k2recon/complex_tensor.hpp"
#include "k2recon/mask_grid.hpp"

namespace k2recon::container {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct ArrayRecord {
  std::string file;
  Shape shape;
  std::string dtype;  // "complex128" | "float64" | "uint8"
  std::uint32_t crc32 = 0;
};

inline json to_json(const ArrayRecord& r) {
  return json{{"file", r.file}, {"shape", r.shape}, {"dtype", r.dtype}, {"crc32", r.crc32}};
}

inline ArrayRecord record_from_json(const json& j) {
  try {
    return {j.at("file").get<std::string>(), j.at("shape").get<Shape>(), j.at("dtype").get<std::string>(),
            j.at("crc32").get<std::uint32_t>()};
  } catch (const json::exception& e) {
    throw CorruptDataset(std::string("malformed array record: ") + e.what());
  }
}

namespace detail {

inline std::uint32_t crc(const std::vector<unsigned char>& bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

inline void append_f64(std::vector<unsigned char>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline double read_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptDataset("missing array file " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::vector<unsigned char> load_checked(const fs::path& dir, const ArrayRecord& r, const char* dtype,
                                               std::size_t elem_bytes) {
  if (r.dtype != dtype) {
    throw CorruptDataset(r.file + ": expected dtype " + dtype + ", manifest says " + r.dtype);
  }
  for (auto e : r.shape) {
    if (e == 0) throw CorruptDataset(r.file + ": zero extent in shape " + ndgrad::to_string(r.shape));
  }
  auto bytes = read_bytes(dir / r.file);
  const std::size_t expected = ndgrad::numel(r.shape) * elem_bytes;
  if (bytes.size() != expected) {
    throw CorruptDataset(r.file + ": size " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected) +
                         " for shape " + ndgrad::to_string(r.shape));
  }
  if (crc(bytes) != r.crc32) throw CorruptDataset(r.file + ": checksum mismatch");
  return bytes;
}

}  // namespace detail

inline ArrayRecord write_array(const fs::path& dir, const std::string& file, const ComplexTensor& t) {
  std::vector<unsigned char> bytes;
  bytes.reserve(t.size() * 16);
  for (std::size_t i = 0; i < t.size(); ++i) {
    detail::append_f64(bytes, t.re()[i]);
    detail::append_f64(bytes, t.im()[i]);
  }
  detail::write_bytes(dir / file, bytes);
  return {file, t.shape(), "complex128", detail::crc(bytes)};
}

inline ArrayRecord write_array(const fs::path& dir, const std::string& file, const Tensor& t) {
  std::vector<unsigned char> bytes;
  bytes.reserve(t.size() * 8);
  for (double v : t.data()) detail::append_f64(bytes, v);
  detail::write_bytes(dir / file, bytes);
  return {file, t.shape(), "float64", detail::crc(bytes)};
}

inline ArrayRecord write_array(const fs::path& dir, const std::string& file, const MaskGrid& m) {
  std::vector<unsigned char> bytes(m.cells.begin(), m.cells.end());
  detail::write_bytes(dir / file, bytes);
  return {file, {m.height, m.width}, "uint8", detail::crc(bytes)};
}

inline ComplexTensor read_complex(const fs::path& dir, const ArrayRecord& r) {
  const auto bytes = detail::load_checked(dir, r, "complex128", 16);
  ComplexTensor t(r.shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.re()[i] = detail::read_f64(bytes.data() + 16 * i);
    t.im()[i] = detail::read_f64(bytes.data() + 16 * i + 8);
  }
  return t;
}

inline Tensor read_real(const fs::path& dir, const ArrayRecord& r) {
  const auto bytes = detail::load_checked(dir, r, "float64", 8);
  Tensor t(r.shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = detail::read_f64(bytes.data() + 8 * i);
  return t;
}

inline MaskGrid read_mask(const fs::path& dir, const ArrayRecord& r) {
  const auto bytes = detail::load_checked(dir, r, "uint8", 1);
  if (r.shape.size() != 2) throw CorruptDataset(r.file + ": mask must be 2-D, got " + ndgrad::to_string(r.shape));
  MaskGrid m(r.shape[0], r.shape[1]);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] > 1) throw CorruptDataset(r.file + ": mask byte " + std::to_string(i) + " is not 0/1");
    m.cells[i] = bytes[i];
  }
  return m;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw CorruptDataset(path.string() + ": " + e.what());
  }
}

/// Reads the manifest and checks its format tag and version.
inline json read_manifest(const fs::path& dir, const std::string& format, int max_version) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw IoError("no manifest.json in " + dir.string());
  json j = read_json(path);
  if (!j.contains("format") || j["format"] != format) {
    throw CorruptDataset(path.string() + ": expected format '" + format + "'");
  }
  if (!j.contains("version") || !j["version"].is_number_integer()) throw CorruptDataset(path.string() + ": missing version");
  const int v = j["version"].get<int>();
  if (v < 1 || v > max_version) {
    throw UnsupportedVersion(path.string() + ": " + format + " version " + std::to_string(v) +
                             " is not supported (this build reads up to " + std::to_string(max_version) + ")");
  }
  return j;
}

}  // namespace k2recon::container
