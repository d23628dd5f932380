#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "k2recon/error.hpp"

namespace k2recon {

/// Binary [H,W] k-space grid in centered coordinates, row-major, one byte per cell.
struct MaskGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> cells;

  MaskGrid() = default;
  MaskGrid(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), cells(h * w, fill) {}

  static MaskGrid ones(std::size_t h, std::size_t w) { return MaskGrid(h, w, 1); }

  std::size_t size() const { return cells.size(); }
  bool operator()(std::size_t y, std::size_t x) const { return cells[y * width + x] != 0; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return cells[y * width + x]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto c : cells) n += c != 0;
    return n;
  }

  double fraction() const { return static_cast<double>(count()) / static_cast<double>(size()); }

  void require_shape(std::size_t h, std::size_t w, const char* what) const {
    if (h != height || w != width) {
      throw ContractViolation(std::string(what) + ": mask is " + std::to_string(height) + "x" + std::to_string(width) +
                              " but data is " + std::to_string(h) + "x" + std::to_string(w));
    }
  }

  friend bool operator==(const MaskGrid&, const MaskGrid&) = default;
};

inline MaskGrid operator|(const MaskGrid& a, const MaskGrid& b) {
  b.require_shape(a.height, a.width, "mask or");
  MaskGrid out(a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i) out.cells[i] = (a.cells[i] | b.cells[i]) != 0;
  return out;
}

inline MaskGrid operator&(const MaskGrid& a, const MaskGrid& b) {
  b.require_shape(a.height, a.width, "mask and");
  MaskGrid out(a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i) out.cells[i] = (a.cells[i] && b.cells[i]) ? 1 : 0;
  return out;
}

/// True when every set cell of `inner` is also set in `outer`.
inline bool is_subset(const MaskGrid& inner, const MaskGrid& outer) {
  inner.require_shape(outer.height, outer.width, "subset");
  for (std::size_t i = 0; i < inner.size(); ++i) {
    if (inner.cells[i] && !outer.cells[i]) return false;
  }
  return true;
}

}  // namespace k2recon
