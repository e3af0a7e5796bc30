#pragma once

// Physical 3D grids. Storage order is x fastest: index = x + X*(y + Y*z), which
// is the C order of a [Z, Y, X] tensor.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "prorseg/tensor.hpp"

namespace prorseg {

struct GridDims {
  Index x = 0, y = 0, z = 0;

  Index count() const { return x * y * z; }
  Index index(Index i, Index j, Index k) const { return i + x * (j + y * k); }
  // [Z, Y, X]
  Shape zyx() const { return {z, y, x}; }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

struct Spacing {
  double x = 1.0, y = 1.0, z = 1.0;

  double voxel_volume_mm3() const { return x * y * z; }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

std::string dims_str(const GridDims& d);

enum class Modality { mr, ct, cbct };

struct Volume {
  GridDims dims;
  Spacing spacing;
  std::vector<double> values;
  Modality modality = Modality::mr;
};

// 0 background, 1 liver, 2 large bowel, 3 small bowel, 4 stomach-duodenum.
struct LabelMap {
  GridDims dims;
  Spacing spacing;
  std::vector<std::uint8_t> labels;
};

struct DoseGrid {
  GridDims dims;
  Spacing spacing;
  std::vector<double> gy;
};

namespace organ {
inline constexpr std::uint8_t background = 0;
inline constexpr std::uint8_t liver = 1;
inline constexpr std::uint8_t large_bowel = 2;
inline constexpr std::uint8_t small_bowel = 3;
inline constexpr std::uint8_t stomach_duodenum = 4;
inline constexpr int count = 5;  // including background
std::string name(std::uint8_t label);
}  // namespace organ

// [1, 1, Z, Y, X] view of a volume's intensities.
Tensor to_tensor(const Volume& v);
Tensor to_tensor(const DoseGrid& d);
Volume volume_from_tensor(const Tensor& t, const GridDims& dims, const Spacing& spacing,
                          Modality modality = Modality::mr);

// [1, n_classes, Z, Y, X]; throws ShapeError when a label >= n_classes.
Tensor one_hot(const LabelMap& labels, int n_classes);
// Per-voxel argmax over channels of [1, C, Z, Y, X]; ties go to the lowest index.
LabelMap argmax_labels(const Tensor& probs, const GridDims& dims, const Spacing& spacing);

}  // namespace prorseg
