#pragma once

// On-disk volumes: <stem>.json header plus <stem>.raw little-endian payload,
// linear index x + X*(y + Y*z).
// Header: {"dims":[X,Y,Z],"spacing_mm":[sx,sy,sz],"dtype":"f32"|"u8"|"f64",
//          "kind":"image"|"labels"|"dose"|"field", ...}
// Images and doses are stored as f32, labels as u8. Displacement fields
// ("field") are f64 with the three components stored as consecutive planes.

#include <filesystem>
#include <stdexcept>
#include <string>

#include "prorseg/flow_field.hpp"
#include "prorseg/volume.hpp"

namespace prorseg {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class VolumeKind { image, labels, dose, field };

struct VolumeHeader {
  GridDims dims;
  Spacing spacing;
  std::string dtype;  // "f32", "u8" or "f64"
  VolumeKind kind = VolumeKind::image;
  Modality modality = Modality::mr;
};

// `path` may name the stem, the .json or the .raw file.
void write_volume(const std::filesystem::path& path, const Volume& v);
void write_volume(const std::filesystem::path& path, const LabelMap& v);
void write_volume(const std::filesystem::path& path, const DoseGrid& v);

void write_field(const std::filesystem::path& path, const DeformationField& phi, const Spacing& spacing);

VolumeHeader read_volume_header(const std::filesystem::path& path);
Volume read_image(const std::filesystem::path& path);
LabelMap read_labels(const std::filesystem::path& path);
DoseGrid read_dose(const std::filesystem::path& path);
DeformationField read_field(const std::filesystem::path& path);

std::string kind_name(VolumeKind k);

}  // namespace prorseg
