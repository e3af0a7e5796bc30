#include "prorseg/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace prorseg {

namespace fs = std::filesystem;

namespace {

std::uint32_t swap32(std::uint32_t w) {
  return (w >> 24) | ((w >> 8) & 0xFF00u) | ((w << 8) & 0xFF0000u) | (w << 24);
}

fs::path stem_of(const fs::path& p) {
  if (p.extension() == ".json" || p.extension() == ".raw") {
    fs::path s = p;
    s.replace_extension();
    return s;
  }
  return p;
}

fs::path with_ext(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  p += ext;
  return p;
}

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::mr: return "mr";
    case Modality::ct: return "ct";
    case Modality::cbct: return "cbct";
  }
  return "mr";
}

Modality modality_from(const std::string& s) {
  if (s == "mr") return Modality::mr;
  if (s == "ct") return Modality::ct;
  if (s == "cbct") return Modality::cbct;
  throw FormatError("unknown modality \"" + s + "\"");
}

void write_header(const fs::path& stem, const VolumeHeader& h) {
  nlohmann::ordered_json j;
  j["dims"] = {h.dims.x, h.dims.y, h.dims.z};
  j["spacing_mm"] = {h.spacing.x, h.spacing.y, h.spacing.z};
  j["dtype"] = h.dtype;
  j["kind"] = kind_name(h.kind);
  if (h.kind == VolumeKind::image) j["modality"] = modality_name(h.modality);
  if (h.kind == VolumeKind::dose) j["units"] = "Gy";
  std::ofstream out(with_ext(stem, ".json"));
  if (!out) throw FormatError("cannot write " + with_ext(stem, ".json").string());
  out << j.dump(2) << '\n';
}

void write_raw(const fs::path& stem, const void* data, std::size_t bytes) {
  const fs::path p = with_ext(stem, ".raw");
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw FormatError("short write to " + p.string());
}

std::vector<float> to_f32_le(const std::vector<double>& v, const char* what) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw NumericError(std::string(what) + ": non-finite value at voxel " + std::to_string(i));
    out[i] = static_cast<float>(v[i]);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : out) f = std::bit_cast<float>(swap32(std::bit_cast<std::uint32_t>(f)));
  }
  return out;
}

std::vector<char> read_payload(const fs::path& stem, const VolumeHeader& h) {
  const fs::path p = with_ext(stem, ".raw");
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t width = h.dtype == "f64" ? 8 : h.dtype == "f32" ? 4 : 1;
  const auto n = static_cast<std::size_t>(h.dims.count()) * (h.kind == VolumeKind::field ? 3 : 1);
  const std::size_t expected = n * width;
  if (bytes.size() == expected) return bytes;
  const std::size_t other = h.dtype == "f32" ? n : n * 4;
  if (h.dtype != "f64" && bytes.size() == other) {
    throw FormatError(p.string() + ": payload is " + std::to_string(bytes.size()) + " bytes, which matches dtype " +
                      (h.dtype == "f32" ? "u8" : "f32") + " rather than header dtype " + h.dtype + " (expected " +
                      std::to_string(expected) + " bytes)");
  }
  if (bytes.size() < expected) {
    throw FormatError(p.string() + ": truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()) + " (data ends at byte offset " + std::to_string(bytes.size()) + ")");
  }
  throw FormatError(p.string() + ": payload too long, expected " + std::to_string(expected) + " bytes, got " +
                    std::to_string(bytes.size()) + " (unexpected data from byte offset " + std::to_string(expected) + ")");
}

std::vector<double> decode_f64(const std::vector<char>& bytes) {
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    unsigned char b[8];
    std::memcpy(b, bytes.data() + 8 * i, 8);
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 8);
    std::memcpy(&out[i], b, 8);
    if (!std::isfinite(out[i])) throw FormatError("non-finite value at payload byte offset " + std::to_string(8 * i));
  }
  return out;
}

std::vector<double> decode_f32(const std::vector<char>& bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t w;
    std::memcpy(&w, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) w = swap32(w);
    const auto f = std::bit_cast<float>(w);
    if (!std::isfinite(f)) throw FormatError("non-finite value at payload byte offset " + std::to_string(4 * i));
    out[i] = static_cast<double>(f);
  }
  return out;
}

VolumeHeader expect(const fs::path& path, VolumeKind kind) {
  VolumeHeader h = read_volume_header(path);
  if (h.kind != kind) {
    throw FormatError(with_ext(stem_of(path), ".json").string() + ": kind is " + kind_name(h.kind) + ", expected " +
                      kind_name(kind));
  }
  return h;
}

}  // namespace

std::string kind_name(VolumeKind k) {
  switch (k) {
    case VolumeKind::image: return "image";
    case VolumeKind::labels: return "labels";
    case VolumeKind::dose: return "dose";
    case VolumeKind::field: return "field";
  }
  return "image";
}

VolumeHeader read_volume_header(const fs::path& path) {
  const fs::path hp = with_ext(stem_of(path), ".json");
  std::ifstream in(hp);
  if (!in) throw FormatError("cannot open " + hp.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(hp.string() + ": malformed header at byte offset " + std::to_string(e.byte) + ": " + e.what());
  }
  VolumeHeader h;
  try {
    const auto d = j.at("dims").get<std::vector<Index>>();
    const auto s = j.at("spacing_mm").get<std::vector<double>>();
    if (d.size() != 3 || s.size() != 3) throw FormatError(hp.string() + ": dims and spacing_mm need 3 entries");
    h.dims = {d[0], d[1], d[2]};
    h.spacing = {s[0], s[1], s[2]};
    h.dtype = j.at("dtype").get<std::string>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "image") h.kind = VolumeKind::image;
    else if (kind == "labels") h.kind = VolumeKind::labels;
    else if (kind == "dose") h.kind = VolumeKind::dose;
    else if (kind == "field") h.kind = VolumeKind::field;
    else throw FormatError(hp.string() + ": unknown kind \"" + kind + "\"");
    if (j.contains("modality")) h.modality = modality_from(j["modality"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(hp.string() + ": bad header: " + e.what());
  }
  if (h.dtype != "f32" && h.dtype != "u8" && h.dtype != "f64") throw FormatError(hp.string() + ": unsupported dtype \"" + h.dtype + "\"");
  if (h.dims.x < 1 || h.dims.y < 1 || h.dims.z < 1) throw FormatError(hp.string() + ": non-positive dims");
  if (!(h.spacing.x > 0 && h.spacing.y > 0 && h.spacing.z > 0)) throw FormatError(hp.string() + ": non-positive spacing");
  const std::string want = h.kind == VolumeKind::labels ? "u8" : h.kind == VolumeKind::field ? "f64" : "f32";
  if (h.dtype != want) {
    throw FormatError(hp.string() + ": kind " + kind_name(h.kind) + " cannot use dtype " + h.dtype);
  }
  return h;
}

void write_volume(const fs::path& path, const Volume& v) {
  const fs::path stem = stem_of(path);
  const auto f = to_f32_le(v.values, "write_volume");
  write_raw(stem, f.data(), f.size() * 4);
  write_header(stem, {v.dims, v.spacing, "f32", VolumeKind::image, v.modality});
}

void write_volume(const fs::path& path, const LabelMap& v) {
  const fs::path stem = stem_of(path);
  write_raw(stem, v.labels.data(), v.labels.size());
  write_header(stem, {v.dims, v.spacing, "u8", VolumeKind::labels, Modality::mr});
}

void write_volume(const fs::path& path, const DoseGrid& v) {
  const fs::path stem = stem_of(path);
  const auto f = to_f32_le(v.gy, "write_volume");
  write_raw(stem, f.data(), f.size() * 4);
  write_header(stem, {v.dims, v.spacing, "f32", VolumeKind::dose, Modality::mr});
}

void write_field(const fs::path& path, const DeformationField& phi, const Spacing& spacing) {
  const fs::path stem = stem_of(path);
  const GridDims d = phi.dims();
  const auto u = phi.u.data();
  std::vector<unsigned char> bytes(u.size() * 8);
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!std::isfinite(u[i])) throw NumericError("write_field: non-finite value at element " + std::to_string(i));
    std::memcpy(bytes.data() + 8 * i, &u[i], 8);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.data() + 8 * i, bytes.data() + 8 * i + 8);
  }
  write_raw(stem, bytes.data(), bytes.size());
  write_header(stem, {d, spacing, "f64", VolumeKind::field, Modality::mr});
}

DeformationField read_field(const fs::path& path) {
  const VolumeHeader h = expect(path, VolumeKind::field);
  return {Tensor({1, 3, h.dims.z, h.dims.y, h.dims.x}, decode_f64(read_payload(stem_of(path), h)))};
}

Volume read_image(const fs::path& path) {
  const VolumeHeader h = expect(path, VolumeKind::image);
  return {h.dims, h.spacing, decode_f32(read_payload(stem_of(path), h)), h.modality};
}

LabelMap read_labels(const fs::path& path) {
  const VolumeHeader h = expect(path, VolumeKind::labels);
  const auto bytes = read_payload(stem_of(path), h);
  return {h.dims, h.spacing, std::vector<std::uint8_t>(bytes.begin(), bytes.end())};
}

DoseGrid read_dose(const fs::path& path) {
  const VolumeHeader h = expect(path, VolumeKind::dose);
  return {h.dims, h.spacing, decode_f32(read_payload(stem_of(path), h))};
}

}  // namespace prorseg
