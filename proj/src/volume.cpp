#include "prorseg/volume.hpp"

namespace prorseg {

std::string dims_str(const GridDims& d) {
  return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

std::string organ::name(std::uint8_t label) {
  switch (label) {
    case background: return "background";
    case liver: return "liver";
    case large_bowel: return "large_bowel";
    case small_bowel: return "small_bowel";
    case stomach_duodenum: return "stomach_duodenum";
    default: return "label_" + std::to_string(label);
  }
}

Tensor to_tensor(const Volume& v) {
  return Tensor({1, 1, v.dims.z, v.dims.y, v.dims.x}, v.values);
}

Tensor to_tensor(const DoseGrid& d) { return Tensor({1, 1, d.dims.z, d.dims.y, d.dims.x}, d.gy); }

Volume volume_from_tensor(const Tensor& t, const GridDims& dims, const Spacing& spacing, Modality modality) {
  if (t.numel() != dims.count()) {
    throw ShapeError("volume_from_tensor: " + shape_str(t.shape()) + " does not fit grid " + dims_str(dims));
  }
  return Volume{dims, spacing, std::vector<double>(t.data().begin(), t.data().end()), modality};
}

Tensor one_hot(const LabelMap& labels, int n_classes) {
  const Index n = labels.dims.count();
  std::vector<double> v(static_cast<std::size_t>(n * n_classes), 0.0);
  for (Index i = 0; i < n; ++i) {
    const int l = labels.labels[static_cast<std::size_t>(i)];
    if (l >= n_classes) {
      throw ShapeError("one_hot: label " + std::to_string(l) + " >= n_classes " + std::to_string(n_classes));
    }
    v[static_cast<std::size_t>(l * n + i)] = 1.0;
  }
  return Tensor({1, n_classes, labels.dims.z, labels.dims.y, labels.dims.x}, std::move(v));
}

LabelMap argmax_labels(const Tensor& probs, const GridDims& dims, const Spacing& spacing) {
  if (probs.rank() != 5 || probs.dim(0) != 1 || probs.numel() != probs.dim(1) * dims.count()) {
    throw ShapeError("argmax_labels: " + shape_str(probs.shape()) + " does not fit grid " + dims_str(dims));
  }
  const Index c = probs.dim(1), n = dims.count();
  const auto p = probs.data();
  LabelMap out{dims, spacing, std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0)};
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index k = 1; k < c; ++k)
      if (p[k * n + i] > p[best * n + i]) best = k;
    out.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace prorseg
