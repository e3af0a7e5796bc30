#include "prorseg/rsn.hpp"

#include <stdexcept>

#include "prorseg/ops.hpp"

namespace prorseg {

RsnModel RsnModel::create(const RsnConfig& config, std::mt19937_64& rng) {
  if (config.n_classes < 2) throw std::invalid_argument("rsn: need at least two classes");
  if (config.n_steps < 1) throw std::invalid_argument("rsn: n_steps must be >= 1");
  if (config.unet.in_channels != config.n_classes + 2) {
    throw std::invalid_argument("rsn: trunk input must have n_classes + 2 = " + std::to_string(config.n_classes + 2) +
                                " channels, got " + std::to_string(config.unet.in_channels));
  }
  RsnModel m;
  m.config = config;
  m.net = RecurrentUNet::create(config.unet, rng);
  m.trunk_head = ConvLayer::create(config.n_classes, config.unet.feature_channels(), 3, rng);
  m.input_skip = ConvLayer::create(config.n_classes, config.unet.in_channels, 1, rng);
  return m;
}

ParameterList RsnModel::parameters() const {
  ParameterList out;
  append_prefixed(out, "rsn.", net.parameters());
  out.push_back({"rsn.head.w", trunk_head.weight});
  out.push_back({"rsn.head.b", trunk_head.bias});
  out.push_back({"rsn.skip.w", input_skip.weight});
  out.push_back({"rsn.skip.b", input_skip.bias});
  return out;
}

std::vector<Tensor> rsn_forward(const RsnModel& model, const Tensor& x_m, const Tensor& y_m, const Tensor& x_f,
                                const RegistrationTrajectory& traj, const RsnOptions& options) {
  if (static_cast<int>(traj.steps()) + 1 != model.config.n_steps) {
    throw std::invalid_argument("rsn_forward: trajectory has " + std::to_string(traj.steps()) +
                                " steps, model expects " + std::to_string(model.config.n_steps - 1));
  }
  if (y_m.rank() != 5 || y_m.dim(1) != model.config.n_classes) {
    throw ShapeError("rsn_forward: prior contour " + shape_str(y_m.shape()) + " does not have " +
                     std::to_string(model.config.n_classes) + " channels");
  }
  const GridDims full{x_f.dim(4), x_f.dim(3), x_f.dim(2)};
  const Index pool = model.config.unet.input_pool;
  UNetState state = init_unet_state(model.net, full);
  std::vector<Tensor> out;
  for (int i = 0; i < model.config.n_steps; ++i) {
    Tensor xm = x_m, ym = y_m;
    if (i > 0 && options.spatial_prior) {
      xm = traj.x_m[static_cast<std::size_t>(i - 1)];
      ym = traj.y_m[static_cast<std::size_t>(i - 1)];
      if (options.detach_priors) {
        xm = xm.detach();
        ym = ym.detach();
      }
    }
    const Tensor input = concat_channels({xm, ym, x_f});
    Tensor logits = model.trunk_head(unet_step(model.net, input, state));
    if (pool != 1) logits = upsample_trilinear(logits, pool);
    out.push_back(softmax_channels(add(logits, model.input_skip(input))));
    truncate_unet_state(state, i + 1, options.bptt_window);
  }
  return out;
}

Tensor loss_seg_deep_supervision(const std::vector<Tensor>& step_probs, const LabelMap& y_f,
                                 const std::optional<std::vector<double>>& class_weights) {
  if (step_probs.empty()) throw std::invalid_argument("loss_seg_deep_supervision: no steps");
  const Shape& s = step_probs.front().shape();
  if (s.size() != 5 || s[2] != y_f.dims.z || s[3] != y_f.dims.y || s[4] != y_f.dims.x) {
    throw ShapeError("loss_seg_deep_supervision: probabilities " + shape_str(s) + " do not match labels " +
                     dims_str(y_f.dims));
  }
  const int c = static_cast<int>(s[1]);
  if (class_weights && static_cast<int>(class_weights->size()) != c) {
    throw std::invalid_argument("loss_seg_deep_supervision: expected " + std::to_string(c) + " class weights");
  }
  Tensor target = one_hot(y_f, c);
  if (class_weights) {
    auto t = target.mutable_data();
    const Index n = y_f.dims.count();
    for (int k = 0; k < c; ++k)
      for (Index i = 0; i < n; ++i) t[k * n + i] *= (*class_weights)[static_cast<std::size_t>(k)];
  }
  const double inv_n = -1.0 / static_cast<double>(y_f.dims.count());
  Tensor total = Tensor::scalar(0.0);
  for (const Tensor& p : step_probs) {
    if (p.shape() != s) throw ShapeError("loss_seg_deep_supervision: step shapes differ");
    total = add(total, scale(sum(hadamard(log_eps(p, 1e-12), target)), inv_n));
  }
  return total;
}

}  // namespace prorseg
