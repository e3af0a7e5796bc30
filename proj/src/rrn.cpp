#include "prorseg/rrn.hpp"

#include <stdexcept>

#include "prorseg/ops.hpp"

namespace prorseg {

namespace {

void check_image(const Tensor& t, const char* what, const Shape& like) {
  if (t.rank() != 5 || t.dim(0) != 1 || t.dim(2) != like[2] || t.dim(3) != like[3] || t.dim(4) != like[4]) {
    throw ShapeError(std::string("rrn_forward: ") + what + " " + shape_str(t.shape()) + " does not match " +
                     shape_str(like));
  }
}

}  // namespace

RrnModel RrnModel::create(const RrnConfig& config, std::mt19937_64& rng) {
  if (config.n_steps < 1) throw std::invalid_argument("rrn: n_steps must be >= 1");
  if (config.unet.in_channels != 2) throw std::invalid_argument("rrn: trunk input must have 2 channels");
  RrnModel m;
  m.config = config;
  m.net = RecurrentUNet::create(config.unet, rng);
  const Index f = config.unet.feature_channels();
  std::normal_distribution<double> n(0.0, config.flow_init_std);
  std::vector<double> w(static_cast<std::size_t>(3 * f * 27));
  for (double& e : w) e = config.flow_init_std > 0.0 ? n(rng) : 0.0;
  m.flow_head = {Tensor({3, f, 3, 3, 3}, std::move(w), true), Tensor::zeros({3}, true)};
  return m;
}

ParameterList RrnModel::parameters() const {
  ParameterList out;
  append_prefixed(out, "rrn.", net.parameters());
  out.push_back({"rrn.flow.w", flow_head.weight});
  out.push_back({"rrn.flow.b", flow_head.bias});
  return out;
}

RegistrationTrajectory rrn_forward(const RrnModel& model, const Tensor& x_m, const Tensor& x_f, const Tensor& y_m,
                                   const RrnOptions& options) {
  if (x_m.rank() != 5 || x_m.dim(1) != 1) throw ShapeError("rrn_forward: x_m must be [1,1,Z,Y,X], got " + shape_str(x_m.shape()));
  check_image(x_f, "x_f", x_m.shape());
  check_image(y_m, "y_m", x_m.shape());
  if (x_f.dim(1) != 1) throw ShapeError("rrn_forward: x_f must have one channel");
  const GridDims full{x_m.dim(4), x_m.dim(3), x_m.dim(2)};
  const Index pool = model.config.unet.input_pool;

  RegistrationTrajectory traj;
  UNetState state = init_unet_state(model.net, full);
  Tensor xm = x_m, ym = y_m;
  for (int i = 0; i < model.config.n_steps; ++i) {
    const Tensor features = unet_step(model.net, concat_channels({xm, x_f}), state);
    VelocityField v{model.flow_head(features)};
    DeformationField phi = integrate_svf(v, model.config.squaring_steps);
    if (pool != 1) phi.u = scale(upsample_trilinear(phi.u, pool), static_cast<double>(pool));
    xm = warp_trilinear(xm, phi);
    ym = warp_trilinear(ym, phi);
    traj.velocity.push_back(v);
    traj.phi.push_back(phi);
    traj.x_m.push_back(xm);
    traj.y_m.push_back(ym);
    if (options.compose) traj.composed = i == 0 ? phi : compose(traj.composed, phi);
    truncate_unet_state(state, i + 1, options.bptt_window);
  }
  return traj;
}

Tensor local_ncc(const Tensor& a, const Tensor& b, int window) {
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("local_ncc: window must be odd and positive");
  if (a.shape() != b.shape()) throw ShapeError("local_ncc: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Index r = window / 2;
  // In-bounds voxel count of every window, so border windows are true means.
  const Tensor count = box_sum3d(Tensor::full(a.shape(), 1.0), r);
  const Tensor sa = box_sum3d(a, r), sb = box_sum3d(b, r);
  const Tensor saa = box_sum3d(square(a), r), sbb = box_sum3d(square(b), r), sab = box_sum3d(hadamard(a, b), r);
  const Tensor cross = sub(sab, div(hadamard(sa, sb), count));
  const Tensor var_a = sub(saa, div(square(sa), count));
  const Tensor var_b = sub(sbb, div(square(sb), count));
  return div(square(cross), add_scalar(hadamard(var_a, var_b), 1e-5));
}

Tensor loss_sim(const RegistrationTrajectory& traj, const Tensor& x_f, SimilarityMode mode, int window) {
  if (mode == SimilarityMode::lncc && (window < 1 || window % 2 == 0)) {
    throw std::invalid_argument("loss_sim: lncc window must be odd, got " + std::to_string(window));
  }
  Tensor total = Tensor::scalar(0.0);
  for (const Tensor& xm : traj.x_m) {
    const Tensor term = mode == SimilarityMode::mse ? mean(square(sub(xm, x_f))) : scale(mean(local_ncc(xm, x_f, window)), -1.0);
    total = add(total, term);
  }
  return total;
}

Tensor loss_smooth(const RegistrationTrajectory& traj, Reduction reduction) {
  Tensor total = Tensor::scalar(0.0);
  for (const DeformationField& phi : traj.phi) {
    for (std::size_t axis = 2; axis < 5; ++axis) {
      const Tensor d2 = square(forward_diff(phi.u, axis));
      total = add(total, reduction == Reduction::sum ? sum(d2) : scale(mean(d2), 1.0 / 3.0));
    }
  }
  return traj.phi.empty() ? total : scale(total, 1.0 / static_cast<double>(traj.phi.size()));
}

Tensor soft_dice(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 5 || a.dim(1) < 2) {
    throw ShapeError("soft_dice: need matching [1,C>=2,...] tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  constexpr double eps = 1e-5;
  const Index c = a.dim(1);
  const Tensor inter = slice(sum_spatial(hadamard(a, b)), 1, 1, c);
  const Tensor denom = slice(sum_spatial(add(a, b)), 1, 1, c);
  const Tensor per_class = div(add_scalar(scale(inter, 2.0), eps), add_scalar(denom, eps));
  return mean(per_class);
}

Tensor loss_cons(const RegistrationTrajectory& traj, const Tensor& y_f, bool final_only) {
  if (traj.y_m.empty()) throw std::invalid_argument("loss_cons: empty trajectory");
  if (final_only) return add_scalar(scale(soft_dice(traj.y_m.back(), y_f), -1.0), 1.0);
  Tensor acc = Tensor::scalar(0.0);
  for (const Tensor& ym : traj.y_m) acc = add(acc, soft_dice(ym, y_f));
  return add_scalar(scale(acc, -1.0 / static_cast<double>(traj.y_m.size())), 1.0);
}

RegistrationLoss loss_registration_total(const RegistrationTrajectory& traj, const Tensor& x_f, const Tensor& y_f,
                                         const RegistrationLossConfig& config) {
  RegistrationLoss l;
  l.sim = loss_sim(traj, x_f, config.sim_mode, config.ncc_window);
  l.smooth = loss_smooth(traj, config.smooth_reduction);
  l.cons = loss_cons(traj, y_f, config.cons_final_only);
  l.total = l.sim;
  if (config.lambda_smooth != 0.0) l.total = add(l.total, scale(l.smooth, config.lambda_smooth));
  if (config.lambda_cons != 0.0) l.total = add(l.total, scale(l.cons, config.lambda_cons));
  return l;
}

}  // namespace prorseg
