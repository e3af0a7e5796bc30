#include "prorseg/network.hpp"

#include <cmath>
#include <stdexcept>

#include "prorseg/ops.hpp"

namespace prorseg {

void UNetConfig::validate() const {
  if (in_channels <= 0) throw std::invalid_argument("unet: in_channels must be positive");
  if (hidden.empty()) throw std::invalid_argument("unet: need at least one encoder stage");
  if (decoder.size() + 1 != hidden.size()) {
    throw std::invalid_argument("unet: decoder needs " + std::to_string(hidden.size() - 1) + " widths, got " +
                                std::to_string(decoder.size()));
  }
  for (Index h : hidden)
    if (h <= 0) throw std::invalid_argument("unet: hidden widths must be positive");
  for (Index d : decoder)
    if (d <= 0) throw std::invalid_argument("unet: decoder widths must be positive");
  if (input_pool != 1 && input_pool != 2 && input_pool != 4) throw std::invalid_argument("unet: input_pool must be 1, 2 or 4");
}

ConvLayer ConvLayer::create(Index out, Index in, Index kernel, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * kernel * kernel * kernel));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(static_cast<std::size_t>(out * in * kernel * kernel * kernel));
  for (double& e : w) e = u(rng);
  return {Tensor({out, in, kernel, kernel, kernel}, std::move(w), true), Tensor::zeros({out}, true)};
}

Tensor ConvLayer::operator()(const Tensor& x) const {
  return conv3d(x, weight, bias, 1, weight.dim(2) / 2);
}

RecurrentUNet RecurrentUNet::create(const UNetConfig& config, std::mt19937_64& rng) {
  config.validate();
  RecurrentUNet net;
  net.config = config;
  Index in = config.in_channels;
  for (Index h : config.hidden) {
    net.encoder.push_back(ClstmCell::create(in, h, rng));
    in = h;
  }
  // decoder[l] consumes up(level l+1 output) ++ encoder[l]
  net.decoder.resize(config.decoder.size());
  for (std::size_t l = config.decoder.size(); l-- > 0;) {
    const Index below = (l + 1 == config.decoder.size()) ? config.hidden[l + 1] : config.decoder[l + 1];
    net.decoder[l] = ConvLayer::create(config.decoder[l], below + config.hidden[l], 3, rng);
  }
  return net;
}

ParameterList RecurrentUNet::parameters() const {
  ParameterList out;
  for (std::size_t s = 0; s < encoder.size(); ++s)
    append_prefixed(out, "enc" + std::to_string(s) + ".", encoder[s].parameters());
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    out.push_back({"dec" + std::to_string(l) + ".w", decoder[l].weight});
    out.push_back({"dec" + std::to_string(l) + ".b", decoder[l].bias});
  }
  return out;
}

UNetState init_unet_state(const RecurrentUNet& net, const GridDims& full) {
  const Index p = net.config.input_pool;
  const Index levels = static_cast<Index>(net.encoder.size());
  const Index factor = p << (levels - 1);
  if (full.x % factor || full.y % factor || full.z % factor) {
    throw ShapeError("recurrent unet: grid " + dims_str(full) + " is not divisible by " + std::to_string(factor));
  }
  UNetState st;
  Index s = p;
  for (const auto& cell : net.encoder) {
    st.stages.push_back(init_state(cell.hidden_channels, {full.z / s, full.y / s, full.x / s}));
    s *= 2;
  }
  return st;
}

Tensor unet_step(const RecurrentUNet& net, const Tensor& x, UNetState& state) {
  if (state.stages.size() != net.encoder.size()) throw ShapeError("unet_step: state has wrong stage count");
  Tensor cur = net.config.input_pool > 1 ? avgpool3d(x, net.config.input_pool) : x;
  std::vector<Tensor> skips;
  for (std::size_t s = 0; s < net.encoder.size(); ++s) {
    if (s > 0) cur = maxpool3d(cur);
    auto [h, next] = clstm_step(net.encoder[s], cur, state.stages[s]);
    state.stages[s] = next;
    skips.push_back(h);
    cur = h;
  }
  for (std::size_t l = net.decoder.size(); l-- > 0;)
    cur = relu(net.decoder[l](concat_channels({upsample_trilinear(cur), skips[l]})));
  return cur;
}

void truncate_unet_state(UNetState& state, int completed_steps, int window) {
  for (auto& s : state.stages) s = truncate_state(s, completed_steps, window);
}

}  // namespace prorseg
