#include "hm3/network.hpp"

#include <algorithm>
#include <cmath>

#include "hm3/error.hpp"

namespace hm3 {

void Dense::apply(std::span<const float> in, std::span<float> out) const {
  std::copy(bias.begin(), bias.end(), out.begin());
  const float* w = weight_t.data();
  for (int j = 0; j < in_dim; ++j, w += out_dim) {
    const float xj = in[static_cast<std::size_t>(j)];
    for (int i = 0; i < out_dim; ++i) out[static_cast<std::size_t>(i)] += w[i] * xj;
  }
}

Dense dense_from(const Checkpoint& ckpt, const std::string& weight_name, const std::string& bias_name) {
  const Tensor& w = ckpt.tensor(weight_name);
  const Tensor& b = ckpt.tensor(bias_name);
  Dense d;
  d.out_dim = static_cast<int>(w.shape.at(0));
  d.in_dim = static_cast<int>(w.shape.at(1));
  d.weight_t.resize(w.numel());
  for (int i = 0; i < d.out_dim; ++i) {
    for (int j = 0; j < d.in_dim; ++j) {
      d.weight_t[static_cast<std::size_t>(j * d.out_dim + i)] = w.data[static_cast<std::size_t>(i * d.in_dim + j)];
    }
  }
  d.bias = b.data;
  return d;
}

float activate(Activation act, float z) { return act == Activation::relu ? std::max(z, 0.0f) : std::tanh(z); }

void residual_step(const Dense& layer, std::span<const float> scale, Activation act, std::span<float> h,
                   std::span<float> scratch) {
  const auto width = static_cast<std::size_t>(layer.out_dim);
  std::span<float> input = scratch.first(width);
  std::span<float> z = scratch.subspan(width, width);
  if (scale.empty()) {
    std::copy(h.begin(), h.end(), input.begin());
  } else {
    for (std::size_t i = 0; i < width; ++i) input[i] = scale[i] * h[i];
  }
  layer.apply(input, z);
  for (std::size_t i = 0; i < width; ++i) h[i] += activate(act, z[i]);
}

Network::Network(Activation act, Dense input, std::vector<ResidualHop> hops, std::vector<Dense> heads)
    : act_(act), input_(std::move(input)), hops_(std::move(hops)), heads_(std::move(heads)) {
  for (const auto& hop : hops_) {
    if (hop.layer.in_dim != hidden_width() || hop.layer.out_dim != hidden_width()) {
      throw Error(ErrorKind::assembly, "hop layer width does not match the hidden width");
    }
    if (!hop.scale.empty() && static_cast<int>(hop.scale.size()) != hidden_width()) {
      throw Error(ErrorKind::assembly, "scale vector length does not match the hidden width");
    }
  }
  for (const auto& h : heads_) {
    if (h.in_dim != hidden_width()) throw Error(ErrorKind::assembly, "head width does not match the hidden width");
  }
}

void Network::hidden(std::span<const float> x, std::span<float> h) const {
  input_.apply(x, h);
  std::vector<float> scratch(2 * static_cast<std::size_t>(hidden_width()));
  for (const auto& hop : hops_) residual_step(hop.layer, hop.scale, act_, h, scratch);
}

void Network::head(int head, std::span<const float> h, std::span<float> logits) const {
  heads_.at(static_cast<std::size_t>(head)).apply(h, logits);
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
  const ArchDescriptor& arch = ckpt.arch();
  std::vector<ResidualHop> hops;
  for (int l = 1; l <= arch.num_layers; ++l) {
    hops.push_back({dense_from(ckpt, layer_weight_name(l), layer_bias_name(l)), {}});
  }
  std::vector<Dense> heads;
  for (int k = 1; k <= arch.num_tasks(); ++k) heads.push_back(dense_from(ckpt, head_weight_name(k), head_bias_name(k)));
  return Network(arch.activation, dense_from(ckpt, input_weight_name(), input_bias_name()), std::move(hops),
                 std::move(heads));
}

}  // namespace hm3
