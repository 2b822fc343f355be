#pragma once

#include <span>
#include <string>
#include <vector>

#include "hm3/tensor_store.hpp"

namespace hm3 {

// Affine map stored input-major (weight_t[j * out_dim + i] = W[i][j]) so the
// inner loop is a contiguous axpy over outputs.
struct Dense {
  int out_dim = 0;
  int in_dim = 0;
  std::vector<float> weight_t;
  std::vector<float> bias;

  // out = W * in + b
  void apply(std::span<const float> in, std::span<float> out) const;
};

Dense dense_from(const Checkpoint& ckpt, const std::string& weight_name, const std::string& bias_name);

float activate(Activation act, float z);

// h <- h + act(W * (scale ⊙ h) + b). An empty `scale` means all ones.
// `scratch` must hold 2 * hidden_width floats.
void residual_step(const Dense& layer, std::span<const float> scale, Activation act, std::span<float> h,
                   std::span<float> scratch);

struct ResidualHop {
  Dense layer;
  std::vector<float> scale;  // empty = unit scale
};

// Executable model: input projection, a sequence of residual hops, and one
// linear head per task.
class Network {
 public:
  Network(Activation act, Dense input, std::vector<ResidualHop> hops, std::vector<Dense> heads);

  int input_dim() const { return input_.in_dim; }
  int hidden_width() const { return input_.out_dim; }
  int num_heads() const { return static_cast<int>(heads_.size()); }
  int head_dim(int head) const { return heads_[static_cast<std::size_t>(head)].out_dim; }
  int depth() const { return static_cast<int>(hops_.size()); }
  Activation activation() const { return act_; }

  // Final hidden state for one input.
  void hidden(std::span<const float> x, std::span<float> h) const;
  // Logits of one head on a hidden state.
  void head(int head, std::span<const float> h, std::span<float> logits) const;

 private:
  Activation act_;
  Dense input_;
  std::vector<ResidualHop> hops_;
  std::vector<Dense> heads_;
};

// The checkpoint's own computation: layers 1..L at unit scale.
Network network_from_checkpoint(const Checkpoint& ckpt);

}  // namespace hm3
