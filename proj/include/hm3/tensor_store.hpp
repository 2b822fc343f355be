#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hm3 {

enum class Activation { relu, tanh };

std::string_view to_string(Activation act);
Activation parse_activation(std::string_view name);

// Shape and identity of one toy network: input projection, `num_layers`
// uniform-width residual layers, one output head per task.
struct ArchDescriptor {
  int num_layers = 4;
  int hidden_width = 32;
  int input_dim = 8;
  Activation activation = Activation::tanh;
  std::vector<int> head_dims{1, 1, 1};
  std::string model_id;
  std::string base_id;

  int num_tasks() const { return static_cast<int>(head_dims.size()); }

  void validate() const;

  // Same layer count, widths, activation and heads; ids are ignored.
  bool same_structure(const ArchDescriptor& other) const;

  bool operator==(const ArchDescriptor&) const = default;
};

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::size_t numel() const { return data.size(); }

  bool operator==(const Tensor&) const = default;
};

// Name-ordered so every traversal (and the on-disk layout) is lexicographic.
using TensorMap = std::map<std::string, Tensor>;
using MetaMap = std::map<std::string, std::string>;

std::string input_weight_name();
std::string input_bias_name();
std::string layer_weight_name(int layer);  // 1-based
std::string layer_bias_name(int layer);
std::string head_weight_name(int task);    // 1-based
std::string head_bias_name(int task);

// The exact tensor names and shapes implied by an architecture.
std::map<std::string, std::vector<std::int64_t>> expected_tensor_shapes(const ArchDescriptor& arch);

// Throws a validation error naming the first tensor that is missing, extra,
// misshapen or non-finite.
void validate_tensors(const ArchDescriptor& arch, const TensorMap& tensors);

// Immutable parameter set of one model plus its architecture.
class Checkpoint {
 public:
  Checkpoint(ArchDescriptor arch, TensorMap tensors, MetaMap meta = {});

  const ArchDescriptor& arch() const { return arch_; }
  const TensorMap& tensors() const { return tensors_; }
  const MetaMap& meta() const { return meta_; }

  const Tensor& tensor(const std::string& name) const;
  std::optional<std::string> meta_value(const std::string& key) const;

  std::size_t parameter_count() const;

  // Copy with a new identity; tensors untouched.
  Checkpoint with_identity(std::string model_id, MetaMap meta) const;

  bool operator==(const Checkpoint&) const = default;

 private:
  ArchDescriptor arch_;
  TensorMap tensors_;
  MetaMap meta_;
};

bool same_tensors(const Checkpoint& a, const Checkpoint& b);

enum class TransformTag { raw, dare_rescaled, trimmed };

std::string_view to_string(TransformTag tag);

// Task vector: per-tensor difference from a named base model.
class DeltaSet {
 public:
  DeltaSet(std::string base_id, int task_id, TensorMap tensors, TransformTag tag);

  const std::string& base_id() const { return base_id_; }
  int task_id() const { return task_id_; }
  const TensorMap& tensors() const { return tensors_; }
  TransformTag transform_tag() const { return tag_; }

  std::size_t size() const;  // total coordinate count

  bool operator==(const DeltaSet&) const = default;

 private:
  std::string base_id_;
  int task_id_;
  TensorMap tensors_;
  TransformTag tag_;
};

// Throws an incompatibility error naming the first tensor (in name order)
// whose presence or shape differs.
void require_same_layout(const TensorMap& a, const TensorMap& b);

inline constexpr std::string_view kCheckpointMagic = "HM3CKPT1";

// Raw container contents: the "arch" header object (as JSON text), meta and
// tensors, with no architecture-specific validation of the tensor names.
struct TensorContainer {
  std::string arch_json = "{}";
  MetaMap meta;
  TensorMap tensors;
};

std::vector<std::uint8_t> encode_container(const TensorContainer& c);
TensorContainer decode_container(const std::vector<std::uint8_t>& bytes);

// Serialized bytes of the HM3CKPT1 container.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// delta = fine - base. The task id defaults to fine's "task_id" meta entry.
DeltaSet compute_delta(const Checkpoint& fine, const Checkpoint& base,
                       std::optional<int> task_id = std::nullopt);

// base + scale * delta.
Checkpoint apply_delta(const Checkpoint& base, const DeltaSet& delta, double scale);

}  // namespace hm3
