#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "hm3/rng.hpp"
#include "hm3/tensor_store.hpp"

namespace hm3::testing {

inline ArchDescriptor tiny_arch(int layers = 2, int width = 3, int input = 2, int tasks = 2) {
  ArchDescriptor a;
  a.num_layers = layers;
  a.hidden_width = width;
  a.input_dim = input;
  a.head_dims.assign(static_cast<std::size_t>(tasks), 1);
  a.model_id = "m";
  return a;
}

using FillFn = std::function<float(const std::string& name, std::size_t index)>;

inline Checkpoint make_checkpoint(const ArchDescriptor& arch, const FillFn& fill, const std::string& id = "m",
                                  MetaMap meta = {}) {
  ArchDescriptor a = arch;
  a.model_id = id;
  TensorMap tensors;
  for (const auto& [name, shape] : expected_tensor_shapes(a)) {
    Tensor t;
    t.shape = shape;
    std::size_t n = 1;
    for (const auto d : shape) n *= static_cast<std::size_t>(d);
    for (std::size_t i = 0; i < n; ++i) t.data.push_back(fill(name, i));
    tensors.emplace(name, std::move(t));
  }
  return Checkpoint(a, std::move(tensors), std::move(meta));
}

inline Checkpoint random_checkpoint(const ArchDescriptor& arch, std::uint64_t seed, const std::string& id = "m",
                                    double scale = 1.0) {
  Rng rng(seed);
  return make_checkpoint(
      arch, [&](const std::string&, std::size_t) { return static_cast<float>(scale * rng.normal()); }, id);
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("hm3_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace hm3::testing
