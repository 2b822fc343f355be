#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hm3/simplex_weights.hpp"
#include "hm3/tensor_store.hpp"

namespace hm3 {

enum class MergeMethod { average, soup, task_arithmetic, ties, dare_ties, hm3_param };

std::string_view to_string(MergeMethod method);
MergeMethod parse_merge_method(std::string_view name);

// Whether Ties trimming ranks all coordinates of a task vector together or
// each tensor separately.
enum class TrimScope { global, per_tensor };

// Where the preference weights enter the HM3 parameter merge:
// before_trim scales each rescaled task vector by lambda_k ahead of
// trim/elect/merge; after_merge elects on unweighted vectors and sums
// lambda_k times each task's sign-agreeing part.
enum class LambdaPlacement { before_trim, after_merge };

std::string_view to_string(TrimScope scope);
TrimScope parse_trim_scope(std::string_view name);
std::string_view to_string(LambdaPlacement placement);
LambdaPlacement parse_lambda_placement(std::string_view name);

struct MergeConfig {
  MergeMethod method = MergeMethod::hm3_param;
  double drop_prob = 0.5;
  double keep_fraction = 0.2;
  std::optional<WeightVector> weight_vector;
  std::uint64_t rng_seed = 0;
  double lambda_scalar = 1.0;
  TrimScope trim_scope = TrimScope::global;
  LambdaPlacement lambda_placement = LambdaPlacement::before_trim;

  void validate() const;
};

// One elected sign per coordinate, flattened in tensor-name order.
using SignVector = std::vector<std::int8_t>;

Checkpoint average_merge(std::span<const Checkpoint> models);
Checkpoint soup_merge(std::span<const Checkpoint> models, const WeightVector& weights);
Checkpoint task_arithmetic_merge(const Checkpoint& base, std::span<const DeltaSet> deltas,
                                 const WeightVector& weights);

// The DARE keep decision for one coordinate: a pure function of
// (seed, tensor name, flat index) so masks do not depend on traversal order.
bool dare_keeps(std::uint64_t seed, std::string_view tensor_name, std::size_t index, double drop_prob);

DeltaSet dare_drop_rescale(const DeltaSet& delta, double drop_prob, std::uint64_t seed);

// Number of coordinates kept out of `n`: ceil(keep_fraction * n), snapping to
// an integer when the product lands within rounding error of one.
std::size_t trim_keep_count(double keep_fraction, std::size_t n);

DeltaSet ties_trim(const DeltaSet& delta, double keep_fraction, TrimScope scope = TrimScope::global);
SignVector ties_elect(std::span<const DeltaSet> deltas);
DeltaSet ties_disjoint_merge(std::span<const DeltaSet> deltas, const SignVector& signs);

DeltaSet scale_delta(const DeltaSet& delta, double factor);

// Seed of the DARE mask for the k-th task vector (0-based) under a merge seed.
std::uint64_t dare_task_seed(std::uint64_t merge_seed, int task_index);

// theta_base + lambda_scalar * ties(deltas); with DARE first when `use_dare`.
Checkpoint ties_merge(const Checkpoint& base, std::span<const DeltaSet> deltas, const MergeConfig& cfg,
                      bool use_dare);

// DARE -> lambda_k scaling -> trim -> elect -> disjoint merge, added to base.
Checkpoint hm3_param_merge(const Checkpoint& base, std::span<const DeltaSet> deltas,
                           const WeightVector& weights, const MergeConfig& cfg);

// Dispatch on cfg.method. `base` is required by every delta-based method.
Checkpoint merge_models(const MergeConfig& cfg, const Checkpoint& base,
                        std::span<const Checkpoint> finetuned);

}  // namespace hm3
