#include "hm3/merge_param.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hm3/error.hpp"
#include "hm3/rng.hpp"

namespace hm3 {

std::string_view to_string(MergeMethod method) {
  switch (method) {
    case MergeMethod::average: return "average";
    case MergeMethod::soup: return "soup";
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::ties: return "ties";
    case MergeMethod::dare_ties: return "dare_ties";
    case MergeMethod::hm3_param: return "hm3_param";
  }
  return "hm3_param";
}

MergeMethod parse_merge_method(std::string_view name) {
  for (const auto m : {MergeMethod::average, MergeMethod::soup, MergeMethod::task_arithmetic,
                       MergeMethod::ties, MergeMethod::dare_ties, MergeMethod::hm3_param}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::configuration, "unknown merge method '" + std::string(name) + "'");
}

std::string_view to_string(TrimScope scope) { return scope == TrimScope::global ? "global" : "per_tensor"; }

TrimScope parse_trim_scope(std::string_view name) {
  if (name == "global") return TrimScope::global;
  if (name == "per_tensor") return TrimScope::per_tensor;
  throw Error(ErrorKind::configuration, "unknown trim scope '" + std::string(name) + "'");
}

std::string_view to_string(LambdaPlacement placement) {
  return placement == LambdaPlacement::before_trim ? "before_trim" : "after_merge";
}

LambdaPlacement parse_lambda_placement(std::string_view name) {
  if (name == "before_trim") return LambdaPlacement::before_trim;
  if (name == "after_merge") return LambdaPlacement::after_merge;
  throw Error(ErrorKind::configuration, "unknown lambda placement '" + std::string(name) + "'");
}

void MergeConfig::validate() const {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw Error(ErrorKind::domain, "drop_prob must lie in [0, 1)");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw Error(ErrorKind::domain, "keep_fraction must lie in (0, 1]");
  }
  const bool needs_weights = method == MergeMethod::soup || method == MergeMethod::task_arithmetic ||
                             method == MergeMethod::hm3_param;
  if (needs_weights && !weight_vector) {
    throw Error(ErrorKind::configuration, std::string(to_string(method)) + " requires a weight_vector");
  }
  if (!std::isfinite(lambda_scalar)) throw Error(ErrorKind::domain, "lambda_scalar must be finite");
}

namespace {

void require_compatible(std::span<const Checkpoint> models) {
  if (models.size() < 2) throw Error(ErrorKind::domain, "merging needs at least two models");
  for (const auto& m : models.subspan(1)) {
    if (!m.arch().same_structure(models[0].arch())) {
      throw Error(ErrorKind::incompatible, "model '" + m.arch().model_id + "' has a different architecture");
    }
    require_same_layout(models[0].tensors(), m.tensors());
  }
}

void require_compatible(std::span<const DeltaSet> deltas) {
  if (deltas.empty()) throw Error(ErrorKind::domain, "at least one task vector is required");
  for (const auto& d : deltas.subspan(1)) require_same_layout(deltas[0].tensors(), d.tensors());
}

void require_weights(std::size_t count, const WeightVector& weights) {
  if (static_cast<std::size_t>(weights.size()) != count) {
    throw Error(ErrorKind::domain, "weight vector has " + std::to_string(weights.size()) + " components for " +
                                       std::to_string(count) + " models");
  }
}

float to_float_checked(double v, const std::string& name) {
  const auto f = static_cast<float>(v);
  if (!std::isfinite(f)) throw Error(ErrorKind::numeric, "overflow in tensor '" + name + "'");
  return f;
}

ArchDescriptor merged_arch(const Checkpoint& like, MergeMethod method) {
  ArchDescriptor a = like.arch();
  a.base_id = like.arch().base_id.empty() ? like.arch().model_id : like.arch().base_id;
  a.model_id = "merge_" + std::string(to_string(method));
  return a;
}

}  // namespace

Checkpoint average_merge(std::span<const Checkpoint> models) {
  require_compatible(models);
  const double k = static_cast<double>(models.size());
  TensorMap out;
  for (const auto& [name, first] : models[0].tensors()) {
    Tensor t{first.shape, std::vector<float>(first.numel())};
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double sum = 0.0;
      for (const auto& m : models) sum += m.tensors().at(name).data[i];
      t.data[i] = to_float_checked(sum / k, name);
    }
    out.emplace(name, std::move(t));
  }
  return Checkpoint(merged_arch(models[0], MergeMethod::average), std::move(out), {{"method", "average"}});
}

Checkpoint soup_merge(std::span<const Checkpoint> models, const WeightVector& weights) {
  require_compatible(models);
  require_weights(models.size(), weights);
  TensorMap out;
  for (const auto& [name, first] : models[0].tensors()) {
    Tensor t{first.shape, std::vector<float>(first.numel())};
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double sum = 0.0;
      for (std::size_t k = 0; k < models.size(); ++k) {
        sum += weights.components[k] * models[k].tensors().at(name).data[i];
      }
      t.data[i] = to_float_checked(sum, name);
    }
    out.emplace(name, std::move(t));
  }
  return Checkpoint(merged_arch(models[0], MergeMethod::soup), std::move(out), {{"method", "soup"}});
}

Checkpoint task_arithmetic_merge(const Checkpoint& base, std::span<const DeltaSet> deltas,
                                 const WeightVector& weights) {
  require_compatible(deltas);
  require_weights(deltas.size(), weights);
  for (const auto& d : deltas) {
    if (d.base_id() != base.arch().model_id) {
      throw Error(ErrorKind::provenance, "task vector " + std::to_string(d.task_id()) + " was computed against '" +
                                             d.base_id() + "', not '" + base.arch().model_id + "'");
    }
  }
  require_same_layout(base.tensors(), deltas[0].tensors());
  TensorMap out;
  for (const auto& [name, b] : base.tensors()) {
    Tensor t{b.shape, std::vector<float>(b.numel())};
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double step = 0.0;
      for (std::size_t k = 0; k < deltas.size(); ++k) {
        step += weights.components[k] * deltas[k].tensors().at(name).data[i];
      }
      t.data[i] = step == 0.0 ? b.data[i] : to_float_checked(b.data[i] + step, name);
    }
    out.emplace(name, std::move(t));
  }
  return Checkpoint(merged_arch(base, MergeMethod::task_arithmetic), std::move(out), {{"method", "task_arithmetic"}});
}

bool dare_keeps(std::uint64_t seed, std::string_view tensor_name, std::size_t index, double drop_prob) {
  const std::uint64_t key = hash_combine(hash_combine(seed, hash_string(tensor_name)), index);
  return to_unit(mix64(key)) >= drop_prob;
}

DeltaSet dare_drop_rescale(const DeltaSet& delta, double drop_prob, std::uint64_t seed) {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw Error(ErrorKind::domain, "drop probability must lie in [0, 1)");
  if (delta.transform_tag() != TransformTag::raw) {
    throw Error(ErrorKind::domain, "DARE expects a raw task vector");
  }
  const double rescale = 1.0 - drop_prob;
  TensorMap out;
  for (const auto& [name, d] : delta.tensors()) {
    Tensor t{d.shape, std::vector<float>(d.numel(), 0.0f)};
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (dare_keeps(seed, name, i, drop_prob)) t.data[i] = static_cast<float>(d.data[i] / rescale);
    }
    out.emplace(name, std::move(t));
  }
  return DeltaSet(delta.base_id(), delta.task_id(), std::move(out), TransformTag::dare_rescaled);
}

std::size_t trim_keep_count(double keep_fraction, std::size_t n) {
  const double x = keep_fraction * static_cast<double>(n);
  const double nearest = std::round(x);
  if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, x)) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(x));
}

namespace {

// Zeroes all but the `keep` largest-magnitude entries among `values`,
// preferring lower positions on equal magnitude.
void keep_top(std::vector<float*>& values, std::size_t keep) {
  if (keep >= values.size()) return;
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto before = [&](std::size_t a, std::size_t b) {
    const float ma = std::abs(*values[a]);
    const float mb = std::abs(*values[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
  for (auto it = order.begin() + static_cast<std::ptrdiff_t>(keep); it != order.end(); ++it) *values[*it] = 0.0f;
}

}  // namespace

DeltaSet ties_trim(const DeltaSet& delta, double keep_fraction, TrimScope scope) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw Error(ErrorKind::domain, "keep_fraction must lie in (0, 1]");
  }
  TensorMap out = delta.tensors();
  if (scope == TrimScope::global) {
    std::vector<float*> values;
    values.reserve(delta.size());
    for (auto& [_, t] : out) {
      for (auto& v : t.data) values.push_back(&v);
    }
    keep_top(values, trim_keep_count(keep_fraction, values.size()));
  } else {
    for (auto& [_, t] : out) {
      std::vector<float*> values;
      values.reserve(t.numel());
      for (auto& v : t.data) values.push_back(&v);
      keep_top(values, trim_keep_count(keep_fraction, values.size()));
    }
  }
  return DeltaSet(delta.base_id(), delta.task_id(), std::move(out), TransformTag::trimmed);
}

SignVector ties_elect(std::span<const DeltaSet> deltas) {
  require_compatible(deltas);
  SignVector signs;
  signs.reserve(deltas[0].size());
  for (const auto& [name, first] : deltas[0].tensors()) {
    for (std::size_t i = 0; i < first.numel(); ++i) {
      double positive = 0.0;
      double negative = 0.0;
      for (const auto& d : deltas) {
        const float v = d.tensors().at(name).data[i];
        if (v > 0.0f) positive += v;
        else if (v < 0.0f) negative -= v;
      }
      signs.push_back(positive >= negative ? 1 : -1);
    }
  }
  return signs;
}

DeltaSet ties_disjoint_merge(std::span<const DeltaSet> deltas, const SignVector& signs) {
  require_compatible(deltas);
  if (signs.size() != deltas[0].size()) {
    throw Error(ErrorKind::incompatible, "sign vector has " + std::to_string(signs.size()) + " entries for " +
                                             std::to_string(deltas[0].size()) + " coordinates");
  }
  TensorMap out;
  std::size_t flat = 0;
  for (const auto& [name, first] : deltas[0].tensors()) {
    Tensor t{first.shape, std::vector<float>(first.numel(), 0.0f)};
    for (std::size_t i = 0; i < t.numel(); ++i, ++flat) {
      double sum = 0.0;
      int count = 0;
      for (const auto& d : deltas) {
        const float v = d.tensors().at(name).data[i];
        if ((signs[flat] > 0 && v > 0.0f) || (signs[flat] < 0 && v < 0.0f)) {
          sum += v;
          ++count;
        }
      }
      if (count > 0) t.data[i] = static_cast<float>(sum / count);
    }
    out.emplace(name, std::move(t));
  }
  return DeltaSet(deltas[0].base_id(), 0, std::move(out), TransformTag::trimmed);
}

DeltaSet scale_delta(const DeltaSet& delta, double factor) {
  TensorMap out = delta.tensors();
  for (auto& [name, t] : out) {
    for (auto& v : t.data) v = to_float_checked(factor * v, name);
  }
  return DeltaSet(delta.base_id(), delta.task_id(), std::move(out), delta.transform_tag());
}

std::uint64_t dare_task_seed(std::uint64_t merge_seed, int task_index) {
  return derive_seed(merge_seed, "dare", static_cast<std::uint64_t>(task_index));
}

namespace {

void require_base(const Checkpoint& base, std::span<const DeltaSet> deltas) {
  require_compatible(deltas);
  require_same_layout(base.tensors(), deltas[0].tensors());
  for (const auto& d : deltas) {
    if (d.base_id() != base.arch().model_id) {
      throw Error(ErrorKind::provenance, "task vector " + std::to_string(d.task_id()) + " was computed against '" +
                                             d.base_id() + "', not '" + base.arch().model_id + "'");
    }
  }
}

Checkpoint add_to_base(const Checkpoint& base, const DeltaSet& delta, double scale, MergeMethod method,
                       MetaMap meta) {
  const Checkpoint merged = apply_delta(base, delta, scale);
  ArchDescriptor arch = merged_arch(base, method);
  return Checkpoint(std::move(arch), merged.tensors(), std::move(meta));
}

}  // namespace

Checkpoint ties_merge(const Checkpoint& base, std::span<const DeltaSet> deltas, const MergeConfig& cfg,
                      bool use_dare) {
  require_base(base, deltas);
  std::vector<DeltaSet> trimmed;
  trimmed.reserve(deltas.size());
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    const DeltaSet source =
        use_dare ? dare_drop_rescale(deltas[k], cfg.drop_prob, dare_task_seed(cfg.rng_seed, static_cast<int>(k)))
                 : deltas[k];
    trimmed.push_back(ties_trim(source, cfg.keep_fraction, cfg.trim_scope));
  }
  const SignVector signs = ties_elect(trimmed);
  const DeltaSet merged = ties_disjoint_merge(trimmed, signs);
  const MergeMethod method = use_dare ? MergeMethod::dare_ties : MergeMethod::ties;
  return add_to_base(base, merged, cfg.lambda_scalar, method, {{"method", std::string(to_string(method))}});
}

Checkpoint hm3_param_merge(const Checkpoint& base, std::span<const DeltaSet> deltas, const WeightVector& weights,
                           const MergeConfig& cfg) {
  require_base(base, deltas);
  require_weights(deltas.size(), weights);
  if (!(cfg.drop_prob >= 0.0 && cfg.drop_prob < 1.0)) {
    throw Error(ErrorKind::domain, "drop probability must lie in [0, 1)");
  }
  std::vector<DeltaSet> prepared;
  prepared.reserve(deltas.size());
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    DeltaSet d = dare_drop_rescale(deltas[k], cfg.drop_prob, dare_task_seed(cfg.rng_seed, static_cast<int>(k)));
    if (cfg.lambda_placement == LambdaPlacement::before_trim) d = scale_delta(d, weights.components[k]);
    prepared.push_back(ties_trim(d, cfg.keep_fraction, cfg.trim_scope));
  }
  const SignVector signs = ties_elect(prepared);
  const MetaMap meta{{"method", "hm3_param"}, {"lambda_index", std::to_string(weights.index)}};

  if (cfg.lambda_placement == LambdaPlacement::before_trim) {
    return add_to_base(base, ties_disjoint_merge(prepared, signs), 1.0, MergeMethod::hm3_param, meta);
  }

  // after_merge: sum_k lambda_k * (sign-agreeing entries of task k).
  TensorMap out;
  std::size_t flat = 0;
  for (const auto& [name, first] : prepared[0].tensors()) {
    Tensor t{first.shape, std::vector<float>(first.numel(), 0.0f)};
    for (std::size_t i = 0; i < t.numel(); ++i, ++flat) {
      double sum = 0.0;
      for (std::size_t k = 0; k < prepared.size(); ++k) {
        const float v = prepared[k].tensors().at(name).data[i];
        if ((signs[flat] > 0 && v > 0.0f) || (signs[flat] < 0 && v < 0.0f)) sum += weights.components[k] * v;
      }
      t.data[i] = to_float_checked(sum, name);
    }
    out.emplace(name, std::move(t));
  }
  return add_to_base(base, DeltaSet(prepared[0].base_id(), 0, std::move(out), TransformTag::trimmed), 1.0,
                     MergeMethod::hm3_param, meta);
}

Checkpoint merge_models(const MergeConfig& cfg, const Checkpoint& base, std::span<const Checkpoint> finetuned) {
  cfg.validate();
  if (cfg.method == MergeMethod::average) return average_merge(finetuned);
  if (cfg.method == MergeMethod::soup) return soup_merge(finetuned, *cfg.weight_vector);

  std::vector<DeltaSet> deltas;
  deltas.reserve(finetuned.size());
  for (std::size_t k = 0; k < finetuned.size(); ++k) {
    deltas.push_back(compute_delta(finetuned[k], base, static_cast<int>(k) + 1));
  }
  switch (cfg.method) {
    case MergeMethod::task_arithmetic: return task_arithmetic_merge(base, deltas, *cfg.weight_vector);
    case MergeMethod::ties: return ties_merge(base, deltas, cfg, false);
    case MergeMethod::dare_ties: return ties_merge(base, deltas, cfg, true);
    case MergeMethod::hm3_param: return hm3_param_merge(base, deltas, *cfg.weight_vector, cfg);
    default: break;
  }
  throw Error(ErrorKind::configuration, "unhandled merge method");
}

}  // namespace hm3
