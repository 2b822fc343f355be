#include "hm3/tensor_store.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "hm3/error.hpp"

namespace hm3 {

using nlohmann::json;

std::string_view to_string(Activation act) {
  return act == Activation::relu ? "relu" : "tanh";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw Error(ErrorKind::validation, "unknown activation '" + std::string(name) + "'");
}

void ArchDescriptor::validate() const {
  if (num_layers < 1) throw Error(ErrorKind::validation, "num_layers must be >= 1");
  if (hidden_width < 1) throw Error(ErrorKind::validation, "hidden_width must be >= 1");
  if (input_dim < 1) throw Error(ErrorKind::validation, "input_dim must be >= 1");
  if (head_dims.empty()) throw Error(ErrorKind::validation, "at least one head is required");
  for (const int d : head_dims) {
    if (d < 1) throw Error(ErrorKind::validation, "head dims must be positive");
  }
}

bool ArchDescriptor::same_structure(const ArchDescriptor& other) const {
  return num_layers == other.num_layers && hidden_width == other.hidden_width &&
         input_dim == other.input_dim && activation == other.activation &&
         head_dims == other.head_dims;
}

std::string input_weight_name() { return "input.weight"; }
std::string input_bias_name() { return "input.bias"; }
std::string layer_weight_name(int layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string layer_bias_name(int layer) { return "layer" + std::to_string(layer) + ".bias"; }
std::string head_weight_name(int task) { return "head_" + std::to_string(task) + ".weight"; }
std::string head_bias_name(int task) { return "head_" + std::to_string(task) + ".bias"; }

std::map<std::string, std::vector<std::int64_t>> expected_tensor_shapes(const ArchDescriptor& arch) {
  const std::int64_t h = arch.hidden_width;
  std::map<std::string, std::vector<std::int64_t>> shapes;
  shapes[input_weight_name()] = {h, arch.input_dim};
  shapes[input_bias_name()] = {h};
  for (int l = 1; l <= arch.num_layers; ++l) {
    shapes[layer_weight_name(l)] = {h, h};
    shapes[layer_bias_name(l)] = {h};
  }
  for (int k = 1; k <= arch.num_tasks(); ++k) {
    const std::int64_t out = arch.head_dims[static_cast<std::size_t>(k - 1)];
    shapes[head_weight_name(k)] = {out, h};
    shapes[head_bias_name(k)] = {out};
  }
  return shapes;
}

namespace {

std::size_t shape_product(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (const auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

void validate_finite(const std::string& name, const Tensor& t) {
  for (const float v : t.data) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::validation, "tensor '" + name + "' contains a non-finite value");
    }
  }
}

}  // namespace

void validate_tensors(const ArchDescriptor& arch, const TensorMap& tensors) {
  arch.validate();
  const auto expected = expected_tensor_shapes(arch);
  for (const auto& [name, shape] : expected) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw Error(ErrorKind::validation, "missing tensor '" + name + "'");
    if (it->second.shape != shape) {
      throw Error(ErrorKind::validation, "tensor '" + name + "' has the wrong shape");
    }
    if (shape_product(shape) != it->second.data.size()) {
      throw Error(ErrorKind::validation, "tensor '" + name + "' data length does not match shape");
    }
    validate_finite(name, it->second);
  }
  for (const auto& [name, t] : tensors) {
    if (!expected.contains(name)) {
      throw Error(ErrorKind::validation, "unexpected tensor '" + name + "'");
    }
  }
}

Checkpoint::Checkpoint(ArchDescriptor arch, TensorMap tensors, MetaMap meta)
    : arch_(std::move(arch)), tensors_(std::move(tensors)), meta_(std::move(meta)) {
  validate_tensors(arch_, tensors_);
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorKind::validation, "no tensor named '" + name + "'");
  return it->second;
}

std::optional<std::string> Checkpoint::meta_value(const std::string& key) const {
  const auto it = meta_.find(key);
  if (it == meta_.end()) return std::nullopt;
  return it->second;
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

Checkpoint Checkpoint::with_identity(std::string model_id, MetaMap meta) const {
  ArchDescriptor arch = arch_;
  arch.model_id = std::move(model_id);
  return Checkpoint(std::move(arch), tensors_, std::move(meta));
}

bool same_tensors(const Checkpoint& a, const Checkpoint& b) { return a.tensors() == b.tensors(); }

std::string_view to_string(TransformTag tag) {
  switch (tag) {
    case TransformTag::raw: return "raw";
    case TransformTag::dare_rescaled: return "dare_rescaled";
    case TransformTag::trimmed: return "trimmed";
  }
  return "raw";
}

DeltaSet::DeltaSet(std::string base_id, int task_id, TensorMap tensors, TransformTag tag)
    : base_id_(std::move(base_id)), task_id_(task_id), tensors_(std::move(tensors)), tag_(tag) {
  for (const auto& [name, t] : tensors_) {
    if (shape_product(t.shape) != t.data.size()) {
      throw Error(ErrorKind::validation, "delta tensor '" + name + "' data length does not match shape");
    }
  }
}

std::size_t DeltaSet::size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

void require_same_layout(const TensorMap& a, const TensorMap& b) {
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ia == a.end()) throw Error(ErrorKind::incompatible, "tensor '" + ib->first + "' missing");
    if (ib == b.end()) throw Error(ErrorKind::incompatible, "tensor '" + ia->first + "' missing");
    if (ia->first != ib->first) {
      const std::string& first = ia->first < ib->first ? ia->first : ib->first;
      throw Error(ErrorKind::incompatible, "tensor '" + first + "' missing");
    }
    if (ia->second.shape != ib->second.shape || ia->second.numel() != ib->second.numel()) {
      throw Error(ErrorKind::incompatible, "tensor '" + ia->first + "' has mismatched shape");
    }
    ++ia;
    ++ib;
  }
}

// ---------------------------------------------------------------------------
// HM3CKPT1 container

namespace {

json arch_to_json(const ArchDescriptor& a) {
  return json{{"num_layers", a.num_layers},     {"hidden_width", a.hidden_width},
              {"input_dim", a.input_dim},       {"activation", std::string(to_string(a.activation))},
              {"head_dims", a.head_dims},       {"model_id", a.model_id},
              {"base_id", a.base_id}};
}

ArchDescriptor arch_from_json(const json& j) {
  ArchDescriptor a;
  a.num_layers = j.at("num_layers").get<int>();
  a.hidden_width = j.at("hidden_width").get<int>();
  a.input_dim = j.at("input_dim").get<int>();
  a.activation = parse_activation(j.at("activation").get<std::string>());
  a.head_dims = j.at("head_dims").get<std::vector<int>>();
  a.model_id = j.at("model_id").get<std::string>();
  a.base_id = j.at("base_id").get<std::string>();
  return a;
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32_le(std::vector<std::uint8_t>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::vector<std::uint8_t> encode_container(const TensorContainer& c) {
  json arch;
  try {
    arch = json::parse(c.arch_json);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::validation, std::string("container arch is not JSON: ") + e.what());
  }
  for (const auto& [name, t] : c.tensors) {
    if (shape_product(t.shape) != t.numel()) throw Error(ErrorKind::validation, "tensor '" + name + "' shape/data mismatch");
    validate_finite(name, t);
  }

  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    const std::uint64_t nbytes = 4 * static_cast<std::uint64_t>(t.numel());
    tensors.push_back(json{{"name", name}, {"shape", t.shape}, {"dtype", "f32"},
                           {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const json header{{"arch", arch}, {"meta", c.meta}, {"tensors", tensors}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  out.insert(out.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  put_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [_, t] : c.tensors) {
    for (const float v : t.data) put_f32_le(out, v);
  }
  return out;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  validate_tensors(ckpt.arch(), ckpt.tensors());
  return encode_container({arch_to_json(ckpt.arch()).dump(), ckpt.meta(), ckpt.tensors()});
}

TensorContainer decode_container(const std::vector<std::uint8_t>& bytes) {
  const std::uint64_t size = bytes.size();
  if (size < 8) throw FormatError(size, "truncated file: missing magic");
  const std::string_view magic(reinterpret_cast<const char*>(bytes.data()), 8);
  if (magic != kCheckpointMagic) {
    if (magic.substr(0, 7) == kCheckpointMagic.substr(0, 7)) {
      throw FormatError(0, "unsupported version '" + std::string(magic) + "'");
    }
    throw FormatError(0, "bad magic");
  }
  if (size < 16) throw FormatError(size, "truncated file: missing header length");
  const std::uint64_t header_len = get_u64_le(bytes.data() + 8);
  if (header_len > size - 16) {
    throw FormatError(size, "truncated header: declares " + std::to_string(header_len) +
                                " bytes, file holds " + std::to_string(size - 16));
  }

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw FormatError(16, std::string("malformed header JSON: ") + e.what());
  }

  const std::uint64_t data_start = 16 + header_len;
  const std::uint64_t data_len = size - data_start;
  MetaMap meta;
  TensorMap tensors;
  std::string arch_text;
  try {
    arch_text = header.at("arch").dump();
    meta = header.at("meta").get<MetaMap>();
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw FormatError(16, "tensor '" + name + "' has unsupported dtype");
      }
      Tensor t;
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (offset != expected_offset) {
        throw FormatError(data_start + offset, "tensor '" + name + "' is not contiguous");
      }
      if (nbytes != 4 * shape_product(t.shape)) {
        throw FormatError(16, "tensor '" + name + "' byte count does not match its shape");
      }
      if (offset + nbytes > data_len) {
        throw FormatError(size, "truncated data: header declares " + std::to_string(offset + nbytes) +
                                    " bytes of data, file holds " + std::to_string(data_len));
      }
      t.data.resize(nbytes / 4);
      const std::uint8_t* p = bytes.data() + data_start + offset;
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = get_f32_le(p + 4 * i);
      if (!tensors.emplace(name, std::move(t)).second) {
        throw FormatError(16, "duplicate tensor '" + name + "'");
      }
      expected_offset += nbytes;
    }
    if (expected_offset != data_len) {
      throw FormatError(data_start + expected_offset,
                        "header declares " + std::to_string(expected_offset) + " bytes of data, file holds " +
                            std::to_string(data_len));
    }
  } catch (const json::exception& e) {
    throw FormatError(16, std::string("invalid header: ") + e.what());
  }
  return {std::move(arch_text), std::move(meta), std::move(tensors)};
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  TensorContainer c = decode_container(bytes);
  ArchDescriptor arch;
  try {
    arch = arch_from_json(json::parse(c.arch_json));
  } catch (const json::exception& e) {
    throw FormatError(16, std::string("invalid arch header: ") + e.what());
  }
  return Checkpoint(std::move(arch), std::move(c.tensors), std::move(c.meta));
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, "write failed for '" + path.string() + "'");
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_bytes(encode_checkpoint(ckpt), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_bytes(path)); }

// ---------------------------------------------------------------------------
// Task-vector arithmetic

DeltaSet compute_delta(const Checkpoint& fine, const Checkpoint& base, std::optional<int> task_id) {
  require_same_layout(base.tensors(), fine.tensors());
  int id = 1;
  if (task_id) {
    id = *task_id;
  } else if (const auto m = fine.meta_value("task_id")) {
    id = std::stoi(*m);
  }
  TensorMap out;
  for (const auto& [name, b] : base.tensors()) {
    const Tensor& f = fine.tensor(name);
    Tensor d{b.shape, std::vector<float>(b.numel())};
    for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = f.data[i] - b.data[i];
    out.emplace(name, std::move(d));
  }
  return DeltaSet(base.arch().model_id, id, std::move(out), TransformTag::raw);
}

Checkpoint apply_delta(const Checkpoint& base, const DeltaSet& delta, double scale) {
  require_same_layout(base.tensors(), delta.tensors());
  TensorMap out;
  for (const auto& [name, b] : base.tensors()) {
    const Tensor& d = delta.tensors().at(name);
    Tensor r{b.shape, std::vector<float>(b.numel())};
    for (std::size_t i = 0; i < r.data.size(); ++i) {
      const double step = scale * static_cast<double>(d.data[i]);
      // A zero step returns the base value itself (keeps -0.0 intact).
      r.data[i] = step == 0.0 ? b.data[i] : static_cast<float>(static_cast<double>(b.data[i]) + step);
      if (!std::isfinite(r.data[i])) {
        throw Error(ErrorKind::numeric, "overflow in tensor '" + name + "'");
      }
    }
    out.emplace(name, std::move(r));
  }
  return Checkpoint(base.arch(), std::move(out), base.meta());
}

}  // namespace hm3
