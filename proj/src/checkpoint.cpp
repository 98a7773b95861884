#include "mshubert/checkpoint.hpp"

#include <cmath>
#include <cstring>

#include "mshubert/binary_io.hpp"

namespace mshubert {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'H', 'B'};

std::string state_block(const TrainerState& s) {
  std::string out = "\n[state]\n";
  out += "step = " + std::to_string(s.step) + "\n";
  out += "epoch = " + std::to_string(s.epoch) + "\n";
  out += "cursor = " + std::to_string(s.cursor) + "\n";
  out += "best_valid = " + (std::isinf(s.best_valid) ? std::string("inf") : format_double(s.best_valid)) + "\n";
  out += "rng = " + s.rng + "\n";
  return out;
}

std::size_t to_count(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return static_cast<std::size_t>(n);
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint: bad value for state." + key);
  }
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<char> checkpoint_bytes(const Checkpoint& ckpt, PayloadType payload) {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(ckpt.config_text + state_block(ckpt.state));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ContractError("checkpoint: tensor " + t.name + " has the wrong size");
    w.put_string(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(payload));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (const auto d : t.shape) w.put<std::uint64_t>(d);
    if (payload == PayloadType::fp64) {
      w.put_bytes(t.values.data(), t.values.size() * sizeof(double));
    } else {
      for (const double v : t.values) w.put<float>(static_cast<float>(v));
    }
  }
  w.seal();
  return w.bytes();
}

Checkpoint parse_checkpoint(const std::vector<char>& bytes, const std::string& what) {
  ByteReader r(bytes, what);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(what + ": not a checkpoint (bad magic)");
  r.check_crc();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported format version " + std::to_string(version));

  Checkpoint ck;
  const auto block = r.get_string();
  const auto marker = block.find("\n[state]\n");
  if (marker == std::string::npos) throw FormatError(what + ": config block has no [state] section");
  ck.config_text = block.substr(0, marker);
  for (const auto& line : parse_config_lines(block.substr(marker), what)) {
    if (line.key == "step") ck.state.step = to_count(line.value, line.key);
    else if (line.key == "epoch") ck.state.epoch = to_count(line.value, line.key);
    else if (line.key == "cursor") ck.state.cursor = to_count(line.value, line.key);
    else if (line.key == "best_valid") ck.state.best_valid = line.value == "inf" ? INFINITY : std::stod(line.value);
    else if (line.key == "rng") ck.state.rng = line.value;
    else throw FormatError(what + ": unknown state key " + line.key);
  }

  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_string();
    const auto type = r.get<std::uint8_t>();
    if (type > 1) throw FormatError(what + ": tensor " + t.name + " has unknown payload type");
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    t.values.resize(shape_numel(t.shape));
    if (static_cast<PayloadType>(type) == PayloadType::fp64) {
      r.get_bytes(t.values.data(), t.values.size() * sizeof(double));
    } else {
      for (auto& v : t.values) v = r.get<float>();
    }
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(what + ": trailing bytes after the last tensor");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt, PayloadType payload) {
  write_file_bytes(path, checkpoint_bytes(ckpt, payload));
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file_bytes(path), "checkpoint " + path); }

std::vector<StoredTensor> stored_parameters(const Model& model) {
  std::vector<StoredTensor> out;
  for (const auto& p : model.parameters())
    out.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
  return out;
}

void restore_parameters(Model& model, const Checkpoint& ckpt) {
  for (auto& p : model.parameters()) {
    const auto* t = ckpt.find(p.name);
    if (!t) throw FormatError("checkpoint: missing parameter " + p.name);
    if (t->shape != p.tensor.shape())
      throw FormatError("checkpoint: parameter " + p.name + " has shape " + shape_string(t->shape) + ", model expects " +
                        shape_string(p.tensor.shape()));
    std::copy(t->values.begin(), t->values.end(), p.tensor.mutable_data().begin());
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = ckpt.config();
  Model model(cfg.model, cfg.cluster_sizes);
  restore_parameters(model, ckpt);
  return model;
}

}  // namespace mshubert
