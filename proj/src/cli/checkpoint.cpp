#include "ddnn/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace ddnn::cli {

namespace {

constexpr char kMagic[8] = {'D', 'D', 'N', 'N', 'C', 'K', 'P', 'T'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw CheckpointError("checkpoint: unknown dtype '" + s + "'");
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<const CheckpointTensor*> order;
  for (const auto& t : ckpt.tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->name < b->name; });

  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& t = *order[i];
    if (i > 0 && order[i - 1]->name == t.name) throw CheckpointError("checkpoint: duplicate tensor " + t.name);
    if (static_cast<Index>(t.values.size()) != numel_of(t.shape)) {
      throw CheckpointError("checkpoint: tensor " + t.name + " has " + std::to_string(t.values.size()) +
                            " values for shape " + shape_str(t.shape));
    }
    const std::uint64_t length = 4 * static_cast<std::uint64_t>(t.values.size());
    entries.push_back({{"name", t.name},
                       {"dtype", dtype_name(t.dtype)},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"length", length}});
    offset += length;
  }
  nlohmann::json manifest = {{"format_version", kCheckpointVersion}, {"meta", ckpt.meta}, {"tensors", entries}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto* t : order) {
    for (float v : t->values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 8 + 4 + 8;
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CheckpointError("checkpoint: bad magic (not a checkpoint file)");
  }
  const auto version = get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes.data() + 12);
  if (manifest_len > bytes.size() - header) throw CheckpointError("checkpoint: manifest runs past end of file");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + header + manifest_len);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: unreadable manifest: ") + e.what());
  }
  const std::uint8_t* payload = bytes.data() + header + manifest_len;
  const std::uint64_t payload_len = bytes.size() - header - manifest_len;

  Checkpoint ckpt;
  try {
    if (manifest.at("format_version").get<std::uint32_t>() != version) {
      throw CheckpointError("checkpoint: manifest version disagrees with header");
    }
    ckpt.meta = manifest.at("meta");
    std::set<std::string> names;
    for (const auto& e : manifest.at("tensors")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      if (!names.insert(t.name).second) throw CheckpointError("checkpoint: duplicate tensor " + t.name);
      t.dtype = parse_dtype(e.at("dtype").get<std::string>());
      t.shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      for (Index d : t.shape) {
        if (d < 0) throw CheckpointError("checkpoint: negative extent in " + t.name);
      }
      if (offset > payload_len || length > payload_len - offset) {
        throw CheckpointError("checkpoint: tensor " + t.name + " [" + std::to_string(offset) + ", +" +
                              std::to_string(length) + ") lies outside the " +
                              std::to_string(payload_len) + "-byte payload");
      }
      if (length != 4 * static_cast<std::uint64_t>(numel_of(t.shape))) {
        throw CheckpointError("checkpoint: tensor " + t.name + " length does not match its shape");
      }
      t.values.resize(length / 4);
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        t.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload + offset + 4 * i));
      }
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

template <typename S>
Checkpoint snapshot(net::Ddnn<S>& net, nlohmann::json meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  auto add = [&](const std::string& name, Shape shape, const detail::Buffer<S>& data) {
    CheckpointTensor t{name, dtype_of<S>(), std::move(shape), {}};
    t.values.resize(static_cast<std::size_t>(data.size()));
    for (Index i = 0; i < data.size(); ++i) t.values[i] = static_cast<float>(data(i));
    ckpt.tensors.push_back(std::move(t));
  };
  net.visit_state({[&](const std::string& name, Tensor<S>& p) { add(name, p.shape(), p.data()); },
                   [&](const std::string& name, detail::Buffer<S>& b) { add(name, Shape{b.size()}, b); }});
  std::sort(ckpt.tensors.begin(), ckpt.tensors.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return ckpt;
}

template <typename S>
void restore(net::Ddnn<S>& net, const Checkpoint& ckpt) {
  std::set<std::string> used;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const CheckpointTensor& {
    const auto* t = ckpt.find(name);
    if (!t) throw CheckpointError("checkpoint lacks tensor " + name);
    if (t->shape != shape) {
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(t->shape) +
                            ", network expects " + shape_str(shape));
    }
    used.insert(name);
    return *t;
  };
  auto fill = [](detail::Buffer<S>& dst, const CheckpointTensor& t) {
    for (Index i = 0; i < dst.size(); ++i) dst(i) = static_cast<S>(t.values[i]);
  };
  net.visit_state({[&](const std::string& name, Tensor<S>& p) { fill(p.mutable_data(), fetch(name, p.shape())); },
                   [&](const std::string& name, detail::Buffer<S>& b) { fill(b, fetch(name, Shape{b.size()})); }});
  if (used.size() != ckpt.tensors.size()) {
    for (const auto& t : ckpt.tensors) {
      if (!used.count(t.name)) throw CheckpointError("checkpoint tensor " + t.name + " has no place in the network");
    }
  }
}

template Checkpoint snapshot(net::Ddnn<float>&, nlohmann::json);
template Checkpoint snapshot(net::Ddnn<double>&, nlohmann::json);
template void restore(net::Ddnn<float>&, const Checkpoint&);
template void restore(net::Ddnn<double>&, const Checkpoint&);

}  // namespace ddnn::cli
