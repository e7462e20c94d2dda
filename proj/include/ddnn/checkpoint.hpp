#pragma once

#include "ddnn/network.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddnn::cli {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::f32;  // compute dtype of the source; the payload is always f32
  Shape shape;
  std::vector<float> values;
};

// Container layout: "DDNNCKPT", u32 version, u64 manifest size, JSON manifest, f32 LE payload.
// The manifest lists tensors sorted by name with byte offsets into the payload.
struct Checkpoint {
  std::vector<CheckpointTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const CheckpointTensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameters and buffers of `net` under their state names.
template <typename S>
Checkpoint snapshot(net::Ddnn<S>& net, nlohmann::json meta = nlohmann::json::object());

// Writes every tensor of `ckpt` into `net`. The name sets and shapes must match exactly.
template <typename S>
void restore(net::Ddnn<S>& net, const Checkpoint& ckpt);

}  // namespace ddnn::cli
