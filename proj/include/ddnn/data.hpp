#pragma once

#include "ddnn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ddnn::data {

struct LabeledImage {
  Eigen::ArrayXf pixels;  // channel-planar C x H x W, values in [0, 1]
  int channels = 0;
  int height = 0;
  int width = 0;
  int label = 0;
  int coarse_label = -1;  // CIFAR-100 only; kept so records re-encode exactly

  Index size() const { return Index(channels) * height * width; }
  float at(int c, int y, int x) const { return pixels((Index(c) * height + y) * width + x); }
};

struct Dataset {
  std::vector<LabeledImage> images;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
};

enum class CifarVariant { cifar10, cifar100 };

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
std::size_t cifar_record_bytes(CifarVariant v);
int cifar_classes(CifarVariant v);

// One binary record: label byte(s), then R, G, B planes of 32 x 32 bytes.
LabeledImage parse_cifar_record(std::span<const std::uint8_t> record,
                                CifarVariant variant = CifarVariant::cifar10);
std::vector<std::uint8_t> encode_cifar_record(const LabeledImage& img,
                                              CifarVariant variant = CifarVariant::cifar10);

// Reads data_batch_{1..5}.bin / test_batch.bin (CIFAR-10) or train.bin / test.bin (CIFAR-100)
// from `dir`. A positive `limit` keeps only the first `limit` records.
Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, bool train,
                   std::size_t limit = 0);

struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;

  // Per-channel statistics over every pixel of every image.
  static Normalization fit(const Dataset& set);
  void validate(int channels) const;
  void apply(LabeledImage& img) const;
  void invert(LabeledImage& img) const;
};

using Rng = std::mt19937_64;

// Zero-pads by `pad` on each side, crops the original size at (oy, ox) in the padded frame and
// mirrors horizontally when `flip` is set. (pad, pad, false) is the identity.
LabeledImage crop_flip(const LabeledImage& img, int pad, int oy, int ox, bool flip);

// Random crop with offsets uniform in [0, 2 pad] per axis, then a coin-flip mirror.
LabeledImage augment_train(const LabeledImage& img, Rng& rng, int pad = 4);

// Scale/aspect crop resized back to the input size with nearest sampling. Experimental:
// reachable only through `augment=imagenet`.
LabeledImage random_resized_crop(const LabeledImage& img, Rng& rng);

struct SyntheticSpec {
  int classes = 4;
  int per_class = 500;
  int channels = 3;
  int height = 16;
  int width = 16;
  std::uint64_t seed = 0;
  // Gaussian pixel noise std; also scales how far blob centres wander.
  double noise = 0.25;
};

// Class-conditional blob images. Labels cycle 0..M-1, so every prefix is near balanced. Each
// class owns a few coloured Gaussian blobs; samples jitter them and add pixel noise.
Dataset make_synthetic_set(const SyntheticSpec& spec);

// Seeded per-epoch shuffling into mini-batches. A trailing batch of one sample is merged into
// the previous batch so batch statistics always see at least two samples.
class BatchLoader {
 public:
  BatchLoader(std::size_t num_records, std::size_t batch_size, std::uint64_t seed,
              bool shuffle = true);

  std::vector<std::vector<std::size_t>> epoch_batches(int epoch) const;
  std::size_t num_records() const { return n_; }

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
};

template <typename S>
struct Batch {
  Tensor<S> images;  // N x C x H x W, normalized
  std::vector<int> labels;
};

// Gathers `indices` of `set` into one tensor. Images pass through `transform` (if any) before
// normalization.
template <typename S>
Batch<S> make_batch(const Dataset& set, std::span<const std::size_t> indices,
                    const Normalization& norm,
                    const std::function<LabeledImage(const LabeledImage&)>& transform = {});

}  // namespace ddnn::data
