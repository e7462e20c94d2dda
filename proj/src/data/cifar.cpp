#include "ddnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace ddnn::data {

std::size_t cifar_record_bytes(CifarVariant v) {
  return v == CifarVariant::cifar10 ? kCifarPixels + 1 : kCifarPixels + 2;
}

int cifar_classes(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

LabeledImage parse_cifar_record(std::span<const std::uint8_t> record, CifarVariant variant) {
  const std::size_t want = cifar_record_bytes(variant);
  if (record.size() != want) {
    throw std::invalid_argument("CIFAR record: expected " + std::to_string(want) + " bytes, got " +
                                std::to_string(record.size()));
  }
  LabeledImage img;
  img.channels = 3;
  img.height = 32;
  img.width = 32;
  std::size_t header = 1;
  if (variant == CifarVariant::cifar100) {
    img.coarse_label = record[0];
    img.label = record[1];
    header = 2;
    if (img.coarse_label >= 20) {
      throw std::invalid_argument("CIFAR record: coarse label " + std::to_string(img.coarse_label) +
                                  " out of range");
    }
  } else {
    img.label = record[0];
  }
  if (img.label >= cifar_classes(variant)) {
    throw std::invalid_argument("CIFAR record: label " + std::to_string(img.label) + " out of range");
  }
  img.pixels.resize(static_cast<Index>(kCifarPixels));
  for (std::size_t i = 0; i < kCifarPixels; ++i) {
    img.pixels(static_cast<Index>(i)) = static_cast<float>(record[header + i]) / 255.0f;
  }
  return img;
}

std::vector<std::uint8_t> encode_cifar_record(const LabeledImage& img, CifarVariant variant) {
  if (img.channels != 3 || img.height != 32 || img.width != 32 || img.size() != img.pixels.size()) {
    throw ShapeError("CIFAR record: image must be 3 x 32 x 32");
  }
  if (img.label < 0 || img.label >= cifar_classes(variant)) {
    throw std::invalid_argument("CIFAR record: label " + std::to_string(img.label) + " out of range");
  }
  std::vector<std::uint8_t> out;
  out.reserve(cifar_record_bytes(variant));
  if (variant == CifarVariant::cifar100) {
    out.push_back(static_cast<std::uint8_t>(img.coarse_label < 0 ? 0 : img.coarse_label));
  }
  out.push_back(static_cast<std::uint8_t>(img.label));
  for (Index i = 0; i < img.pixels.size(); ++i) {
    const float v = std::clamp(img.pixels(i), 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  }
  return out;
}

namespace {

void read_records(const std::filesystem::path& file, CifarVariant variant, std::size_t limit,
                  Dataset& out) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open CIFAR file " + file.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  const std::size_t rec = cifar_record_bytes(variant);
  if (bytes.size() % rec != 0) {
    throw std::runtime_error(file.string() + ": size " + std::to_string(bytes.size()) +
                             " is not a whole number of records");
  }
  for (std::size_t off = 0; off < bytes.size(); off += rec) {
    if (limit > 0 && out.images.size() >= limit) return;
    try {
      out.images.push_back(parse_cifar_record({bytes.data() + off, rec}, variant));
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(file.string() + " record " + std::to_string(off / rec) + ": " + e.what());
    }
  }
}

}  // namespace

Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, bool train,
                   std::size_t limit) {
  Dataset set;
  set.num_classes = cifar_classes(variant);
  std::vector<std::string> files;
  if (variant == CifarVariant::cifar10) {
    if (train) {
      for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else {
      files.push_back("test_batch.bin");
    }
  } else {
    files.push_back(train ? "train.bin" : "test.bin");
  }
  for (const auto& f : files) {
    if (limit > 0 && set.images.size() >= limit) break;
    read_records(dir / f, variant, limit, set);
  }
  return set;
}

}  // namespace ddnn::data
