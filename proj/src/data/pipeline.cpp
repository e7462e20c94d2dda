#include "ddnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ddnn::data {

Normalization Normalization::fit(const Dataset& set) {
  if (set.empty()) throw std::invalid_argument("normalization: empty dataset");
  const int c = set.images[0].channels;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  double count = 0;
  for (const auto& img : set.images) {
    if (img.channels != c) throw ShapeError("normalization: mixed channel counts");
    const Index plane = Index(img.height) * img.width;
    for (int ch = 0; ch < c; ++ch) {
      for (Index i = 0; i < plane; ++i) {
        const double v = img.pixels(ch * plane + i);
        sum[ch] += v;
        sq[ch] += v * v;
      }
    }
    count += static_cast<double>(plane);
  }
  Normalization n;
  for (int ch = 0; ch < c; ++ch) {
    const double mean = sum[ch] / count;
    const double var = std::max(sq[ch] / count - mean * mean, 0.0);
    n.mean.push_back(static_cast<float>(mean));
    n.std.push_back(static_cast<float>(std::sqrt(var)));
  }
  n.validate(c);
  return n;
}

void Normalization::validate(int channels) const {
  if (static_cast<int>(mean.size()) != channels || static_cast<int>(std.size()) != channels) {
    throw ShapeError("normalization: expected " + std::to_string(channels) + " channels");
  }
  for (float s : std) {
    if (!(s > 0)) throw std::invalid_argument("normalization: channel std must be > 0");
  }
}

void Normalization::apply(LabeledImage& img) const {
  validate(img.channels);
  const Index plane = Index(img.height) * img.width;
  for (int ch = 0; ch < img.channels; ++ch) {
    img.pixels.segment(ch * plane, plane) = (img.pixels.segment(ch * plane, plane) - mean[ch]) / std[ch];
  }
}

void Normalization::invert(LabeledImage& img) const {
  validate(img.channels);
  const Index plane = Index(img.height) * img.width;
  for (int ch = 0; ch < img.channels; ++ch) {
    img.pixels.segment(ch * plane, plane) = img.pixels.segment(ch * plane, plane) * std[ch] + mean[ch];
  }
}

LabeledImage crop_flip(const LabeledImage& img, int pad, int oy, int ox, bool flip) {
  if (pad < 0 || oy < 0 || ox < 0 || oy > 2 * pad || ox > 2 * pad) {
    throw std::invalid_argument("crop_flip: offsets must lie in [0, 2 pad]");
  }
  LabeledImage out = img;
  const int h = img.height, w = img.width;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        // Position in the padded frame, then back to source coordinates.
        const int sy = oy + y - pad;
        const int sx = ox + (flip ? w - 1 - x : x) - pad;
        const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
        out.pixels((Index(c) * h + y) * w + x) = inside ? img.at(c, sy, sx) : 0.0f;
      }
    }
  }
  return out;
}

LabeledImage augment_train(const LabeledImage& img, Rng& rng, int pad) {
  std::uniform_int_distribution<int> offset(0, 2 * pad);
  const int oy = offset(rng);
  const int ox = offset(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  return crop_flip(img, pad, oy, ox, flip);
}

LabeledImage random_resized_crop(const LabeledImage& img, Rng& rng) {
  const double area = double(img.height) * img.width;
  std::uniform_real_distribution<double> scale(0.08, 1.0);
  std::uniform_real_distribution<double> log_ratio(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  int ch = img.height, cw = img.width, y0 = 0, x0 = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * scale(rng);
    const double ratio = std::exp(log_ratio(rng));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= img.width && h <= img.height) {
      ch = h;
      cw = w;
      y0 = std::uniform_int_distribution<int>(0, img.height - h)(rng);
      x0 = std::uniform_int_distribution<int>(0, img.width - w)(rng);
      break;
    }
  }
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  LabeledImage out = img;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const int sy = y0 + y * ch / img.height;
        int sx = x0 + x * cw / img.width;
        if (flip) sx = x0 + cw - 1 - (sx - x0);
        out.pixels((Index(c) * img.height + y) * img.width + x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

Dataset make_synthetic_set(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("synthetic set: need at least 2 classes");
  if (spec.per_class < 1 || spec.channels < 1 || spec.height < 1 || spec.width < 1) {
    throw std::invalid_argument("synthetic set: sizes must be positive");
  }
  if (!(spec.noise >= 0)) throw std::invalid_argument("synthetic set: noise must be >= 0");

  struct Blob {
    double cy, cx, sigma;
    std::vector<double> color;
  };
  constexpr int kBlobsPerClass = 3;
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<Blob>> templates(spec.classes);
  for (auto& blobs : templates) {
    for (int b = 0; b < kBlobsPerClass; ++b) {
      Blob blob;
      blob.cy = (0.2 + 0.6 * unit(rng)) * spec.height;
      blob.cx = (0.2 + 0.6 * unit(rng)) * spec.width;
      blob.sigma = (0.08 + 0.10 * unit(rng)) * std::min(spec.height, spec.width);
      for (int c = 0; c < spec.channels; ++c) blob.color.push_back(2.0 * unit(rng) - 1.0);
      blobs.push_back(std::move(blob));
    }
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double jitter = 6.0 * spec.noise;  // pixels of centre wander per unit noise
  Dataset set;
  set.num_classes = spec.classes;
  const int total = spec.classes * spec.per_class;
  for (int i = 0; i < total; ++i) {
    LabeledImage img;
    img.channels = spec.channels;
    img.height = spec.height;
    img.width = spec.width;
    img.label = i % spec.classes;
    img.pixels = Eigen::ArrayXf::Constant(img.size(), 0.5f);
    Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(img.size());
    for (const auto& blob : templates[img.label]) {
      const double cy = blob.cy + jitter * gauss(rng);
      const double cx = blob.cx + jitter * gauss(rng);
      const double amp = 0.6 + 0.4 * unit(rng);
      for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          const double g = amp * std::exp(-d2 / (2 * blob.sigma * blob.sigma));
          for (int c = 0; c < spec.channels; ++c) {
            acc((Index(c) * spec.height + y) * spec.width + x) += g * blob.color[c];
          }
        }
      }
    }
    for (Index p = 0; p < img.size(); ++p) {
      const double v = 0.5 + 0.35 * acc(p) + spec.noise * gauss(rng);
      img.pixels(p) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    set.images.push_back(std::move(img));
  }
  return set;
}

BatchLoader::BatchLoader(std::size_t num_records, std::size_t batch_size, std::uint64_t seed,
                         bool shuffle)
    : n_(num_records), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size_ == 0) throw std::invalid_argument("batch loader: batch_size must be >= 1");
}

std::vector<std::vector<std::size_t>> BatchLoader::epoch_batches(int epoch) const {
  std::vector<std::size_t> order(n_);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    Rng rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n_; i += batch_size_) {
    batches.emplace_back(order.begin() + i, order.begin() + std::min(n_, i + batch_size_));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

template <typename S>
Batch<S> make_batch(const Dataset& set, std::span<const std::size_t> indices,
                    const Normalization& norm,
                    const std::function<LabeledImage(const LabeledImage&)>& transform) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no indices");
  const auto& first = set.images.at(indices[0]);
  const Index per = first.size();
  detail::Buffer<S> data(per * static_cast<Index>(indices.size()));
  Batch<S> out;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& src = set.images.at(indices[b]);
    if (src.channels != first.channels || src.height != first.height || src.width != first.width) {
      throw ShapeError("make_batch: images differ in shape");
    }
    LabeledImage img = transform ? transform(src) : src;
    norm.apply(img);
    data.segment(static_cast<Index>(b) * per, per) = img.pixels.cast<S>();
    out.labels.push_back(img.label);
  }
  out.images = Tensor<S>::from({static_cast<Index>(indices.size()), first.channels, first.height, first.width},
                               std::move(data));
  return out;
}

template Batch<float> make_batch(const Dataset&, std::span<const std::size_t>, const Normalization&,
                                 const std::function<LabeledImage(const LabeledImage&)>&);
template Batch<double> make_batch(const Dataset&, std::span<const std::size_t>, const Normalization&,
                                  const std::function<LabeledImage(const LabeledImage&)>&);

}  // namespace ddnn::data
