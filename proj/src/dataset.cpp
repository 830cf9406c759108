#include "skipnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace skipnet {

Dataset Dataset::head(Index n) const {
  if (n <= 0 || n >= size()) return *this;
  Dataset out;
  out.split = split;
  out.norm = norm;
  out.num_classes = num_classes;
  out.labels.assign(labels.begin(), labels.begin() + n);
  Shape shape = images.shape();
  shape[0] = n;
  out.images = Tensor<float>(shape, images.array().head(n * kCifarPixels));
  return out;
}

Dataset read_cifar10_batch(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR-10 batch file " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto size = static_cast<Index>(bytes.size());
  if (size == 0 || size % kCifarRecordBytes != 0) {
    throw DataError("CIFAR-10 batch file " + file.string() + " has " + std::to_string(size) +
                    " bytes, expected a positive multiple of the " + std::to_string(kCifarRecordBytes) +
                    "-byte record size");
  }
  const Index n = size / kCifarRecordBytes;
  Dataset d;
  d.images = Tensor<float>({n, kCifarChannels, kCifarSide, kCifarSide});
  d.labels.resize(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError("CIFAR-10 batch file " + file.string() + ": record " + std::to_string(r) + " has label " +
                      std::to_string(rec[0]));
    }
    d.labels[static_cast<std::size_t>(r)] = rec[0];
    float* dst = d.images.data() + r * kCifarPixels;
    for (Index i = 0; i < kCifarPixels; ++i) dst[i] = static_cast<float>(rec[1 + i]) / 255.0f;
  }
  return d;
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
  Index n = 0;
  for (const auto& p : parts) n += p.size();
  Dataset out;
  out.images = Tensor<float>({n, kCifarChannels, kCifarSide, kCifarSide});
  Index at = 0;
  for (const auto& p : parts) {
    out.images.array().segment(at * kCifarPixels, p.size() * kCifarPixels) = p.images.array();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    at += p.size();
  }
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& directory) {
  std::vector<Dataset> parts;
  for (int i = 1; i <= 5; ++i) {
    parts.push_back(read_cifar10_batch(directory / ("data_batch_" + std::to_string(i) + ".bin")));
  }
  Dataset train = concat(std::move(parts));
  Dataset test = read_cifar10_batch(directory / "test_batch.bin");
  train.split = Split::train;
  test.split = Split::test;
  train.norm = compute_channel_norm(train.images);
  test.norm = train.norm;
  return {std::move(train), std::move(test)};
}

void write_cifar10_batch(const std::filesystem::path& file, const Dataset& data) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  std::vector<unsigned char> rec(static_cast<std::size_t>(kCifarRecordBytes));
  for (Index r = 0; r < data.size(); ++r) {
    rec[0] = static_cast<unsigned char>(data.labels[static_cast<std::size_t>(r)]);
    const float* src = data.images.data() + r * kCifarPixels;
    for (Index i = 0; i < kCifarPixels; ++i) {
      const float v = std::clamp(src[i], 0.0f, 1.0f);
      rec[static_cast<std::size_t>(1 + i)] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

ChannelNorm compute_channel_norm(const Tensor<float>& images) {
  if (images.rank() != 4 || images.dim(1) != kCifarChannels) {
    throw ShapeError("compute_channel_norm: expected Nx3xHxW, got " + to_string(images.shape()));
  }
  const Index n = images.dim(0), plane = images.dim(2) * images.dim(3);
  ChannelNorm norm;
  for (Index c = 0; c < kCifarChannels; ++c) {
    double s = 0, sq = 0;
    for (Index i = 0; i < n; ++i) {
      const float* p = images.data() + (i * kCifarChannels + c) * plane;
      for (Index k = 0; k < plane; ++k) {
        s += p[k];
        sq += static_cast<double>(p[k]) * p[k];
      }
    }
    const double count = static_cast<double>(n * plane);
    const double mean = s / count;
    const double var = std::max(sq / count - mean * mean, 0.0);
    norm.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
    norm.stddev[static_cast<std::size_t>(c)] = static_cast<float>(var > 0 ? std::sqrt(var) : 1.0);
  }
  return norm;
}

Tensor<float> normalize(const Tensor<float>& images, const ChannelNorm& norm) {
  if (images.rank() != 4 || images.dim(1) != kCifarChannels) {
    throw ShapeError("normalize: expected Nx3xHxW, got " + to_string(images.shape()));
  }
  Tensor<float> out(images.shape());
  const Index n = images.dim(0), plane = images.dim(2) * images.dim(3);
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < kCifarChannels; ++c) {
      const Index off = (i * kCifarChannels + c) * plane;
      const auto cc = static_cast<std::size_t>(c);
      out.array().segment(off, plane) = (images.array().segment(off, plane) - norm.mean[cc]) / norm.stddev[cc];
    }
  }
  return out;
}

Tensor<float> crop_and_mirror(const Tensor<float>& image, Index top, Index left, bool mirror) {
  if (image.rank() != 3) throw ShapeError("augment: expected CxHxW image, got " + to_string(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (top < 0 || left < 0 || top > 2 * kAugmentPad || left > 2 * kAugmentPad) {
    throw std::out_of_range("augment: crop offset outside the padded image");
  }
  Tensor<float> out(image.shape());
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < h; ++y) {
      const Index sy = y + top - kAugmentPad;
      for (Index x = 0; x < w; ++x) {
        const Index ox = mirror ? w - 1 - x : x;
        const Index sx = x + left - kAugmentPad;
        const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
        out[(ch * h + y) * w + ox] = inside ? image[(ch * h + sy) * w + sx] : 0.0f;
      }
    }
  }
  return out;
}

Tensor<float> mirror_horizontal(const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("mirror: expected CxHxW image, got " + to_string(image.shape()));
  Tensor<float> out(image.shape());
  const Index rows = image.dim(0) * image.dim(1), w = image.dim(2);
  for (Index r = 0; r < rows; ++r)
    for (Index x = 0; x < w; ++x) out[r * w + x] = image[r * w + w - 1 - x];
  return out;
}

Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> offset(0, 2 * kAugmentPad);
  std::bernoulli_distribution coin(0.5);
  const Index top = offset(rng);
  const Index left = offset(rng);
  return crop_and_mirror(image, top, left, coin(rng));
}

Tensor<float> make_batch(const Dataset& data, std::span<const Index> indices, bool augment_images,
                         std::mt19937_64& rng) {
  const Index n = static_cast<Index>(indices.size());
  Shape shape = data.images.shape();
  shape[0] = n;
  Tensor<float> raw(shape);
  const Index per = shape[1] * shape[2] * shape[3];
  for (Index i = 0; i < n; ++i) {
    const Index src = indices[static_cast<std::size_t>(i)];
    if (augment_images) {
      Tensor<float> img({shape[1], shape[2], shape[3]}, data.images.array().segment(src * per, per));
      raw.array().segment(i * per, per) = augment(img, rng).array();
    } else {
      raw.array().segment(i * per, per) = data.images.array().segment(src * per, per);
    }
  }
  return normalize(raw, data.norm);
}

}  // namespace skipnet
