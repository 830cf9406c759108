#pragma once

#include "skipnet/tensor.hpp"

#include <array>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace skipnet {

/// Missing, truncated or malformed data files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };

struct ChannelNorm {
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> stddev{1.f, 1.f, 1.f};
};

/// Images are stored as raw pixels scaled to [0, 1]; normalization happens
/// per batch, after augmentation.
struct Dataset {
  Tensor<float> images;  // N x 3 x 32 x 32
  std::vector<int> labels;
  Split split = Split::train;
  ChannelNorm norm;
  int num_classes = 10;

  Index size() const { return static_cast<Index>(labels.size()); }
  /// First n records (all of them when n <= 0 or n >= size()).
  Dataset head(Index n) const;
};

inline constexpr Index kCifarSide = 32;
inline constexpr Index kCifarChannels = 3;
inline constexpr Index kCifarPixels = kCifarChannels * kCifarSide * kCifarSide;  // 3072
inline constexpr Index kCifarRecordBytes = 1 + kCifarPixels;                     // 3073

/// One CIFAR-10 binary batch: records of 1 label byte + 3072 channel-planar pixel bytes.
Dataset read_cifar10_batch(const std::filesystem::path& file);

/// data_batch_1..5.bin (train) and test_batch.bin (test). Normalization stats
/// of both splits are computed from the train split.
std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& directory);

void write_cifar10_batch(const std::filesystem::path& file, const Dataset& data);

ChannelNorm compute_channel_norm(const Tensor<float>& images);

/// (x - mean_c) / std_c over an N x 3 x H x W tensor.
Tensor<float> normalize(const Tensor<float>& images, const ChannelNorm& norm);

inline constexpr Index kAugmentPad = 4;

/// Crop at (top, left) of the image zero-padded by 4 on each side, optionally mirrored.
Tensor<float> crop_and_mirror(const Tensor<float>& image, Index top, Index left, bool mirror);

Tensor<float> mirror_horizontal(const Tensor<float>& image);

/// Uniform crop offset in [0, 8]^2 and a fair mirror coin.
Tensor<float> augment(const Tensor<float>& image, std::mt19937_64& rng);

/// Normalized (and optionally augmented) batch for the given record indices.
Tensor<float> make_batch(const Dataset& data, std::span<const Index> indices, bool augment_images,
                         std::mt19937_64& rng);

}  // namespace skipnet
