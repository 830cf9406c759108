#pragma once

#include "skipnet/dataset.hpp"
#include "skipnet/network.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace skipnet {

/// Unreadable or inconsistent checkpoint file.
class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'K', 'I', 'P', 'N', 'E', 'T', '\0'};

/// Layout: 8-byte magic, u64 LE header length, JSON header (spec, fixed
/// matrices as float64, tensor names and shapes), then every tensor as
/// little-endian float32 in header order. Trainable parameters come first,
/// then BN running statistics.
template <class Scalar>
void save_checkpoint(const std::filesystem::path& file, const Network<Scalar>& net,
                     const std::optional<ChannelNorm>& norm = std::nullopt);

template <class Scalar>
Network<Scalar> load_checkpoint(const std::filesystem::path& file);

/// Input normalization stored alongside the weights, if any.
std::optional<ChannelNorm> read_checkpoint_norm(const std::filesystem::path& file);

/// The JSON header alone, for inspection.
std::string read_checkpoint_header(const std::filesystem::path& file);

}  // namespace skipnet
