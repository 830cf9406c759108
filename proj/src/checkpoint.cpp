#include "skipnet/checkpoint.hpp"

#include "skipnet/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace skipnet {

using nlohmann::json;

namespace {

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json optional_matrix_json(const std::optional<Eigen::MatrixXd>& m) { return m ? matrix_json(*m) : json(nullptr); }

Eigen::MatrixXd matrix_from_json(const json& j, Index size, const std::string& what) {
  if (!j.is_array() || static_cast<Index>(j.size()) != size) {
    throw CheckpointError("checkpoint: " + what + " is not a " + std::to_string(size) + "x" + std::to_string(size) +
                          " matrix");
  }
  Eigen::MatrixXd m(size, size);
  for (Index r = 0; r < size; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Index>(row.size()) != size) {
      throw CheckpointError("checkpoint: row " + std::to_string(r) + " of " + what + " has the wrong length");
    }
    for (Index c = 0; c < size; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

std::optional<Eigen::MatrixXd> optional_matrix_from_json(const json& j, Index size, const std::string& what) {
  if (j.is_null()) return std::nullopt;
  return matrix_from_json(j, size, what);
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

template <class Scalar>
std::vector<NamedTensor<Scalar>> all_tensors(Network<Scalar>& net) {
  auto tensors = net.parameters();
  for (auto& b : net.buffers()) tensors.push_back(b);
  return tensors;
}

struct Header {
  json j;
  std::size_t body_offset = 0;
};

Header read_header(const std::vector<unsigned char>& bytes, const std::filesystem::path& file) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError(file.string() + " is not a skipnet checkpoint (bad magic)");
  }
  const std::uint64_t len = read_u64_le(bytes.data() + 8);
  if (len > bytes.size() - 16) {
    throw CheckpointError(file.string() + ": header length " + std::to_string(len) + " exceeds the file size");
  }
  Header h;
  try {
    h.j = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw CheckpointError(file.string() + ": malformed header: " + e.what());
  }
  h.body_offset = 16 + static_cast<std::size_t>(len);
  return h;
}

std::vector<unsigned char> read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

template <class Scalar>
void save_checkpoint(const std::filesystem::path& file, const Network<Scalar>& net_in,
                     const std::optional<ChannelNorm>& norm) {
  Network<Scalar> net = net_in;
  json header;
  header["format"] = "skipnet-checkpoint";
  header["version"] = 1;
  header["spec"] = to_json(net.spec);
  if (norm) header["normalization"] = {{"mean", norm->mean}, {"std", norm->stddev}};
  json stages = json::array();
  for (const auto& st : net.stages) {
    json blocks = json::array();
    for (const auto& b : st.blocks) {
      const auto& p = b.skip->params();
      blocks.push_back({{"skip",
                         {{"kind", std::string(to_string(b.skip->kind()))},
                          {"branches", p.branches},
                          {"seed", p.seed},
                          {"period", p.period},
                          {"matrix", matrix_json(b.skip->matrix())}}},
                        {"pre_mix", optional_matrix_json(b.pre_mix)},
                        {"post_mix", optional_matrix_json(b.post_mix)}});
    }
    stages.push_back({{"width", st.width},
                      {"input_mix", optional_matrix_json(st.input_mix)},
                      {"output_mix", optional_matrix_json(st.output_mix)},
                      {"blocks", blocks}});
  }
  header["stages"] = stages;
  json tensors = json::array();
  const auto all = all_tensors(net);
  for (const auto& t : all) tensors.push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
  header["tensors"] = tensors;

  std::ofstream out(file, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + file.string());
  const std::string text = header.dump();
  out.write(kCheckpointMagic, 8);
  write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : all) {
    for (Index i = 0; i < t.tensor->size(); ++i) {
      const auto f = static_cast<float>((*t.tensor)[i]);
      const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + file.string());
}

std::optional<ChannelNorm> read_checkpoint_norm(const std::filesystem::path& file) {
  const auto bytes = read_file(file);
  const json j = read_header(bytes, file).j;
  if (!j.contains("normalization")) return std::nullopt;
  try {
    ChannelNorm n;
    n.mean = j.at("normalization").at("mean").get<std::array<float, 3>>();
    n.stddev = j.at("normalization").at("std").get<std::array<float, 3>>();
    return n;
  } catch (const json::exception& e) {
    throw CheckpointError(file.string() + ": malformed normalization entry: " + e.what());
  }
}

std::string read_checkpoint_header(const std::filesystem::path& file) {
  const auto bytes = read_file(file);
  return read_header(bytes, file).j.dump(2);
}

template <class Scalar>
Network<Scalar> load_checkpoint(const std::filesystem::path& file) {
  const auto bytes = read_file(file);
  const Header h = read_header(bytes, file);
  const json& j = h.j;
  const std::string name = file.string();
  Network<Scalar> net;
  try {
    if (j.value("format", "") != "skipnet-checkpoint") throw CheckpointError(name + ": unknown format tag");
    const NetworkSpec spec = network_spec_from_json(j.at("spec"), "spec");
    net = build_network<Scalar>(spec, 0);
    const json& stages = j.at("stages");
    if (!stages.is_array() || stages.size() != net.stages.size()) {
      throw CheckpointError(name + ": stage count does not match the spec");
    }
    for (std::size_t s = 0; s < net.stages.size(); ++s) {
      auto& st = net.stages[s];
      const json& sj = stages[s];
      const std::string at = "stage" + std::to_string(s);
      if (sj.at("width").get<Index>() != st.width) throw CheckpointError(name + ": " + at + " width mismatch");
      st.input_mix = optional_matrix_from_json(sj.at("input_mix"), st.width, at + ".input_mix");
      st.output_mix = optional_matrix_from_json(sj.at("output_mix"), st.width, at + ".output_mix");
      const json& blocks = sj.at("blocks");
      if (!blocks.is_array() || blocks.size() != st.blocks.size()) {
        throw CheckpointError(name + ": " + at + " block count does not match the spec");
      }
      std::shared_ptr<const StructuredTransform> previous;
      for (std::size_t b = 0; b < st.blocks.size(); ++b) {
        const json& bj = blocks[b];
        const std::string bat = at + ".block" + std::to_string(b);
        const json& sk = bj.at("skip");
        const TransformKind kind = parse_transform_kind(sk.at("kind").get<std::string>());
        Eigen::MatrixXd m = matrix_from_json(sk.at("matrix"), st.width, bat + ".skip");
        // Stage-shared skips were saved once per block; restore the sharing.
        if (previous && previous->kind() == kind && previous->matrix() == m) {
          st.blocks[b].skip = previous;
        } else {
          TransformParams p{sk.at("branches").get<int>(), sk.at("seed").get<std::uint64_t>(),
                            sk.at("period").get<int>()};
          st.blocks[b].skip = std::make_shared<const StructuredTransform>(kind, std::move(m), p);
          previous = st.blocks[b].skip;
        }
        st.blocks[b].pre_mix = optional_matrix_from_json(bj.at("pre_mix"), st.width, bat + ".pre_mix");
        st.blocks[b].post_mix = optional_matrix_from_json(bj.at("post_mix"), st.width, bat + ".post_mix");
      }
    }
  } catch (const json::exception& e) {
    throw CheckpointError(name + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(name + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(name + ": " + e.what());
  }

  auto all = all_tensors(net);
  const json& tensors = j.at("tensors");
  if (!tensors.is_array() || tensors.size() != all.size()) {
    throw CheckpointError(name + ": header lists " + std::to_string(tensors.size()) + " tensors, network has " +
                          std::to_string(all.size()));
  }
  std::size_t offset = h.body_offset;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const json& tj = tensors[i];
    const std::string tname = tj.at("name").get<std::string>();
    const Shape shape = tj.at("shape").get<Shape>();
    if (tname != all[i].name || shape != all[i].tensor->shape()) {
      throw CheckpointError(name + ": tensor " + std::to_string(i) + " is " + tname + " " + to_string(shape) +
                            ", expected " + all[i].name + " " + to_string(all[i].tensor->shape()));
    }
    const std::size_t need = static_cast<std::size_t>(all[i].tensor->size()) * 4;
    if (offset + need > bytes.size()) {
      throw CheckpointError(name + ": truncated while reading " + tname + " (" + std::to_string(bytes.size()) +
                            " bytes, need " + std::to_string(offset + need) + ")");
    }
    for (Index k = 0; k < all[i].tensor->size(); ++k) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + offset + static_cast<std::size_t>(k) * 4, 4);
      (*all[i].tensor)[k] = static_cast<Scalar>(std::bit_cast<float>(to_le(bits)));
    }
    offset += need;
  }
  if (offset != bytes.size()) {
    throw CheckpointError(name + ": " + std::to_string(bytes.size() - offset) + " trailing bytes after the last tensor");
  }
  return net;
}

template void save_checkpoint(const std::filesystem::path&, const Network<float>&, const std::optional<ChannelNorm>&);
template void save_checkpoint(const std::filesystem::path&, const Network<double>&, const std::optional<ChannelNorm>&);
template Network<float> load_checkpoint(const std::filesystem::path&);
template Network<double> load_checkpoint(const std::filesystem::path&);

}  // namespace skipnet
