#pragma once

// Versioned binary container for network parameters.
//
// Layout (little-endian):
//   "MA3CKPT\0"  u32 version  u32 precision bits (32 | 64)
//   meta map     u32 section count
//   per section: name, meta map, u32 tensor count,
//                per tensor: name, u64 rows, u64 cols, rows*cols values
// Strings are u32 length + bytes; a meta map is u32 count + (key, value) strings.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ma3/errors.hpp"
#include "ma3/nets.hpp"

namespace ma3 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using MetaMap = std::map<std::string, std::string>;

struct CheckpointTensor {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<double> values;  // column-major, stored at the file's precision
};

struct CheckpointSection {
  std::string name;
  MetaMap meta;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor& tensor(const std::string& name) const;
  const std::string& get(const std::string& key) const;
};

struct Checkpoint {
  int precision_bits = 32;
  MetaMap meta;
  std::vector<CheckpointSection> sections;

  bool has_section(const std::string& name) const;
  const CheckpointSection& section(const std::string& name) const;
};

/// Throws IoError when the file cannot be written.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws IoError on unreadable or truncated files and CheckpointVersionError
/// when the magic matches but the version does not.
Checkpoint load_checkpoint(const std::filesystem::path& path);

namespace detail {

MetaMap conv_stack_meta(const ConvStackArch& a);
ConvStackArch conv_stack_from_meta(const CheckpointSection& s);

template <typename Derived>
CheckpointTensor to_tensor(std::string name, const Eigen::MatrixBase<Derived>& m) {
  CheckpointTensor t{std::move(name), std::uint64_t(m.rows()), std::uint64_t(m.cols()), {}};
  t.values.reserve(std::size_t(m.size()));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) t.values.push_back(double(m(i, j)));
  return t;
}

template <typename Scalar>
void from_tensor(const CheckpointTensor& t, Eigen::Index rows, Eigen::Index cols, Eigen::Map<Mat<Scalar>> out) {
  if (t.rows != std::uint64_t(rows) || t.cols != std::uint64_t(cols))
    throw IoError("checkpoint: tensor '" + t.name + "' has the wrong shape");
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = Scalar(t.values[std::size_t(j * rows + i)]);
}

template <typename Scalar>
void params_to_section(const ParamLayout& layout, const Vec<Scalar>& params, CheckpointSection& s) {
  for (std::size_t i = 0; i < layout.blocks().size(); ++i)
    s.tensors.push_back(to_tensor(layout[i].name, layout.view(params, i)));
}

template <typename Scalar>
void params_from_section(const ParamLayout& layout, Vec<Scalar>& params, const CheckpointSection& s) {
  for (std::size_t i = 0; i < layout.blocks().size(); ++i) {
    const auto& b = layout[i];
    from_tensor<Scalar>(s.tensor(b.name), b.rows, b.cols, layout.view(params, i));
  }
}

}  // namespace detail

template <typename Scalar>
CheckpointSection classifier_section(const EmbeddingNet<Scalar>& net) {
  CheckpointSection s;
  s.name = "classifier";
  s.meta = detail::conv_stack_meta(net.arch().stack);
  s.meta["h_dim"] = std::to_string(net.arch().h_dim);
  detail::params_to_section(net.layout(), net.params(), s);
  s.tensors.push_back(detail::to_tensor("bn.running_mean", net.running_mean()));
  s.tensors.push_back(detail::to_tensor("bn.running_var", net.running_var()));
  return s;
}

template <typename Scalar>
EmbeddingNet<Scalar> classifier_from_section(const CheckpointSection& s) {
  EmbeddingArch arch;
  arch.stack = detail::conv_stack_from_meta(s);
  arch.h_dim = std::stoi(s.get("h_dim"));
  EmbeddingNet<Scalar> net(arch, 0);
  detail::params_from_section(net.layout(), net.params(), s);
  auto& rm = net.running_mean();
  auto& rv = net.running_var();
  detail::from_tensor<Scalar>(s.tensor("bn.running_mean"), rm.size(), 1, Eigen::Map<Mat<Scalar>>(rm.data(), rm.size(), 1));
  detail::from_tensor<Scalar>(s.tensor("bn.running_var"), rv.size(), 1, Eigen::Map<Mat<Scalar>>(rv.data(), rv.size(), 1));
  return net;
}

template <typename Scalar>
CheckpointSection adversary_section(const AdversaryNet<Scalar>& net) {
  CheckpointSection s;
  s.name = "adversary";
  s.meta = detail::conv_stack_meta(net.arch().stack);
  s.meta["outputs"] = std::to_string(net.arch().outputs);
  detail::params_to_section(net.layout(), net.params(), s);
  return s;
}

template <typename Scalar>
AdversaryNet<Scalar> adversary_from_section(const CheckpointSection& s) {
  AdversaryArch arch;
  arch.stack = detail::conv_stack_from_meta(s);
  arch.outputs = std::stoi(s.get("outputs"));
  AdversaryNet<Scalar> net(arch, 0);
  detail::params_from_section(net.layout(), net.params(), s);
  return net;
}

}  // namespace ma3
