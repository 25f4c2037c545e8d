// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/tensor.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maskdiff {

class SerializationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using TensorArchive = std::vector<std::pair<std::string, Tensor<Scalar>>>;

/// Flat binary archive of named tensors with their shapes. Values are stored
/// in their native width, so a round trip is bit-exact.
template <typename Scalar>
void write_tensor_archive(const std::filesystem::path& path, const TensorArchive<Scalar>& entries);

template <typename Scalar>
TensorArchive<Scalar> read_tensor_archive(const std::filesystem::path& path);

}  // namespace maskdiff
