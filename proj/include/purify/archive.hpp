// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "purify/nn.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace purify {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named float tensors plus a JSON header, stored as
///   <format tag>\n <u64 header bytes> <header JSON> <raw float32 blob>
/// The header indexes every tensor by name, shape and offset.
struct Archive {
  std::string format;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;

  void put(const std::string& name, const Tensor<float>& t) { tensors[name] = t; }
  const Tensor<float>& get(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path, const std::string& expected_format);
};

void put_params(Archive& a, const ParamList<float>& params, const std::string& prefix = "");
/// Copies archived values into `params`; every name must exist with a matching shape.
void get_params(const Archive& a, const ParamList<float>& params, const std::string& prefix = "");

}  // namespace purify
