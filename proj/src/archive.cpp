// SPDX-License-Identifier: Apache-2.0
#include "purify/archive.hpp"

#include <cstdint>
#include <fstream>

namespace purify {

const Tensor<float>& Archive::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ArchiveError("archive has no tensor '" + name + "'");
  return it->second;
}

void Archive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = format;
  header["meta"] = meta;
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size());
  }
  header["tensors"] = index;
  const std::string h = header.dump();
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ArchiveError("cannot write " + tmp);
    out << format << '\n';
    const std::uint64_t n = h.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : tensors)
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!out) throw ArchiveError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path, const std::string& expected_format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open " + path.string());
  Archive a;
  std::getline(in, a.format);
  if (a.format != expected_format)
    throw ArchiveError(path.string() + ": format tag '" + a.format.substr(0, 40) + "', expected '" + expected_format + "'");
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n > (1ULL << 32)) throw ArchiveError(path.string() + ": truncated header");
  std::string h(n, '\0');
  in.read(h.data(), static_cast<std::streamsize>(n));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(path.string() + ": bad header: " + e.what());
  }
  a.meta = header.at("meta");
  const auto blob_start = in.tellg();
  for (const auto& e : header.at("tensors")) {
    Tensor<float> t(e.at("shape").get<Shape>());
    in.seekg(blob_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>() * sizeof(float)));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw ArchiveError(path.string() + ": truncated tensor data for " + e.at("name").get<std::string>());
    a.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return a;
}

void put_params(Archive& a, const ParamList<float>& params, const std::string& prefix) {
  for (const auto& p : params) a.put(prefix + p.name, p.var.value());
}

void get_params(const Archive& a, const ParamList<float>& params, const std::string& prefix) {
  for (const auto& p : params) {
    const auto& t = a.get(prefix + p.name);
    if (t.shape() != p.var.shape())
      throw ArchiveError("parameter " + p.name + " has shape " + shape_str(t.shape()) + " in the archive, expected " +
                         shape_str(p.var.shape()));
    auto v = p.var;
    v.mutable_value() = t;
  }
}

}  // namespace purify
