// Copyright 2026 The ctxdetox Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Self-describing binary tensor container used for checkpoints and control
// artifacts.
//
//   bytes 0..7    magic "CTXDETOX"
//   u32           format version (1)
//   u32           reserved (0)
//   u64           header length in bytes
//   header        UTF-8 JSON: {"kind", "meta", "dtype": "f32",
//                 "tensors": [{"name","shape":[r,c],"offset","count"}],
//                 "content_hash"}
//   payload       little-endian f32 values, tensors back to back; "offset"
//                 counts values from the start of the payload
//
// content_hash is FNV-1a 64 over every tensor's name, shape and payload
// bytes in file order; readers recompute and reject on mismatch.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxdetox/core/common.hpp"
#include "ctxdetox/core/tensor.hpp"

namespace ctxdetox {

struct NamedTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
};

struct Container {
  std::string kind;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    fail("container '", kind, "' has no tensor named '", name, "'");
  }

  template <typename T>
  void add(std::string name, const Matrix<T>& m) {
    tensors.push_back({std::move(name), m.rows(), m.cols(), {m.data(), m.data() + m.size()}});
  }

  template <typename T>
  Matrix<T> matrix(std::string_view name) const {
    const NamedTensor& t = get(name);
    Matrix<T> m(t.rows, t.cols);
    for (std::size_t i = 0; i < t.values.size(); ++i) m.data()[i] = static_cast<T>(t.values[i]);
    return m;
  }

  std::uint64_t content_hash() const {
    Fnv1a64 h;
    for (const auto& t : tensors) {
      h.update(t.name);
      const std::uint64_t shape[2] = {t.rows, t.cols};
      h.update(shape, sizeof shape);
      h.update(std::span<const float>(t.values));
    }
    return h.digest();
  }
};

inline constexpr std::array<char, 8> kContainerMagic = {'C', 'T', 'X', 'D', 'E', 'T', 'O', 'X'};
inline constexpr std::uint32_t kContainerVersion = 1;

inline void write_container(const Container& c, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "container I/O assumes little-endian");
  nlohmann::ordered_json header;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["dtype"] = "f32";
  auto& tl = header["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    require(t.values.size() == t.rows * t.cols, "tensor '", t.name, "' has inconsistent shape");
    tl.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}, {"count", t.values.size()}});
    offset += t.values.size();
  }
  header["content_hash"] = hex64(c.content_hash());
  const std::string hs = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot open ", tmp.string(), " for writing");
    const std::uint32_t ver = kContainerVersion, reserved = 0;
    const std::uint64_t hlen = hs.size();
    out.write(kContainerMagic.data(), kContainerMagic.size());
    out.write(reinterpret_cast<const char*>(&ver), sizeof ver);
    out.write(reinterpret_cast<const char*>(&reserved), sizeof reserved);
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& t : c.tensors)
      out.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    require(out.good(), "write failed for ", tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open ", path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  require(in.good() && magic == kContainerMagic, path.string(), ": not a ctxdetox container");
  std::uint32_t ver = 0, reserved = 0;
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof ver);
  in.read(reinterpret_cast<char*>(&reserved), sizeof reserved);
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  require(in.good(), path.string(), ": truncated preamble");
  require(ver == kContainerVersion, path.string(), ": unsupported container version ", ver);
  require(hlen < (1u << 26), path.string(), ": implausible header length");
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  require(in.good(), path.string(), ": truncated header");

  Container c;
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(hs);
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    require(header.at("dtype") == "f32", "unsupported dtype");
    std::size_t expect_offset = 0;
    for (const auto& e : header.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      t.rows = e.at("shape").at(0).get<std::size_t>();
      t.cols = e.at("shape").at(1).get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      require(count == t.rows * t.cols && e.at("offset").get<std::size_t>() == expect_offset,
              "tensor '", t.name, "' has an inconsistent table entry");
      expect_offset += count;
      t.values.resize(count);
      c.tensors.push_back(std::move(t));
    }
  } catch (const std::exception& e) {
    fail(path.string(), ": bad container header: ", e.what());
  }
  for (auto& t : c.tensors) {
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    require(in.good(), path.string(), ": truncated payload in tensor '", t.name, "'");
  }
  const std::string stored = header.at("content_hash").get<std::string>();
  require(stored == hex64(c.content_hash()), path.string(),
          ": content hash mismatch (file is corrupt or was modified)");
  return c;
}

}  // namespace ctxdetox
