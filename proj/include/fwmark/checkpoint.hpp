/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fwmark/bytes.hpp"
#include "fwmark/digest.hpp"
#include "fwmark/errors.hpp"
#include "fwmark/model.hpp"

// Checkpoint layout (all integers little-endian):
//
//   "FWMK" | u16 version | u32 n + n bytes UTF-8 JSON {"arch", "meta"}
//   | records: u32 name length, name, u8 ndim, u32 dims..., f32 data
//   | 32-byte SHA-256 of every preceding byte

namespace fwmark {

inline constexpr char kCheckpointMagic[4] = {'F', 'W', 'M', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// Descriptor and parameters disagree about a tensor's name or shape.
class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline std::vector<std::uint8_t> serialize_model(const Model& m) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  const std::string header =
      json{{"arch", m.arch_descriptor()}, {"meta", m.metadata()}}.dump();
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  for (const auto& [name, t] : m.named_parameters()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32(t.data());
  }
  const Digest digest = sha256(w.buffer());
  w.bytes(digest);
  return w.take();
}

// Structure is validated before the digest so truncation is reported as
// such; nothing is constructed until the digest matches.
inline Model deserialize_model(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kDigestSize = 32;
  if (bytes.size() < 4 + 2 + 4 + kDigestSize)
    throw TruncatedError("checkpoint: file too short");
  ByteReader r(bytes.first(bytes.size() - kDigestSize), "checkpoint");
  if (r.str(4) != std::string_view(kCheckpointMagic, 4))
    throw FormatError("checkpoint: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  const std::string header_text = r.str(r.u32());

  struct Record {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Record> records;
  while (!r.done()) {
    Record rec;
    rec.name = r.str(r.u32());
    const std::uint8_t ndim = r.u8();
    std::size_t count = 1;
    for (std::uint8_t i = 0; i < ndim; ++i) {
      rec.shape.push_back(r.u32());
      count *= rec.shape.back();
    }
    rec.data = r.f32(count);
    records.push_back(std::move(rec));
  }

  const Digest expected = sha256(bytes.first(bytes.size() - kDigestSize));
  if (!std::equal(expected.begin(), expected.end(),
                  bytes.end() - kDigestSize)) {
    throw IntegrityError("checkpoint: digest mismatch");
  }

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  Model m = [&] {
    try {
      return Model::from_descriptor(header.at("arch"));
    } catch (const ShapeError& e) {
      throw ShapeMismatchError(std::string("checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }();
  if (header.contains("meta")) m.metadata() = header["meta"];

  auto params = m.named_parameters();
  if (params.size() != records.size()) {
    throw ShapeMismatchError("checkpoint: descriptor implies " +
                             std::to_string(params.size()) +
                             " parameter tensors, file has " +
                             std::to_string(records.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, tensor] = params[i];
    if (records[i].name != name || records[i].shape != tensor.shape()) {
      throw ShapeMismatchError("checkpoint: parameter " + records[i].name +
                               shape_str(records[i].shape) +
                               " does not match descriptor " + name +
                               shape_str(tensor.shape()));
    }
    std::copy(records[i].data.begin(), records[i].data.end(),
              tensor.data().begin());
  }
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  write_file(path, serialize_model(m));
}

inline Model load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file(path));
}

inline ClassifierModel load_classifier(const std::filesystem::path& path) {
  return ClassifierModel(load_model(path));
}

inline GeneratorModel load_generator(const std::filesystem::path& path) {
  return GeneratorModel(load_model(path));
}

}  // namespace fwmark
