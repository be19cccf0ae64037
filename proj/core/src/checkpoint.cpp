// SPDX-License-Identifier: Apache-2.0
#include "lcsb/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "lcsb/errors.hpp"

namespace lcsb {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "lcsb-checkpoint";
constexpr int kVersion = 1;

std::uint64_t checksum(std::span<const float> values) {
  return fnv1a64({reinterpret_cast<const unsigned char*>(values.data()), values.size_bytes()});
}

}  // namespace

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void CheckpointWriter::add(const std::string& name, const Tensor& tensor) {
  add(name, std::span<const float>(tensor.data));
  entries_.back().shape = tensor.shape;
}

void CheckpointWriter::add(const std::string& name, std::span<const float> values) {
  entries_.push_back({name, Shape{values.size()}, blob_.size(), values.size()});
  blob_.insert(blob_.end(), values.begin(), values.end());
}

void CheckpointWriter::write(const std::filesystem::path& dir, json state) const {
  std::filesystem::create_directories(dir);
  json entries = json::array();
  for (const auto& e : entries_) {
    const std::span<const float> values(blob_.data() + e.offset, e.count);
    entries.push_back(
        {{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"count", e.count}, {"fnv1a", checksum(values)}});
  }
  const json manifest = {{"format", kFormat},
                         {"version", kVersion},
                         {"blob_floats", blob_.size()},
                         {"entries", entries},
                         {"state", std::move(state)}};
  std::ofstream blob(dir / "blob.bin", std::ios::binary | std::ios::trunc);
  blob.write(reinterpret_cast<const char*>(blob_.data()), static_cast<std::streamsize>(blob_.size() * sizeof(float)));
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(1) << '\n';
  if (!blob || !out) throw Error("cannot write checkpoint into '" + dir.string() + "'");
}

CheckpointReader::CheckpointReader(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw CorruptionError("checkpoint entry 'manifest.json' is missing in '" + dir.string() + "'");
  const json manifest = json::parse(in, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw CorruptionError("checkpoint entry 'manifest.json' is not valid JSON");
  }
  if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kVersion) {
    throw CorruptionError("checkpoint entry 'manifest.json' has an unknown format or version");
  }

  std::ifstream blob_in(dir / "blob.bin", std::ios::binary);
  if (!blob_in) throw CorruptionError("checkpoint entry 'blob.bin' is missing");
  const std::string bytes{std::istreambuf_iterator<char>(blob_in), std::istreambuf_iterator<char>()};
  if (bytes.size() % sizeof(float) != 0) throw CorruptionError("checkpoint entry 'blob.bin' has a partial float");
  blob_.resize(bytes.size() / sizeof(float));
  std::memcpy(blob_.data(), bytes.data(), bytes.size());

  try {
    state_ = manifest.at("state");
    for (const auto& e : manifest.at("entries")) {
      const std::string name = e.at("name").get<std::string>();
      Entry entry{e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>(), e.at("count").get<std::size_t>()};
      if (entry.offset + entry.count > blob_.size()) {
        throw CorruptionError("checkpoint entry '" + name + "' extends past the end of blob.bin (truncated blob)");
      }
      if (shape_numel(entry.shape) != entry.count) {
        throw CorruptionError("checkpoint entry '" + name + "' has a shape that does not match its size");
      }
      const std::span<const float> values(blob_.data() + entry.offset, entry.count);
      if (checksum(values) != e.at("fnv1a").get<std::uint64_t>()) {
        throw CorruptionError("checkpoint entry '" + name + "' fails its checksum");
      }
      entries_.emplace(name, std::move(entry));
    }
    if (manifest.at("blob_floats").get<std::size_t>() != blob_.size()) {
      throw CorruptionError("checkpoint entry 'blob.bin' size disagrees with the manifest");
    }
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint entry 'manifest.json' is malformed: ") + e.what());
  }
}

const CheckpointReader::Entry& CheckpointReader::entry(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw CorruptionError("checkpoint entry '" + name + "' is missing");
  return it->second;
}

void CheckpointReader::read_into(const std::string& name, Tensor& tensor) const {
  const Entry& e = entry(name);
  if (e.shape != tensor.shape) {
    throw CorruptionError("checkpoint entry '" + name + "' has shape " + shape_to_string(e.shape) + ", expected " +
                          shape_to_string(tensor.shape));
  }
  std::copy_n(blob_.begin() + static_cast<std::ptrdiff_t>(e.offset), e.count, tensor.data.begin());
}

std::vector<float> CheckpointReader::read_floats(const std::string& name, std::size_t expected_count) const {
  const Entry& e = entry(name);
  if (e.count != expected_count) {
    throw CorruptionError("checkpoint entry '" + name + "' holds " + std::to_string(e.count) + " values, expected " +
                          std::to_string(expected_count));
  }
  const auto first = blob_.begin() + static_cast<std::ptrdiff_t>(e.offset);
  return {first, first + static_cast<std::ptrdiff_t>(e.count)};
}

}  // namespace lcsb
