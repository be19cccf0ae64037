// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcsb/tensor.hpp"

namespace lcsb {

/// Checkpoint layout: manifest.json holds the JSON state plus one entry per
/// float array (name, shape, offset, count, FNV-1a checksum); blob.bin holds
/// the arrays back to back as raw float32 in host byte order.
class CheckpointWriter {
 public:
  void add(const std::string& name, const Tensor& tensor);
  void add(const std::string& name, std::span<const float> values);
  void write(const std::filesystem::path& dir, nlohmann::json state) const;

 private:
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t count = 0;
  };
  std::vector<Entry> entries_;
  std::vector<float> blob_;
};

/// Validates the whole blob against the manifest on construction. Every
/// failure is a CorruptionError naming the offending entry.
class CheckpointReader {
 public:
  explicit CheckpointReader(const std::filesystem::path& dir);

  const nlohmann::json& state() const noexcept { return state_; }
  bool contains(const std::string& name) const { return entries_.contains(name); }
  /// Copies an entry into a tensor of the same shape.
  void read_into(const std::string& name, Tensor& tensor) const;
  std::vector<float> read_floats(const std::string& name, std::size_t expected_count) const;

 private:
  struct Entry {
    Shape shape;
    std::size_t offset = 0;
    std::size_t count = 0;
  };
  const Entry& entry(const std::string& name) const;

  nlohmann::json state_;
  std::map<std::string, Entry> entries_;
  std::vector<float> blob_;
};

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);

}  // namespace lcsb
