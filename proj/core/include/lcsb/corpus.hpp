// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lcsb/random.hpp"

namespace lcsb {

using Tokens = std::vector<std::int32_t>;

/// Byte-level tokenization of a file (token = byte value, vocab 256).
/// Throws IngestionError for an unreadable or empty file, or one shorter
/// than seq_len + 1 bytes.
Tokens load_corpus(const std::filesystem::path& path, std::size_t seq_len);

Tokens tokenize_bytes(std::string_view text);

struct CorpusSplit {
  Tokens train;
  Tokens eval;
};

/// The last round(n * eval_fraction) tokens become the eval split.
CorpusSplit split_corpus(const Tokens& tokens, double eval_fraction);

/// batch_size windows; targets[b][i] == tokens[offset_b + i + 1].
struct Batch {
  std::vector<Tokens> inputs;
  std::vector<Tokens> targets;
  std::vector<std::size_t> offsets;
};

/// Uniformly random contiguous windows of seq_len + 1 tokens.
Batch next_batch(std::span<const std::int32_t> tokens, std::size_t seq_len, std::size_t batch_size, Rng& rng);

/// Non-overlapping windows covering the eval split from its start, at most
/// max_windows of them (0 means no cap).
Batch eval_windows(std::span<const std::int32_t> tokens, std::size_t seq_len, std::size_t max_windows = 0);

/// Deterministic pseudo-English text of exactly n_bytes bytes: a Zipf-ranked
/// vocabulary of invented words arranged into sentences and paragraphs.
std::string generate_corpus(std::size_t n_bytes, std::uint64_t seed);

}  // namespace lcsb
