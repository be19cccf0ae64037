// SPDX-License-Identifier: Apache-2.0
#include "lcsb/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "lcsb/errors.hpp"

namespace lcsb {

Tokens tokenize_bytes(std::string_view text) {
  Tokens tokens;
  tokens.reserve(text.size());
  for (char c : text) tokens.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
  return tokens;
}

Tokens load_corpus(const std::filesystem::path& path, std::size_t seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open corpus '" + path.string() + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.empty()) throw IngestionError("corpus '" + path.string() + "' is empty");
  if (bytes.size() < seq_len + 1) {
    throw IngestionError("corpus '" + path.string() + "' has " + std::to_string(bytes.size()) +
                         " bytes, fewer than seq_len + 1 = " + std::to_string(seq_len + 1));
  }
  return tokenize_bytes(bytes);
}

CorpusSplit split_corpus(const Tokens& tokens, double eval_fraction) {
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction must lie in [0, 1)");
  const auto n_eval = static_cast<std::size_t>(std::llround(static_cast<double>(tokens.size()) * eval_fraction));
  const std::size_t cut = tokens.size() - n_eval;
  return {Tokens(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(cut)),
          Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(cut), tokens.end())};
}

namespace {

void push_window(Batch& batch, std::span<const std::int32_t> tokens, std::size_t offset, std::size_t seq_len) {
  batch.offsets.push_back(offset);
  batch.inputs.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(offset),
                            tokens.begin() + static_cast<std::ptrdiff_t>(offset + seq_len));
  batch.targets.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(offset + 1),
                             tokens.begin() + static_cast<std::ptrdiff_t>(offset + seq_len + 1));
}

}  // namespace

Batch next_batch(std::span<const std::int32_t> tokens, std::size_t seq_len, std::size_t batch_size, Rng& rng) {
  if (tokens.size() < seq_len + 1) throw InputError("token stream shorter than seq_len + 1");
  Batch batch;
  const std::size_t positions = tokens.size() - seq_len;
  for (std::size_t b = 0; b < batch_size; ++b) {
    push_window(batch, tokens, static_cast<std::size_t>(rng.uniform_index(positions)), seq_len);
  }
  return batch;
}

Batch eval_windows(std::span<const std::int32_t> tokens, std::size_t seq_len, std::size_t max_windows) {
  if (tokens.size() < seq_len + 1) throw InputError("eval split shorter than seq_len + 1");
  Batch batch;
  for (std::size_t offset = 0; offset + seq_len + 1 <= tokens.size(); offset += seq_len) {
    if (max_windows != 0 && batch.inputs.size() == max_windows) break;
    push_window(batch, tokens, offset, seq_len);
  }
  return batch;
}

namespace {

constexpr const char* kOnsets[] = {"b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w",
                                   "th", "st", "pr", "tr", "ch", "sh", "br", "gr", ""};
constexpr const char* kNuclei[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai", "io", "ee"};
constexpr const char* kCodas[] = {"", "", "", "n", "r", "s", "t", "l", "nd", "ng", "st", "rk", "m"};

template <std::size_t N>
const char* pick(const char* const (&table)[N], Rng& rng) {
  return table[rng.uniform_index(N)];
}

std::vector<std::string> invent_vocabulary(std::size_t size, Rng& rng) {
  std::vector<std::string> words;
  while (words.size() < size) {
    const std::size_t syllables = 1 + rng.uniform_index(words.size() < 40 ? 2 : 3);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += pick(kOnsets, rng);
      w += pick(kNuclei, rng);
      w += pick(kCodas, rng);
    }
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(std::move(w));
  }
  return words;
}

}  // namespace

std::string generate_corpus(std::size_t n_bytes, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xC0);
  const std::vector<std::string> words = invent_vocabulary(600, rng);

  // Zipf(1) cumulative weights over word rank.
  std::vector<double> cdf(words.size());
  double total = 0.0;
  for (std::size_t i = 0; i < words.size(); ++i) cdf[i] = total += 1.0 / static_cast<double>(i + 1);
  auto draw_word = [&]() -> const std::string& {
    const double u = rng.uniform01() * total;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return words[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), words.size() - 1)];
  };

  std::string text;
  text.reserve(n_bytes + 256);
  while (text.size() < n_bytes) {
    const std::size_t sentences = 2 + rng.uniform_index(5);
    for (std::size_t s = 0; s < sentences; ++s) {
      const std::size_t length = 4 + rng.uniform_index(11);
      for (std::size_t w = 0; w < length; ++w) {
        std::string word = draw_word();
        if (w == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
        text += word;
        if (w + 1 < length) text += rng.uniform01() < 0.08 ? ", " : " ";
      }
      text += rng.uniform01() < 0.1 ? "? " : ". ";
    }
    text.back() = '\n';
    text += '\n';
  }
  text.resize(n_bytes);
  return text;
}

}  // namespace lcsb
