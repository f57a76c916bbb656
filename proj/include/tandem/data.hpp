#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tandem/rng.hpp"

namespace tandem {

inline constexpr int kBosToken = 256;
inline constexpr int kBeginOfDraftToken = 257;
inline constexpr int kByteVocab = 258;

/// BOS followed by the raw bytes.
std::vector<int> tokenize(std::string_view text);
/// Bytes back to text; reserved ids are dropped.
std::string detokenize(std::span<const int> ids);

/// Newline-delimited documents; blank lines are skipped.
std::vector<std::string> read_documents(const std::filesystem::path& path);
std::vector<std::string> split_documents(std::string_view text);
void write_documents(const std::filesystem::path& path, const std::vector<std::string>& docs);

/// Documents concatenated, each starting with BOS.
std::vector<int> pack_documents(const std::vector<std::string>& docs);

/// Deterministic synthetic English-like corpus, at least `min_bytes` long.
/// Each document states two people's facts and then recalls some of them.
std::vector<std::string> synthetic_documents(std::size_t min_bytes, std::uint64_t seed);

/// Packed token stream cut into training windows of seq_len + 1 tokens.
class TokenDataset {
 public:
  explicit TokenDataset(std::vector<int> stream) : stream_(std::move(stream)) {}
  static TokenDataset from_documents(const std::vector<std::string>& docs) { return TokenDataset(pack_documents(docs)); }

  const std::vector<int>& stream() const { return stream_; }
  std::size_t size() const { return stream_.size(); }

  /// `batch` random windows of `len` tokens; deterministic in (seed, step).
  std::vector<int> sample_windows(int batch, int len, std::uint64_t seed, std::int64_t step) const;

  /// Non-overlapping consecutive windows from the start, at most `max_windows`.
  std::vector<int> sequential_windows(int len, int max_windows) const;

 private:
  std::vector<int> stream_;
};

}  // namespace tandem
