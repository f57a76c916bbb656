#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tandem/transformer.hpp"

namespace tandem {

enum class GenerationMode { FREE_TOKEN, REPR_ONLY };

struct TandemConfig {
  DecoderConfig primary;
  DecoderConfig secondary;
  int gamma = 2;
  std::vector<int> layer_map;  // empty selects default_layer_map
  bool free_token = false;

  void validate() const;
  /// layer_map, or the default when none was given.
  std::vector<int> resolved_layer_map() const;
};

/// First position of the block containing i.
int block_boundary(int i, int gamma);

/// l(j) = ceil((j+1) * L_L / L_S) - 1.
std::vector<int> default_layer_map(int n_secondary, int n_primary);

/// Frontier ⌊i/γ⌋·γ for every position of a length-S sequence.
std::vector<int> block_frontiers(int seq_len, int gamma);

/// Per-position frontiers matching tandem_generate for a prompt of length P
/// and a total length S (prompt plus response). Positions the secondary never
/// queries get a frontier equal to themselves.
std::vector<int> generation_frontiers(int prompt_len, int seq_len, int gamma, GenerationMode mode);

/// Primary and secondary decoders joined by one linear projection per
/// secondary layer, mapping a primary layer's output into that layer's input width.
template <typename T>
class TandemModel {
 public:
  TandemModel(TandemConfig config, std::uint64_t seed);
  TandemModel(const TandemModel&) = delete;
  TandemModel& operator=(const TandemModel&) = delete;

  const TandemConfig& config() const { return config_; }
  const std::vector<int>& layer_map() const { return layer_map_; }

  ParameterSet<T> parameters();
  ParameterSet<T> projection_parameters();

  DecoderModel<T> primary;
  DecoderModel<T> secondary;
  std::vector<Parameter<T>> proj_w;  // [d_L, d_S]
  std::vector<Parameter<T>> proj_b;  // [d_S]

 private:
  TandemConfig config_;
  std::vector<int> layer_map_;
};

// ---------------------------------------------------------------------------
// Teacher-forced pass

template <typename T>
struct TandemPass {
  DecoderPass<T> primary;
  std::vector<Tensor<T>> projected;  // per secondary layer, rows = batch*S
  std::vector<int> ids;
  int batch = 0;
  int seq = 0;
  StackTrace<T> stack;
  HeadTrace<T> head;
  Tensor<T> logits;  // secondary logits
};

/// Teacher-forced tandem pass. `frontier` gives, per position, the first
/// position served by the secondary's own stream (empty: block boundaries).
template <typename T>
TandemPass<T> tandem_forward(const TandemModel<T>& model, std::span<const int> ids, int batch, int seq,
                             bool keep_trace, std::span<const int> frontier = {});

/// Accumulates gradients of secondary logits (and optionally primary logits).
/// The primary stack is skipped entirely when none of its parameters train.
template <typename T>
void tandem_backward(TandemModel<T>& model, const TandemPass<T>& pass, const Tensor<T>& dlogits_secondary,
                     const Tensor<T>* dlogits_primary = nullptr);

/// Secondary logits (S, V) for a single sequence with block frontiers.
template <typename T>
Tensor<T> tandem_forward_teacher(const TandemModel<T>& model, std::span<const int> tokens,
                                 std::span<const int> frontier = {});

// ---------------------------------------------------------------------------
// Incremental state

enum class KVSource : std::uint8_t { EMPTY, PRIMARY_PROJECTED, SECONDARY_LOCAL };

/// Secondary key/value rows tagged by where they came from, plus the
/// primary's own cache. Rows below frontier() are primary-projected.
template <typename T>
class TandemCache {
 public:
  explicit TandemCache(const TandemConfig& config);

  KVCache<T>& primary() { return primary_; }
  const KVCache<T>& primary() const { return primary_; }
  const KVCache<T>& secondary() const { return secondary_; }

  int length() const { return secondary_.length(); }
  int frontier() const { return frontier_; }
  KVSource tag(int pos) const { return tags_.at(pos); }
  bool is_protected(int pos) const { return protected_.at(pos); }

  /// Drops secondary rows at positions >= length.
  void truncate(int length);

  /// Writes projected rows for positions start.. from primary layer outputs
  /// (outputs[0..L_L] of the rows being committed) and moves the frontier.
  void write_projected(const TandemModel<T>& model, int start, const std::vector<Tensor<T>>& primary_outputs,
                       bool protect_last);

  /// Runs one secondary position at length() with the given input token.
  std::vector<T> secondary_step(const TandemModel<T>& model, int token);

 private:
  KVCache<T> primary_;
  KVCache<T> secondary_;
  std::vector<KVSource> tags_;
  std::vector<bool> protected_;
  int frontier_ = 0;
};

/// Primary encodes `tokens` at positions primary().length().. and the rows are
/// projected into the secondary cache. Returns the primary logits of the rows.
template <typename T>
Tensor<T> commit_primary(const TandemModel<T>& model, TandemCache<T>& cache, std::span<const int> tokens,
                         bool protect_last);

/// Block refresh: REPR_ONLY takes exactly γ tokens, FREE_TOKEN γ+1 (the block
/// plus its last drafted token, whose row becomes protected).
template <typename T>
Tensor<T> refresh_block(const TandemModel<T>& model, TandemCache<T>& cache, std::span<const int> block,
                        GenerationMode mode, int gamma);

struct TandemGeneration {
  std::vector<int> tokens;
  std::string provenance;  // 'P' primary, 'S' secondary
  int primary_runs = 0;
  int secondary_steps = 0;
  std::vector<int> step_positions;            // input position of every secondary step
  std::vector<std::vector<float>> step_logits;  // filled when recording
};

struct GenerateOptions {
  int gamma = 0;  // 0: the configured block length; any value >= 1 is accepted
  bool record_logits = false;
};

template <typename T>
TandemGeneration tandem_generate(const TandemModel<T>& model, std::span<const int> prompt, int n_tokens,
                                 GenerationMode mode, const SamplingMode& sampling, CounterRng& rng,
                                 const GenerateOptions& options = {});

}  // namespace tandem
