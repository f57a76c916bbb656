#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tandem/transformer.hpp"

namespace tandem {

struct DeepTandemConfig {
  DecoderConfig large;
  DecoderConfig small;
  int gamma = 2;
  int begin_token = 257;  // stands in for inputs before the sequence start

  void validate() const;
};

/// Input ids of the sketch stream: ids[i - shift], or begin_token for i < shift.
std::vector<int> shifted_ids(std::span<const int> ids, int batch, int seq, int shift, int begin_token);

/// Large-model pass over the block-shifted stream; outputs.back() holds the
/// sketch representation of every position.
template <typename T>
struct SketchPass {
  std::vector<int> ids;  // shifted input ids
  int batch = 0;
  int seq = 0;
  StackTrace<T> stack;
  std::vector<Tensor<T>> outputs;
};

template <typename T>
SketchPass<T> sketch_forward(const DecoderModel<T>& large, std::span<const int> ids, int batch, int seq, int gamma,
                             int begin_token, bool keep_trace);

/// Backward from d(sketch); accumulates into the large model.
template <typename T>
void sketch_backward(DecoderModel<T>& large, const SketchPass<T>& pass, Tensor<T> d_sketch);

template <typename T>
class DeepTandemModel {
 public:
  DeepTandemModel(DeepTandemConfig config, std::uint64_t seed);
  DeepTandemModel(const DeepTandemModel&) = delete;
  DeepTandemModel& operator=(const DeepTandemModel&) = delete;

  const DeepTandemConfig& config() const { return config_; }
  ParameterSet<T> parameters();

  DecoderModel<T> large;
  DecoderModel<T> small;
  Parameter<T> ff_w;  // [d_L, d_S]
  Parameter<T> ff_b;  // [d_S]

 private:
  DeepTandemConfig config_;
};

template <typename T>
struct DeepPass {
  SketchPass<T> sketch;
  std::vector<int> small_ids;
  Tensor<T> sketch_out;  // sketch after the large model's last layer
  StackTrace<T> stack;
  HeadTrace<T> head;
  Tensor<T> logits;  // row i scores token i
};

template <typename T>
DeepPass<T> deep_forward(const DeepTandemModel<T>& model, std::span<const int> ids, int batch, int seq,
                         bool keep_trace);

template <typename T>
void deep_backward(DeepTandemModel<T>& model, const DeepPass<T>& pass, const Tensor<T>& dlogits);

/// Block-parallel baseline: the large model's head applied to its sketch.
template <typename T>
struct BlockParallelPass {
  SketchPass<T> sketch;
  HeadTrace<T> head;
  Tensor<T> logits;  // row i scores token i
};

template <typename T>
BlockParallelPass<T> block_parallel_forward(const DecoderModel<T>& large, std::span<const int> ids, int batch,
                                            int seq, int gamma, int begin_token, bool keep_trace);

template <typename T>
void block_parallel_backward(DecoderModel<T>& large, const BlockParallelPass<T>& pass, const Tensor<T>& dlogits);

}  // namespace tandem
