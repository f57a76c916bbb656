#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tandem/data.hpp"
#include "tandem/deeptandem.hpp"
#include "tandem/optim.hpp"
#include "tandem/tandem.hpp"

namespace tandem {

inline constexpr int kIgnoreTarget = -1;

/// Mean over counted rows of -log softmax(logits)[target]; rows whose target
/// is kIgnoreTarget are skipped. When `dlogits` is given, scale * dL/dlogits
/// is accumulated into it.
template <typename T>
double ce_loss(const Tensor<T>& logits, std::span<const int> targets, Tensor<T>* dlogits = nullptr,
               double scale = 1.0);

/// Mean over rows of the cross-entropy of softmax(student) against
/// softmax(teacher). Rows whose entry in `targets` (optional) is kIgnoreTarget are skipped.
template <typename T>
double distill_loss(const Tensor<T>& student, const Tensor<T>& teacher, Tensor<T>* dstudent = nullptr,
                    double scale = 1.0, std::span<const int> targets = {});

double combined_loss(double ce, double distill, double lambda);

enum class Variant {
  STANDALONE,
  TANDEM_FROZEN_PRIMARY,
  TANDEM_BOTH_LOSS_SECONDARY,
  TANDEM_BOTH_LOSS_BOTH,
  STANDALONE_DISTIL,
  TANDEM_DISTIL,
  DEEP_TANDEM,
  BLOCK_PARALLEL,
};

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);
bool is_tandem_variant(Variant v);

struct TrainConfig {
  Variant variant = Variant::STANDALONE;
  std::int64_t steps = 1000;
  int batch_size = 8;
  int seq_len = 64;
  LrSchedule lr{3e-4, 100, 1000, 0.1};
  AdamConfig adam{};
  double lambda = 0.5;
  /// Distil variants train on plain CE for steps < stage1_steps, then on the
  /// combined loss.
  std::int64_t stage1_steps = 0;
  int block_gamma = 2;  // BLOCK_PARALLEL sketch block length
  int begin_token = kBeginOfDraftToken;
  std::uint64_t data_seed = 1;

  void validate() const;
};

/// Models a run reads from; only the ones the variant needs must be set.
template <typename T>
struct TrainModels {
  DecoderModel<T>* standalone = nullptr;      // STANDALONE, STANDALONE_DISTIL
  TandemModel<T>* tandem = nullptr;           // TANDEM_*
  const DecoderModel<T>* teacher = nullptr;   // STANDALONE_DISTIL
  DeepTandemModel<T>* deep = nullptr;         // DEEP_TANDEM
  DecoderModel<T>* block_parallel = nullptr;  // BLOCK_PARALLEL
};

struct LossRecord {
  std::int64_t step = 0;
  double loss = 0;
  double loss_ce = 0;
  double loss_distill = 0;
  int stage = 1;
  double grad_norm = 0;
};

struct TrainResult {
  std::vector<LossRecord> curve;
  std::int64_t stage_switch_step = -1;  // first stage-2 step, -1 if none
};

/// Splits windows of seq+1 tokens into inputs and next-token targets.
void split_windows(std::span<const int> windows, int batch, int seq, std::vector<int>& ids,
                   std::vector<int>& targets);

/// Row i of a deep/block-parallel pass scores ids[i]; row 0 has nothing to score.
std::vector<int> same_position_targets(std::span<const int> ids, int batch, int seq);

template <typename T>
TrainResult train(TrainModels<T>& models, const TokenDataset& data, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_step = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve);

/// Ridge least-squares initialisation of the projections: each proj_j is fit
/// so the projected primary output reproduces the secondary's own input to
/// layer j, over up to `max_windows` windows of `seq_len` tokens. Starting
/// here, a pretrained secondary keeps its standalone behaviour at step zero.
template <typename T>
void fit_projections(TandemModel<T>& model, const TokenDataset& data, int seq_len, int max_windows,
                     double ridge = 1e-3);

}  // namespace tandem
