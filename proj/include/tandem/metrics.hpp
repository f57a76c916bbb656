#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tandem/data.hpp"
#include "tandem/deeptandem.hpp"
#include "tandem/tandem.hpp"

namespace tandem {

/// Logits for a batch of windows, rows = batch * seq.
using LogitsFn = std::function<Tensor<float>(std::span<const int> ids, int batch, int seq)>;

/// A model under evaluation. Next-token models score ids[i+1] at row i;
/// same-position models (deep tandem, block-parallel) score ids[i] at row i.
struct EvalModel {
  LogitsFn logits;
  bool same_position = false;
};

EvalModel eval_decoder(const DecoderModel<float>& model);
EvalModel eval_tandem(const TandemModel<float>& model);
EvalModel eval_deep(const DeepTandemModel<float>& model);
EvalModel eval_block_parallel(const DecoderModel<float>& model, int gamma, int begin_token);

struct EvalOptions {
  int seq_len = 64;
  int max_windows = 64;
  int batch = 8;
  /// Score only targets 1..seq-1 of each window, the positions a
  /// same-position model can score; next-token models drop their last row.
  bool align_same_position = false;
};

struct MetricsReport {
  double accuracy_gt = 0;
  double ce_gt = 0;
  double relative_accuracy = 0;  // NaN without a reference
  double relative_tv = 0;
  std::size_t positions = 0;
  std::size_t windows = 0;
  // Per-window means, for standard errors and paired comparisons.
  std::vector<double> window_accuracy, window_ce, window_relative_accuracy, window_relative_tv;
  bool has_reference = false;

  static double standard_error(const std::vector<double>& per_window);
  /// Standard error of the mean of a[i] - b[i].
  static double paired_standard_error(const std::vector<double>& a, const std::vector<double>& b);
};

/// Ground-truth accuracy and CE, plus agreement with `reference` (a next-token
/// model; argmax match and mean TV distance) when one is given. Windows are consecutive slices of
/// seq_len + 1 tokens.
MetricsReport evaluate(const EvalModel& model, const TokenDataset& data, const EvalModel* reference,
                       const EvalOptions& options);

/// Metrics JSON; `extra` fields (seed, config hash, ...) are merged in.
std::string metrics_to_json(const MetricsReport& report, const std::string& extra_json = "{}", int indent = 2);

}  // namespace tandem
