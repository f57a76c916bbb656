#include "tandem/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "tandem/router.hpp"
#include "tandem/training.hpp"

namespace tandem {

EvalModel eval_decoder(const DecoderModel<float>& model) {
  return {[&model](std::span<const int> ids, int b, int s) { return decoder_forward(model, ids, b, s, false).logits; },
          false};
}

EvalModel eval_tandem(const TandemModel<float>& model) {
  return {[&model](std::span<const int> ids, int b, int s) { return tandem_forward(model, ids, b, s, false).logits; },
          false};
}

EvalModel eval_deep(const DeepTandemModel<float>& model) {
  return {[&model](std::span<const int> ids, int b, int s) { return deep_forward(model, ids, b, s, false).logits; },
          true};
}

EvalModel eval_block_parallel(const DecoderModel<float>& model, int gamma, int begin_token) {
  return {[&model, gamma, begin_token](std::span<const int> ids, int b, int s) {
            return block_parallel_forward(model, ids, b, s, gamma, begin_token, false).logits;
          },
          true};
}

double MetricsReport::standard_error(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

double MetricsReport::paired_standard_error(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_standard_error: length mismatch");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return standard_error(d);
}

namespace {

std::vector<double> row_dist(const Tensor<float>& logits, std::size_t r) {
  return sampling_distribution<float>(logits.row(r), SamplingMode::Temperature(1.0));
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

MetricsReport evaluate(const EvalModel& model, const TokenDataset& data, const EvalModel* reference,
                       const EvalOptions& opt) {
  const int S = opt.seq_len;
  if (data.size() < static_cast<std::size_t>(S) + 1) throw std::invalid_argument("evaluate: empty corpus");
  if (reference && reference->same_position) throw std::invalid_argument("evaluate: reference must be a next-token model");
  const auto windows = data.sequential_windows(S + 1, opt.max_windows);
  const int W = static_cast<int>(windows.size() / (S + 1));
  MetricsReport rep;
  rep.has_reference = reference != nullptr;
  rep.windows = static_cast<std::size_t>(W);

  for (int w0 = 0; w0 < W; w0 += opt.batch) {
    const int B = std::min(opt.batch, W - w0);
    std::span<const int> chunk(windows.data() + static_cast<std::size_t>(w0) * (S + 1),
                               static_cast<std::size_t>(B) * (S + 1));
    std::vector<int> ids, targets;
    split_windows(chunk, B, S, ids, targets);
    const Tensor<float> logits = model.logits(ids, B, S);
    Tensor<float> ref_logits;
    if (reference) ref_logits = reference->logits(ids, B, S);

    for (int b = 0; b < B; ++b) {
      double acc = 0, ce = 0, racc = 0, rtv = 0;
      int n = 0;
      // Target j of the window is w[j], j in [first, last].
      const int first = 1;
      const int last = (model.same_position || opt.align_same_position) ? S - 1 : S;
      for (int j = first; j <= last; ++j) {
        const std::size_t row = static_cast<std::size_t>(b) * S + (model.same_position ? j : j - 1);
        const std::size_t ref_row = static_cast<std::size_t>(b) * S + (j - 1);
        const int target = chunk[static_cast<std::size_t>(b) * (S + 1) + j];
        const auto p = row_dist(logits, row);
        const int top = argmax<float>(logits.row(row));
        acc += top == target;
        ce += -std::log(std::max(p[target], std::numeric_limits<double>::min()));
        if (reference) {
          const auto q = row_dist(ref_logits, ref_row);
          racc += top == argmax<float>(ref_logits.row(ref_row));
          rtv += tv_distance(p, q);
        }
        ++n;
      }
      rep.positions += static_cast<std::size_t>(n);
      rep.window_accuracy.push_back(acc / n);
      rep.window_ce.push_back(ce / n);
      if (reference) {
        rep.window_relative_accuracy.push_back(racc / n);
        rep.window_relative_tv.push_back(rtv / n);
      }
    }
  }
  rep.accuracy_gt = mean(rep.window_accuracy);
  rep.ce_gt = mean(rep.window_ce);
  if (reference) {
    rep.relative_accuracy = mean(rep.window_relative_accuracy);
    rep.relative_tv = mean(rep.window_relative_tv);
  } else {
    rep.relative_accuracy = rep.relative_tv = std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

std::string metrics_to_json(const MetricsReport& r, const std::string& extra_json, int indent) {
  nlohmann::json j = nlohmann::json::parse(extra_json);
  j["accuracy_gt"] = r.accuracy_gt;
  j["accuracy_gt_pct"] = 100.0 * r.accuracy_gt;
  j["ce_gt"] = r.ce_gt;
  j["accuracy_gt_se"] = MetricsReport::standard_error(r.window_accuracy);
  j["ce_gt_se"] = MetricsReport::standard_error(r.window_ce);
  if (r.has_reference) {
    j["relative_accuracy"] = r.relative_accuracy;
    j["relative_accuracy_pct"] = 100.0 * r.relative_accuracy;
    j["relative_tv"] = r.relative_tv;
    j["relative_tv_se"] = MetricsReport::standard_error(r.window_relative_tv);
  } else {
    j["relative_accuracy"] = nullptr;
    j["relative_tv"] = nullptr;
  }
  j["positions"] = r.positions;
  j["windows"] = r.windows;
  return j.dump(indent);
}

}  // namespace tandem
