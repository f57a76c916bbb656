#include "tandem/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

#include <Eigen/Dense>

namespace tandem {

namespace {

// Row softmax and log-softmax in double.
void row_softmax(std::span<const double> z, std::vector<double>& p, std::vector<double>& logp) {
  double m = -INFINITY;
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  p.resize(z.size());
  logp.resize(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    logp[k] = z[k] - lse;
    p[k] = std::exp(logp[k]);
  }
}

template <typename T>
void load_row(const Tensor<T>& t, std::size_t r, std::vector<double>& out) {
  auto row = t.row(r);
  out.assign(row.begin(), row.end());
}

}  // namespace

template <typename T>
double ce_loss(const Tensor<T>& logits, std::span<const int> targets, Tensor<T>* dlogits, double scale) {
  const std::size_t rows = logits.rows(), V = logits.cols();
  if (targets.size() != rows) throw std::invalid_argument("ce_loss: one target per row required");
  if (dlogits && dlogits->shape() != logits.shape()) throw std::invalid_argument("ce_loss: gradient shape mismatch");
  std::size_t counted = 0;
  for (int t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw std::out_of_range("ce_loss: target outside vocabulary");
    ++counted;
  }
  if (counted == 0) return 0.0;
  std::vector<double> z, p, logp;
  double total = 0;
  const double g = scale / static_cast<double>(counted);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    load_row(logits, r, z);
    row_softmax(z, p, logp);
    total -= logp[targets[r]];
    if (dlogits) {
      auto d = dlogits->row(r);
      for (std::size_t k = 0; k < V; ++k) {
        const double y = static_cast<int>(k) == targets[r] ? 1.0 : 0.0;
        d[k] += static_cast<T>(g * (p[k] - y));
      }
    }
  }
  return total / static_cast<double>(counted);
}

template <typename T>
double distill_loss(const Tensor<T>& student, const Tensor<T>& teacher, Tensor<T>* dstudent, double scale,
                    std::span<const int> targets) {
  if (student.shape() != teacher.shape()) throw std::invalid_argument("distill_loss: shape mismatch");
  if (dstudent && dstudent->shape() != student.shape()) throw std::invalid_argument("distill_loss: gradient shape");
  const std::size_t rows = student.rows(), V = student.cols();
  if (!targets.empty() && targets.size() != rows) throw std::invalid_argument("distill_loss: mask length");
  auto counted_row = [&](std::size_t r) { return targets.empty() || targets[r] != kIgnoreTarget; };
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) counted += counted_row(r);
  if (counted == 0) return 0.0;
  std::vector<double> zs, zt, ps, logps, pt, logpt;
  double total = 0;
  const double g = scale / static_cast<double>(counted);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!counted_row(r)) continue;
    load_row(student, r, zs);
    load_row(teacher, r, zt);
    row_softmax(zs, ps, logps);
    row_softmax(zt, pt, logpt);
    for (std::size_t k = 0; k < V; ++k) total -= pt[k] * logps[k];
    if (dstudent) {
      auto d = dstudent->row(r);
      for (std::size_t k = 0; k < V; ++k) d[k] += static_cast<T>(g * (ps[k] - pt[k]));
    }
  }
  return total / static_cast<double>(counted);
}

double combined_loss(double ce, double distill, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("combined_loss: lambda outside [0, 1]");
  return lambda * ce + (1.0 - lambda) * distill;
}

namespace {
constexpr std::pair<Variant, const char*> kVariantNames[] = {
    {Variant::STANDALONE, "standalone"},
    {Variant::TANDEM_FROZEN_PRIMARY, "tandem-frozen-primary"},
    {Variant::TANDEM_BOTH_LOSS_SECONDARY, "tandem-both-loss-secondary"},
    {Variant::TANDEM_BOTH_LOSS_BOTH, "tandem-both-loss-both"},
    {Variant::STANDALONE_DISTIL, "standalone-distil"},
    {Variant::TANDEM_DISTIL, "tandem-distil"},
    {Variant::DEEP_TANDEM, "deep-tandem"},
    {Variant::BLOCK_PARALLEL, "block-parallel"},
};
}  // namespace

std::string variant_name(Variant v) {
  for (auto [k, name] : kVariantNames)
    if (k == v) return name;
  throw std::invalid_argument("unknown variant");
}

Variant parse_variant(const std::string& name) {
  for (auto [k, n] : kVariantNames)
    if (name == n) return k;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

bool is_tandem_variant(Variant v) {
  return v == Variant::TANDEM_FROZEN_PRIMARY || v == Variant::TANDEM_BOTH_LOSS_SECONDARY ||
         v == Variant::TANDEM_BOTH_LOSS_BOTH || v == Variant::TANDEM_DISTIL;
}

void TrainConfig::validate() const {
  if (steps <= 0) throw std::invalid_argument("TrainConfig: steps must be positive");
  if (batch_size <= 0 || seq_len <= 0) throw std::invalid_argument("TrainConfig: batch_size and seq_len must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("TrainConfig: lambda outside [0, 1]");
  if (stage1_steps < 0) throw std::invalid_argument("TrainConfig: negative stage boundary");
  if (block_gamma < 1) throw std::invalid_argument("TrainConfig: block_gamma must be >= 1");
}

void split_windows(std::span<const int> windows, int batch, int seq, std::vector<int>& ids, std::vector<int>& targets) {
  const std::size_t w = static_cast<std::size_t>(seq) + 1;
  if (windows.size() != w * batch) throw std::invalid_argument("split_windows: expected batch windows of seq+1");
  ids.clear();
  targets.clear();
  for (int b = 0; b < batch; ++b) {
    auto win = windows.subspan(b * w, w);
    ids.insert(ids.end(), win.begin(), win.end() - 1);
    targets.insert(targets.end(), win.begin() + 1, win.end());
  }
}

std::vector<int> same_position_targets(std::span<const int> ids, int batch, int seq) {
  std::vector<int> t(ids.begin(), ids.end());
  for (int b = 0; b < batch; ++b) t[static_cast<std::size_t>(b) * seq] = kIgnoreTarget;
  return t;
}

namespace {

bool is_distil(Variant v) { return v == Variant::STANDALONE_DISTIL || v == Variant::TANDEM_DISTIL; }

template <typename T>
void require(const T* p, const char* what) {
  if (!p) throw std::invalid_argument(std::string("train: variant requires ") + what);
}

}  // namespace

template <typename T>
TrainResult train(TrainModels<T>& models, const TokenDataset& data, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_step) {
  config.validate();
  const Variant v = config.variant;
  const int B = config.batch_size, S = config.seq_len;

  ParameterSet<T> params;
  switch (v) {
    case Variant::STANDALONE:
      require(models.standalone, "a standalone model");
      params = models.standalone->parameters();
      break;
    case Variant::STANDALONE_DISTIL:
      require(models.standalone, "a standalone model");
      require(models.teacher, "a teacher model");
      if (models.teacher->config().vocab_size != models.standalone->config().vocab_size) {
        throw std::invalid_argument("train: teacher vocabulary differs from student");
      }
      params = models.standalone->parameters();
      break;
    case Variant::TANDEM_FROZEN_PRIMARY:
    case Variant::TANDEM_DISTIL:
      require(models.tandem, "a tandem model");
      params = models.tandem->parameters();
      params.set_trainable(true);
      models.tandem->primary.parameters().set_trainable(false);
      break;
    case Variant::TANDEM_BOTH_LOSS_SECONDARY:
    case Variant::TANDEM_BOTH_LOSS_BOTH:
      require(models.tandem, "a tandem model");
      params = models.tandem->parameters();
      params.set_trainable(true);
      break;
    case Variant::DEEP_TANDEM:
      require(models.deep, "a deep tandem model");
      params = models.deep->parameters();
      break;
    case Variant::BLOCK_PARALLEL:
      require(models.block_parallel, "a block-parallel model");
      params = models.block_parallel->parameters();
      break;
  }

  Adam<T> adam(config.adam);
  TrainResult result;
  result.curve.reserve(static_cast<std::size_t>(config.steps));
  std::vector<int> ids, targets;

  for (std::int64_t step = 0; step < config.steps; ++step) {
    const auto windows = data.sample_windows(B, S + 1, config.data_seed, step);
    split_windows(windows, B, S, ids, targets);
    params.zero_grad();

    LossRecord rec;
    rec.step = step;
    rec.stage = is_distil(v) && step >= config.stage1_steps ? 2 : 1;
    if (rec.stage == 2 && result.stage_switch_step < 0) result.stage_switch_step = step;
    const double lam = rec.stage == 2 ? config.lambda : 1.0;

    switch (v) {
      case Variant::STANDALONE:
      case Variant::STANDALONE_DISTIL: {
        auto& m = *models.standalone;
        auto pass = decoder_forward(m, ids, B, S, true);
        Tensor<T> d(pass.logits.shape());
        rec.loss_ce = ce_loss(pass.logits, targets, &d, lam);
        if (rec.stage == 2) {
          auto teacher = decoder_forward(*models.teacher, ids, B, S, false);
          rec.loss_distill = distill_loss(pass.logits, teacher.logits, &d, 1.0 - lam);
        }
        rec.loss = rec.stage == 2 ? combined_loss(rec.loss_ce, rec.loss_distill, lam) : rec.loss_ce;
        decoder_backward(m, pass, d);
        break;
      }
      case Variant::TANDEM_FROZEN_PRIMARY:
      case Variant::TANDEM_BOTH_LOSS_SECONDARY:
      case Variant::TANDEM_DISTIL: {
        auto& m = *models.tandem;
        auto pass = tandem_forward(m, ids, B, S, true);
        Tensor<T> d(pass.logits.shape());
        rec.loss_ce = ce_loss(pass.logits, targets, &d, lam);
        if (rec.stage == 2) rec.loss_distill = distill_loss(pass.logits, pass.primary.logits, &d, 1.0 - lam);
        rec.loss = rec.stage == 2 ? combined_loss(rec.loss_ce, rec.loss_distill, lam) : rec.loss_ce;
        tandem_backward(m, pass, d);
        break;
      }
      case Variant::TANDEM_BOTH_LOSS_BOTH: {
        auto& m = *models.tandem;
        auto pass = tandem_forward(m, ids, B, S, true);
        Tensor<T> d(pass.logits.shape()), dp(pass.primary.logits.shape());
        rec.loss_ce = ce_loss(pass.logits, targets, &d);
        const double primary_ce = ce_loss(pass.primary.logits, targets, &dp);
        rec.loss = rec.loss_ce = rec.loss_ce + primary_ce;
        tandem_backward(m, pass, d, &dp);
        break;
      }
      case Variant::DEEP_TANDEM: {
        auto& m = *models.deep;
        const auto t = same_position_targets(ids, B, S);
        auto pass = deep_forward(m, ids, B, S, true);
        Tensor<T> d(pass.logits.shape());
        rec.loss = rec.loss_ce = ce_loss(pass.logits, t, &d);
        deep_backward(m, pass, d);
        break;
      }
      case Variant::BLOCK_PARALLEL: {
        auto& m = *models.block_parallel;
        const auto t = same_position_targets(ids, B, S);
        auto pass = block_parallel_forward(m, ids, B, S, config.block_gamma, config.begin_token, true);
        Tensor<T> d(pass.logits.shape());
        rec.loss = rec.loss_ce = ce_loss(pass.logits, t, &d);
        block_parallel_backward(m, pass, d);
        break;
      }
    }
    rec.grad_norm = adam.step(params, config.lr.at(step));
    result.curve.push_back(rec);
    if (on_step) on_step(rec);
  }
  return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss,loss_ce,loss_distill\n" << std::setprecision(9);
  for (const auto& r : curve) out << r.step << ',' << r.loss << ',' << r.loss_ce << ',' << r.loss_distill << '\n';
}

template <typename T>
void fit_projections(TandemModel<T>& model, const TokenDataset& data, int seq_len, int max_windows, double ridge) {
  if (ridge < 0) throw std::invalid_argument("fit_projections: ridge must be non-negative");
  const auto windows = data.sequential_windows(seq_len, max_windows);
  const int n = static_cast<int>(windows.size()) / seq_len;
  const int dl = model.primary.config().d_model;
  const int ds = model.secondary.config().d_model;
  const auto& map = model.layer_map();
  const auto nj = map.size();
  std::vector<Eigen::MatrixXd> xtx(nj, Eigen::MatrixXd::Zero(dl + 1, dl + 1));
  std::vector<Eigen::MatrixXd> xty(nj, Eigen::MatrixXd::Zero(dl + 1, ds));
  for (int w = 0; w < n; ++w) {
    std::span<const int> ids(windows.data() + static_cast<std::size_t>(w) * seq_len, seq_len);
    auto p = decoder_forward(model.primary, ids, 1, seq_len, false);
    auto s = decoder_forward(model.secondary, ids, 1, seq_len, false);
    for (std::size_t j = 0; j < nj; ++j) {
      const auto& x = p.outputs[map[j] + 1];
      const auto& y = s.outputs[j];
      Eigen::MatrixXd X(seq_len, dl + 1), Y(seq_len, ds);
      for (int r = 0; r < seq_len; ++r) {
        for (int c = 0; c < dl; ++c) X(r, c) = x.at(r, c);
        X(r, dl) = 1.0;
        for (int c = 0; c < ds; ++c) Y(r, c) = y.at(r, c);
      }
      xtx[j].noalias() += X.transpose() * X;
      xty[j].noalias() += X.transpose() * Y;
    }
  }
  const double rows = static_cast<double>(n) * seq_len;
  for (std::size_t j = 0; j < nj; ++j) {
    Eigen::MatrixXd A = xtx[j] / rows;
    A.diagonal().head(dl).array() += ridge;
    const Eigen::MatrixXd W = A.ldlt().solve(xty[j] / rows);
    for (int r = 0; r < dl; ++r)
      for (int c = 0; c < ds; ++c) model.proj_w[j].value.at(r, c) = static_cast<T>(W(r, c));
    for (int c = 0; c < ds; ++c) model.proj_b[j].value.data()[c] = static_cast<T>(W(dl, c));
  }
}

#define TANDEM_INSTANTIATE_TRAINING(T)                                                                         \
  template double ce_loss<T>(const Tensor<T>&, std::span<const int>, Tensor<T>*, double);                     \
  template double distill_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*, double, std::span<const int>); \
  template TrainResult train<T>(TrainModels<T>&, const TokenDataset&, const TrainConfig&,                      \
                                const std::function<void(const LossRecord&)>&);                             \
  template void fit_projections<T>(TandemModel<T>&, const TokenDataset&, int, int, double);

TANDEM_INSTANTIATE_TRAINING(float)
TANDEM_INSTANTIATE_TRAINING(double)

}  // namespace tandem
