#include "tandem/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "tandem/kernels.hpp"

namespace tandem {

template <typename T>
void softmax(std::span<const T> in, std::span<T> out) {
  if (in.size() != out.size()) throw std::invalid_argument("softmax: size mismatch");
  if (in.empty()) throw std::invalid_argument("softmax: empty input");
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : in) {
    if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite input");
    mx = std::max(mx, v);
  }
  T sum = 0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  const T inv = T{1} / sum;
  for (auto& o : out) o *= inv;
}

template <typename T>
std::vector<T> softmax(std::span<const T> in) {
  std::vector<T> out(in.size());
  softmax<T>(in, out);
  return out;
}

template <typename T>
void log_softmax(std::span<const T> in, std::span<T> out) {
  if (in.size() != out.size()) throw std::invalid_argument("log_softmax: size mismatch");
  if (in.empty()) throw std::invalid_argument("log_softmax: empty input");
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : in) {
    if (!std::isfinite(v)) throw std::domain_error("log_softmax: non-finite input");
    mx = std::max(mx, v);
  }
  T sum = 0;
  for (T v : in) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] - lse;
}

template <typename T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <typename T>
void rmsnorm_forward(const Tensor<T>& x, const Tensor<T>& gain, Tensor<T>& y, std::vector<T>& inv_rms) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (gain.size() != d) throw std::invalid_argument("rmsnorm: gain size mismatch");
  if (y.shape() != x.shape()) y = Tensor<T>(x.shape());
  inv_rms.resize(rows);
  const T eps = static_cast<T>(kRmsNormEps);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[r] = inv;
    T* yr = y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gain[j];
  }
}

template <typename T>
void rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& gain, const std::vector<T>& inv_rms,
                      const Tensor<T>& dy, Tensor<T>& dx, NoDeduce<Tensor<T>*> dgain) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (dx.shape() != x.shape()) dx = Tensor<T>(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    const T* dyr = dy.data() + r * d;
    T* dxr = dx.data() + r * d;
    const T inv = inv_rms[r];
    T dot = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = xr[j] * inv;
      const T dxhat = dyr[j] * gain[j];
      dot += dxhat * xhat;
      if (dgain) (*dgain)[j] += dyr[j] * xhat;
    }
    dot /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = xr[j] * inv;
      dxr[j] = inv * (dyr[j] * gain[j] - xhat * dot);
    }
  }
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, NoDeduce<const Tensor<T>*> b) {
  if (w.rank() != 2 || x.cols() != w.dim(0)) {
    throw std::invalid_argument("linear: input width " + std::to_string(x.cols()) +
                                " does not match weight " + shape_to_string(w.shape()));
  }
  const std::size_t out = w.dim(1);
  if (b && !b->empty() && b->size() != out) throw std::invalid_argument("linear: bias size mismatch");
  Tensor<T> y({x.rows(), out});
  kernels::matmul(x.data(), w.data(), (b && !b->empty()) ? b->data() : nullptr, y.data(), x.rows(),
                  w.dim(0), out);
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, NoDeduce<Tensor<T>*> dx,
                     NoDeduce<Tensor<T>*> dw, NoDeduce<Tensor<T>*> db) {
  const std::size_t rows = x.rows(), in = w.dim(0), out = w.dim(1);
  if (dx) {
    if (dx->shape() != x.shape()) *dx = Tensor<T>(x.shape());
    kernels::matmul_bt_acc(dy.data(), w.data(), dx->data(), rows, out, in);
  }
  if (dw) kernels::matmul_at_acc(x.data(), dy.data(), dw->data(), rows, in, out);
  if (db && !db->empty()) kernels::colsum_acc(dy.data(), db->data(), rows, out);
}

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
                      const Tensor<T>& b2) {
  Tensor<T> u = linear_forward(x, w1, &b1);
  for (auto& v : u.values()) v = gelu(v);
  return linear_forward(u, w2, &b2);
}

// ---------------------------------------------------------------------------

namespace {

int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

}  // namespace

AttentionMask AttentionMask::causal(int seq_len) {
  AttentionMask m;
  for (int i = 0; i < seq_len; ++i) {
    m.spans_.push_back({0, i + 1, false});
    m.offsets_.push_back(static_cast<int>(m.spans_.size()));
  }
  m.finalize();
  return m;
}

AttentionMask AttentionMask::frontier(std::span<const int> frontier) {
  AttentionMask m;
  for (int i = 0; i < static_cast<int>(frontier.size()); ++i) {
    const int f = frontier[i];
    if (f < 0 || f > i) throw std::invalid_argument("frontier mask: frontier out of range at query " + std::to_string(i));
    if (f > 0) m.spans_.push_back({0, f, true});
    m.spans_.push_back({f, i + 1, false});
    m.offsets_.push_back(static_cast<int>(m.spans_.size()));
  }
  m.finalize();
  return m;
}

AttentionMask AttentionMask::sketch(int seq_len, int gamma) {
  if (gamma < 1) throw std::invalid_argument("sketch mask: gamma must be >= 1");
  AttentionMask m;
  for (int i = 0; i < seq_len; ++i) {
    // Keys up to the last position of the previous drafted block, plus self.
    const int limit = ceil_div(i - gamma, gamma) * gamma;  // always < i
    if (limit >= 0) m.spans_.push_back({0, limit + 1, false});
    if (limit + 1 <= i) m.spans_.push_back({i, i + 1, false});
    m.offsets_.push_back(static_cast<int>(m.spans_.size()));
  }
  m.finalize();
  return m;
}

AttentionMask AttentionMask::from_spans(std::vector<std::vector<KeySpan>> spans) {
  AttentionMask m;
  for (auto& q : spans) {
    for (auto& s : q) m.spans_.push_back(s);
    m.offsets_.push_back(static_cast<int>(m.spans_.size()));
  }
  m.finalize();
  return m;
}

void AttentionMask::finalize() {
  const int nq = queries();
  key_counts_.assign(nq, 0);
  key_offsets_.assign(nq, 0);
  total_keys_ = 0;
  for (int i = 0; i < nq; ++i) {
    int n = 0;
    for (const auto& s : spans(i)) {
      if (s.begin < 0 || s.end < s.begin) throw std::invalid_argument("attention mask: malformed span");
      n += s.end - s.begin;
      uses_external_ = uses_external_ || (s.external && s.end > s.begin);
    }
    if (n == 0) throw std::invalid_argument("attention mask: empty allowed key set for query " + std::to_string(i));
    key_counts_[i] = n;
    key_offsets_[i] = total_keys_;
    total_keys_ += n;
  }
}

bool AttentionMask::allows(int query, int key) const {
  for (const auto& s : spans(query))
    if (key >= s.begin && key < s.end) return true;
  return false;
}

template <typename T>
void attend_query(const T* q, std::span<const KeySpan> spans, KVView<T> local, KVView<T> external, int n_heads,
                  int d_model, T* out, NoDeduce<T*> probs) {
  const int dh = d_model / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  int nkeys = 0;
  for (const auto& s : spans) nkeys += s.end - s.begin;
  std::vector<T> scores(static_cast<std::size_t>(nkeys));
  for (int h = 0; h < n_heads; ++h) {
    const T* qh = q + h * dh;
    int idx = 0;
    for (const auto& s : spans) {
      const KVView<T>& src = s.external ? external : local;
      for (int p = s.begin; p < s.end; ++p, ++idx) {
        const T* kp = src.k + static_cast<std::size_t>(p) * src.stride + h * dh;
        T dot = 0;
        for (int c = 0; c < dh; ++c) dot += qh[c] * kp[c];
        scores[idx] = dot * scale;
      }
    }
    softmax<T>(scores, scores);
    T* oh = out + h * dh;
    for (int c = 0; c < dh; ++c) oh[c] = 0;
    idx = 0;
    for (const auto& s : spans) {
      const KVView<T>& src = s.external ? external : local;
      for (int p = s.begin; p < s.end; ++p, ++idx) {
        const T w = scores[idx];
        const T* vp = src.v + static_cast<std::size_t>(p) * src.stride + h * dh;
        for (int c = 0; c < dh; ++c) oh[c] += w * vp[c];
      }
    }
    if (probs) std::copy(scores.begin(), scores.end(), probs + static_cast<std::size_t>(h) * nkeys);
  }
}

template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           NoDeduce<const Tensor<T>*> ext_k, NoDeduce<const Tensor<T>*> ext_v, const AttentionMask& mask, int batch, int n_heads,
                           NoDeduce<std::vector<T>*> probs) {
  const int seq = mask.queries();
  const int d = static_cast<int>(q.cols());
  if (n_heads <= 0 || d % n_heads != 0) throw std::invalid_argument("attention: heads must divide model dim");
  const std::size_t rows = static_cast<std::size_t>(batch) * seq;
  if (q.rows() != rows || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw std::invalid_argument("attention: query/key/value shapes disagree");
  }
  if (mask.uses_external() && (!ext_k || !ext_v || ext_k->shape() != q.shape() || ext_v->shape() != q.shape())) {
    throw std::invalid_argument("attention: mask needs external keys/values of matching shape");
  }
  Tensor<T> out({rows, static_cast<std::size_t>(d)});
  const std::size_t per_seq = static_cast<std::size_t>(n_heads) * mask.total_keys();
  if (probs) probs->assign(static_cast<std::size_t>(batch) * per_seq, T{0});
  const long long total = static_cast<long long>(rows);
#pragma omp parallel for schedule(static) if (rows * static_cast<std::size_t>(d) * seq > kernels::kParallelThreshold)
  for (long long rr = 0; rr < total; ++rr) {
    const int b = static_cast<int>(rr / seq);
    const int i = static_cast<int>(rr % seq);
    const std::size_t base = static_cast<std::size_t>(b) * seq * d;
    KVView<T> local{k.data() + base, v.data() + base, static_cast<std::size_t>(d)};
    KVView<T> ext{};
    if (ext_k) ext = {ext_k->data() + base, ext_v->data() + base, static_cast<std::size_t>(d)};
    const int nk = mask.key_count(i);
    std::vector<T> pbuf(probs ? static_cast<std::size_t>(n_heads) * nk : 0);
    attend_query(q.data() + static_cast<std::size_t>(rr) * d, mask.spans(i), local, ext, n_heads, d,
                 out.data() + static_cast<std::size_t>(rr) * d, probs ? pbuf.data() : nullptr);
    if (probs) {
      // Stored head-major within the sequence: [h][key_offset(i) + j].
      for (int h = 0; h < n_heads; ++h) {
        T* dst = probs->data() + b * per_seq + static_cast<std::size_t>(h) * mask.total_keys() + mask.key_offset(i);
        std::copy_n(pbuf.data() + static_cast<std::size_t>(h) * nk, nk, dst);
      }
    }
  }
  return out;
}

template <typename T>
AttentionGrads<T> masked_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                            NoDeduce<const Tensor<T>*> ext_k, NoDeduce<const Tensor<T>*> ext_v,
                                            const AttentionMask& mask, int batch, int n_heads,
                                            const std::vector<T>& probs, const Tensor<T>& dout) {
  const int seq = mask.queries();
  const int d = static_cast<int>(q.cols());
  const int dh = d / n_heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  AttentionGrads<T> g;
  g.dq = Tensor<T>(q.shape());
  g.dk = Tensor<T>(q.shape());
  g.dv = Tensor<T>(q.shape());
  if (mask.uses_external()) {
    g.dext_k = Tensor<T>(q.shape());
    g.dext_v = Tensor<T>(q.shape());
  }
  const std::size_t per_seq = static_cast<std::size_t>(n_heads) * mask.total_keys();
  const long long jobs = static_cast<long long>(batch) * n_heads;
  // Each (sequence, head) pair owns disjoint rows and columns of every gradient.
#pragma omp parallel for schedule(static)
  for (long long job = 0; job < jobs; ++job) {
    const int b = static_cast<int>(job / n_heads);
    const int h = static_cast<int>(job % n_heads);
    const std::size_t base = static_cast<std::size_t>(b) * seq * d;
    std::vector<T> dp;
    for (int i = 0; i < seq; ++i) {
      const std::size_t qi = base + static_cast<std::size_t>(i) * d + h * dh;
      const T* pr = probs.data() + b * per_seq + static_cast<std::size_t>(h) * mask.total_keys() + mask.key_offset(i);
      const T* doi = dout.data() + qi;
      const int nk = mask.key_count(i);
      dp.assign(nk, T{0});
      int idx = 0;
      T sum = 0;
      for (const auto& s : mask.spans(i)) {
        const Tensor<T>& vs = s.external ? *ext_v : v;
        Tensor<T>& dvs = s.external ? g.dext_v : g.dv;
        for (int p = s.begin; p < s.end; ++p, ++idx) {
          const std::size_t kp = base + static_cast<std::size_t>(p) * d + h * dh;
          T dot = 0;
          for (int c = 0; c < dh; ++c) {
            dot += doi[c] * vs[kp + c];
            dvs[kp + c] += pr[idx] * doi[c];
          }
          dp[idx] = dot;
          sum += pr[idx] * dot;
        }
      }
      idx = 0;
      for (const auto& s : mask.spans(i)) {
        const Tensor<T>& ks = s.external ? *ext_k : k;
        Tensor<T>& dks = s.external ? g.dext_k : g.dk;
        for (int p = s.begin; p < s.end; ++p, ++idx) {
          const std::size_t kp = base + static_cast<std::size_t>(p) * d + h * dh;
          const T ds = pr[idx] * (dp[idx] - sum) * scale;
          for (int c = 0; c < dh; ++c) {
            g.dq[qi + c] += ds * ks[kp + c];
            dks[kp + c] += ds * q[qi + c];
          }
        }
      }
    }
  }
  return g;
}

#define TANDEM_INSTANTIATE_OPS(T)                                                                               \
  template void softmax<T>(std::span<const T>, std::span<T>);                                                   \
  template std::vector<T> softmax<T>(std::span<const T>);                                                       \
  template void log_softmax<T>(std::span<const T>, std::span<T>);                                               \
  template T gelu<T>(T);                                                                                        \
  template T gelu_grad<T>(T);                                                                                   \
  template void rmsnorm_forward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&, std::vector<T>&);          \
  template void rmsnorm_backward<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<T>&,                \
                                    const Tensor<T>&, Tensor<T>&, Tensor<T>*);                                 \
  template Tensor<T> linear_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                  \
  template void linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,          \
                                   Tensor<T>*, Tensor<T>*);                                                    \
  template Tensor<T> ffn_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                    const Tensor<T>&);                                                         \
  template void attend_query<T>(const T*, std::span<const KeySpan>, KVView<T>, KVView<T>, int, int, T*, T*);   \
  template Tensor<T> masked_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                         const Tensor<T>*, const Tensor<T>*, const AttentionMask&, int, int,   \
                                         std::vector<T>*);                                                     \
  template AttentionGrads<T> masked_attention_backward<T>(const Tensor<T>&, const Tensor<T>&,                  \
                                                          const Tensor<T>&, const Tensor<T>*,                  \
                                                          const Tensor<T>*, const AttentionMask&, int, int,    \
                                                          const std::vector<T>&, const Tensor<T>&);

TANDEM_INSTANTIATE_OPS(float)
TANDEM_INSTANTIATE_OPS(double)

}  // namespace tandem
