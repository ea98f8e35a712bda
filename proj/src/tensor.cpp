#include "mimdet/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace mimdet {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace alloc_stats {
namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace
std::size_t current() { return g_current.load(); }
std::size_t peak() { return g_peak.load(); }
void reset_peak() { g_peak.store(g_current.load()); }
void track(std::size_t bytes) {
  std::size_t cur = g_current.fetch_add(bytes) + bytes;
  std::size_t pk = g_peak.load();
  while (cur > pk && !g_peak.compare_exchange_weak(pk, cur)) {
  }
}
void untrack(std::size_t bytes) { g_current.fetch_sub(bytes); }
}  // namespace alloc_stats

namespace {
long product(const Shape& s) {
  long n = 1;
  for (long d : s) {
    if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::shared_ptr<std::vector<double>> make_buffer(std::size_t n) {
  auto* raw = new std::vector<double>(n, 0.0);
  alloc_stats::track(n * sizeof(double));
  return std::shared_ptr<std::vector<double>>(raw, [n](std::vector<double>* p) {
    alloc_stats::untrack(n * sizeof(double));
    delete p;
  });
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  buf_ = make_buffer(static_cast<std::size_t>(product(shape_)));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.buf_->begin(), t.buf_->end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values) {
  Tensor t(std::move(shape));
  if (static_cast<long>(values.size()) != t.numel())
    throw std::invalid_argument("value count does not match shape " + shape_str(t.shape_));
  std::copy(values.begin(), values.end(), t.buf_->begin());
  return t;
}

long Tensor::numel() const { return buf_ ? static_cast<long>(buf_->size()) : 0; }

Tensor Tensor::reshaped(Shape shape) const {
  if (product(shape) != numel())
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + ": element count mismatch");
  Tensor t;
  t.shape_ = std::move(shape);
  t.buf_ = buf_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t(shape_);
  std::copy(buf_->begin(), buf_->end(), t.buf_->begin());
  return t;
}

int Tape::leaf(const Shape& shape) {
  nodes_.push_back(Node{Tensor(shape), nullptr});
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::node(const Shape& shape, std::function<void(Tape&)> back) {
  nodes_.push_back(Node{Tensor(shape), std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(int loss_id) {
  // Nodes recorded after the loss cannot influence it; start the replay there.
  for (long i = loss_id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back) n.back(*this);
  }
}

Value make_leaf(Tape* tape, Tensor t) {
  Value v{std::move(t), -1};
  if (tape) v.id = tape->leaf(v.v.shape());
  return v;
}

void axpy(Tensor& dst, const Tensor& src, double s) {
  if (!dst.same_shape(src))
    throw std::invalid_argument("axpy shape mismatch " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  const double* sp = src.data();
  double* dp = dst.data();
  const long n = dst.numel();
  for (long i = 0; i < n; ++i) dp[i] += s * sp[i];
}

void backward(Tape& tape, const Value& loss) {
  if (!loss.tracked()) throw std::invalid_argument("backward: loss is not on the tape");
  if (loss.v.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.v.shape()));
  tape.grad(loss.id)[0] = 1.0;
  tape.backward(loss.id);
}

// ---- op helpers -----------------------------------------------------------

namespace {

bool any_tracked(std::initializer_list<const Value*> vs) {
  for (const Value* v : vs)
    if (v->tracked()) return true;
  return false;
}

void check_indices(const std::vector<long>& idx, long limit) {
  std::unordered_set<long> seen;
  for (long i : idx) {
    if (i < 0 || i >= limit)
      throw std::invalid_argument("row index " + std::to_string(i) + " out of range [0," + std::to_string(limit) + ")");
    if (!seen.insert(i).second)
      throw std::invalid_argument("duplicate row index " + std::to_string(i));
  }
}

}  // namespace

Value add(Tape* t, const Value& a, const Value& b) {
  if (!a.v.same_shape(b.v))
    throw std::invalid_argument("add shape mismatch " + shape_str(a.v.shape()) + " vs " + shape_str(b.v.shape()));
  Tensor out(a.v.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = a.v[i] + b.v[i];
  Value r{std::move(out), -1};
  if (t && any_tracked({&a, &b})) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), aid = a.id, bid = b.id](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      if (aid >= 0) axpy(tp.grad(aid), g);
      if (bid >= 0) axpy(tp.grad(bid), g);
    });
  }
  return r;
}

Value scale(Tape* t, const Value& x, double s) {
  Tensor out(x.v.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = s * x.v[i];
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, s](Tape& tp) {
      axpy(tp.grad(xid), tp.grad(rid), s);
    });
  }
  return r;
}

Value conv2d(Tape* t, const Value& input, const Value& weight,
             const std::optional<Value>& bias, long stride, long padding) {
  const Tensor& x = input.v;
  const Tensor& w = weight.v;
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d expects rank-4 input/weight, got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const long N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (w.dim(3) != k) throw std::invalid_argument("conv2d expects square kernels, got " + shape_str(w.shape()));
  if (k < 1 || stride < 1) throw std::invalid_argument("conv2d: kernel and stride must be >= 1");
  if (H + 2 * padding < k || W + 2 * padding < k)
    throw std::invalid_argument("conv2d: padded input smaller than kernel");
  if (bias && (bias->v.rank() != 1 || bias->v.dim(0) != Cout))
    throw std::invalid_argument("conv2d bias shape " + shape_str(bias->v.shape()) + " does not match Cout=" + std::to_string(Cout));
  const long Ho = (H + 2 * padding - k) / stride + 1;
  const long Wo = (W + 2 * padding - k) / stride + 1;

  Tensor out({N, Cout, Ho, Wo});
  const double* xp = x.data();
  const double* wp = w.data();
  double* op = out.data();
  for (long n = 0; n < N; ++n)
    for (long co = 0; co < Cout; ++co)
      for (long oh = 0; oh < Ho; ++oh)
        for (long ow = 0; ow < Wo; ++ow) {
          double acc = bias ? bias->v[co] : 0.0;
          for (long ci = 0; ci < Cin; ++ci)
            for (long kh = 0; kh < k; ++kh) {
              const long ih = oh * stride - padding + kh;
              if (ih < 0 || ih >= H) continue;
              const double* xrow = xp + ((n * Cin + ci) * H + ih) * W;
              const double* wrow = wp + ((co * Cin + ci) * k + kh) * k;
              for (long kw = 0; kw < k; ++kw) {
                const long iw = ow * stride - padding + kw;
                if (iw < 0 || iw >= W) continue;
                acc += xrow[iw] * wrow[kw];
              }
            }
          op[((n * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }

  Value r{std::move(out), -1};
  const bool track_bias = bias && bias->tracked();
  if (t && (any_tracked({&input, &weight}) || track_bias)) {
    const int bid = track_bias ? bias->id : -1;
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), input, weight, bid,
                                 stride, padding, N, Cin, Cout, H, W, Ho, Wo, k](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      const double* gp = g.data();
      const double* xp2 = input.v.data();
      const double* wp2 = weight.v.data();
      Tensor* gx = input.tracked() ? &tp.grad(input.id) : nullptr;
      Tensor* gw = weight.tracked() ? &tp.grad(weight.id) : nullptr;
      Tensor* gb = bid >= 0 ? &tp.grad(bid) : nullptr;
      for (long n = 0; n < N; ++n)
        for (long co = 0; co < Cout; ++co)
          for (long oh = 0; oh < Ho; ++oh)
            for (long ow = 0; ow < Wo; ++ow) {
              const double go = gp[((n * Cout + co) * Ho + oh) * Wo + ow];
              if (gb) (*gb)[co] += go;
              for (long ci = 0; ci < Cin; ++ci)
                for (long kh = 0; kh < k; ++kh) {
                  const long ih = oh * stride - padding + kh;
                  if (ih < 0 || ih >= H) continue;
                  for (long kw = 0; kw < k; ++kw) {
                    const long iw = ow * stride - padding + kw;
                    if (iw < 0 || iw >= W) continue;
                    const long xoff = ((n * Cin + ci) * H + ih) * W + iw;
                    const long woff = ((co * Cin + ci) * k + kh) * k + kw;
                    if (gx) (*gx)[xoff] += go * wp2[woff];
                    if (gw) (*gw)[woff] += go * xp2[xoff];
                  }
                }
            }
    });
  }
  return r;
}

namespace {
// Decompose a tensor into (outer, C, cstride, inner) for channel-wise norm:
// rank-4 NCHW normalizes over axis 1, rank-2/3 over the last axis.
struct NormLayout {
  long outer, C, cstride, inner;
};
NormLayout norm_layout(const Tensor& x) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3), x.dim(2) * x.dim(3)};
  if (x.rank() == 3) return {x.dim(0) * x.dim(1), x.dim(2), 1, 1};
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1, 1};
  throw std::invalid_argument("layer_norm: unsupported rank for " + shape_str(x.shape()));
}
}  // namespace

Value layer_norm_channels(Tape* t, const Value& x, const Value& gamma,
                          const Value& beta, double eps) {
  if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be positive");
  const NormLayout L = norm_layout(x.v);
  if (gamma.v.numel() != L.C || beta.v.numel() != L.C)
    throw std::invalid_argument("layer_norm: gamma/beta length " + std::to_string(gamma.v.numel()) +
                                " does not match channel count " + std::to_string(L.C));
  Tensor out(x.v.shape());
  // Per position: xhat = (x - mean) / sqrt(var + eps); out = gamma * xhat + beta.
  Tensor xhat(x.v.shape());
  Tensor inv_sigma({L.outer * L.inner});
  const double* xp = x.v.data();
  double* op = out.data();
  double* hp = xhat.data();
  for (long o = 0; o < L.outer; ++o)
    for (long in = 0; in < L.inner; ++in) {
      const long base = o * L.C * L.inner + in;
      double mean = 0;
      for (long c = 0; c < L.C; ++c) mean += xp[base + c * L.cstride];
      mean /= static_cast<double>(L.C);
      double var = 0;
      for (long c = 0; c < L.C; ++c) {
        const double d = xp[base + c * L.cstride] - mean;
        var += d * d;
      }
      var /= static_cast<double>(L.C);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[o * L.inner + in] = is;
      for (long c = 0; c < L.C; ++c) {
        const long off = base + c * L.cstride;
        const double h = (xp[off] - mean) * is;
        hp[off] = h;
        op[off] = gamma.v[c] * h + beta.v[c];
      }
    }

  Value r{std::move(out), -1};
  if (t && any_tracked({&x, &gamma, &beta})) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), x, gamma, beta, xhat, inv_sigma, L](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor* gx = x.tracked() ? &tp.grad(x.id) : nullptr;
      Tensor* gg = gamma.tracked() ? &tp.grad(gamma.id) : nullptr;
      Tensor* gb = beta.tracked() ? &tp.grad(beta.id) : nullptr;
      const double* gp = g.data();
      const double* hp2 = xhat.data();
      for (long o = 0; o < L.outer; ++o)
        for (long in = 0; in < L.inner; ++in) {
          const long base = o * L.C * L.inner + in;
          const double is = inv_sigma[o * L.inner + in];
          double gmean = 0, gdot = 0;
          for (long c = 0; c < L.C; ++c) {
            const long off = base + c * L.cstride;
            const double gh = gp[off] * gamma.v[c];
            gmean += gh;
            gdot += gh * hp2[off];
            if (gg) (*gg)[c] += gp[off] * hp2[off];
            if (gb) (*gb)[c] += gp[off];
          }
          if (!gx) continue;
          gmean /= static_cast<double>(L.C);
          gdot /= static_cast<double>(L.C);
          for (long c = 0; c < L.C; ++c) {
            const long off = base + c * L.cstride;
            const double gh = gp[off] * gamma.v[c];
            (*gx)[off] += is * (gh - gmean - hp2[off] * gdot);
          }
        }
    });
  }
  return r;
}

Value softmax_rows(Tape* t, const Value& x) {
  if (x.v.rank() < 1) throw std::invalid_argument("softmax_rows: rank must be >= 1");
  const long n = x.v.dim(x.v.rank() - 1);
  const long rows = x.v.numel() / n;
  Tensor out(x.v.shape());
  const double* xp = x.v.data();
  double* op = out.data();
  for (long r = 0; r < rows; ++r) {
    const double* row = xp + r * n;
    double* orow = op + r * n;
    double m = row[0];
    for (long i = 1; i < n; ++i) m = std::max(m, row[i]);
    double sum = 0;
    for (long i = 0; i < n; ++i) {
      orow[i] = std::exp(row[i] - m);
      sum += orow[i];
    }
    for (long i = 0; i < n; ++i) orow[i] /= sum;
  }
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    Tensor y = r.v;
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, y, rows, n](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(xid);
      for (long r2 = 0; r2 < rows; ++r2) {
        const double* gr = g.data() + r2 * n;
        const double* yr = y.data() + r2 * n;
        double* gxr = gx.data() + r2 * n;
        double dot = 0;
        for (long i = 0; i < n; ++i) dot += gr[i] * yr[i];
        for (long i = 0; i < n; ++i) gxr[i] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return r;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
inline double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
}  // namespace

Value gelu(Tape* t, const Value& x) {
  Tensor out(x.v.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = x.v[i] * norm_cdf(x.v[i]);
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), x, n](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(x.id);
      for (long i = 0; i < n; ++i) {
        const double xi = x.v[i];
        const double d = norm_cdf(xi) + xi * kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
        gx[i] += g[i] * d;
      }
    });
  }
  return r;
}

Value avg_pool2d(Tape* t, const Value& x, long k, long stride) {
  if (x.v.rank() != 4) throw std::invalid_argument("avg_pool2d expects rank-4 input, got " + shape_str(x.v.shape()));
  if (k != stride) throw std::invalid_argument("avg_pool2d: only k == stride windows are supported");
  const long N = x.v.dim(0), C = x.v.dim(1), H = x.v.dim(2), W = x.v.dim(3);
  if (H % stride != 0 || W % stride != 0)
    throw std::invalid_argument("avg_pool2d: extents " + shape_str(x.v.shape()) + " not divisible by stride " + std::to_string(stride));
  const long Ho = H / stride, Wo = W / stride;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({N, C, Ho, Wo});
  const double* xp = x.v.data();
  double* op = out.data();
  for (long nc = 0; nc < N * C; ++nc)
    for (long oh = 0; oh < Ho; ++oh)
      for (long ow = 0; ow < Wo; ++ow) {
        double acc = 0;
        for (long kh = 0; kh < k; ++kh)
          for (long kw = 0; kw < k; ++kw) acc += xp[(nc * H + oh * stride + kh) * W + ow * stride + kw];
        op[(nc * Ho + oh) * Wo + ow] = acc * inv;
      }
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, N, C, H, W, Ho, Wo, k, stride, inv](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(xid);
      for (long nc = 0; nc < N * C; ++nc)
        for (long oh = 0; oh < Ho; ++oh)
          for (long ow = 0; ow < Wo; ++ow) {
            const double go = g[(nc * Ho + oh) * Wo + ow] * inv;
            for (long kh = 0; kh < k; ++kh)
              for (long kw = 0; kw < k; ++kw) gx[(nc * H + oh * stride + kh) * W + ow * stride + kw] += go;
          }
    });
  }
  return r;
}

namespace {
// Both gather and scatter treat rank-2 [L,D] as batch 1 of rank-3 [N,L,D].
struct RowLayout {
  long N, L, D;
};
RowLayout row_layout(const Tensor& x) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1)};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
  throw std::invalid_argument("row op expects rank 2 or 3, got " + shape_str(x.shape()));
}
}  // namespace

Value gather_rows(Tape* t, const Value& x, const std::vector<long>& indices) {
  const RowLayout L = row_layout(x.v);
  check_indices(indices, L.L);
  const long M = static_cast<long>(indices.size());
  Shape oshape = x.v.shape();
  oshape[oshape.size() - 2] = M;
  Tensor out(oshape);
  for (long n = 0; n < L.N; ++n)
    for (long m = 0; m < M; ++m) {
      const double* src = x.v.data() + (n * L.L + indices[static_cast<std::size_t>(m)]) * L.D;
      double* dst = out.data() + (n * M + m) * L.D;
      std::copy(src, src + L.D, dst);
    }
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, indices, L, M](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(xid);
      for (long n = 0; n < L.N; ++n)
        for (long m = 0; m < M; ++m) {
          const double* gs = g.data() + (n * M + m) * L.D;
          double* gd = gx.data() + (n * L.L + indices[static_cast<std::size_t>(m)]) * L.D;
          for (long d = 0; d < L.D; ++d) gd[d] += gs[d];
        }
    });
  }
  return r;
}

Value scatter_rows(Tape* t, const Value& base, const std::vector<long>& indices,
                   const Value& values) {
  const RowLayout L = row_layout(base.v);
  const RowLayout V = row_layout(values.v);
  check_indices(indices, L.L);
  if (V.N != L.N || V.D != L.D || V.L != static_cast<long>(indices.size()))
    throw std::invalid_argument("scatter_rows: values " + shape_str(values.v.shape()) + " do not match base " +
                                shape_str(base.v.shape()) + " with " + std::to_string(indices.size()) + " indices");
  Tensor out = base.v.clone();
  const long M = V.L;
  for (long n = 0; n < L.N; ++n)
    for (long m = 0; m < M; ++m) {
      const double* src = values.v.data() + (n * M + m) * L.D;
      double* dst = out.data() + (n * L.L + indices[static_cast<std::size_t>(m)]) * L.D;
      std::copy(src, src + L.D, dst);
    }
  Value r{std::move(out), -1};
  if (t && any_tracked({&base, &values})) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), bid = base.id, vid = values.id, indices, L, M](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      if (vid >= 0) {
        Tensor& gv = tp.grad(vid);
        for (long n = 0; n < L.N; ++n)
          for (long m = 0; m < M; ++m) {
            const double* gs = g.data() + (n * L.L + indices[static_cast<std::size_t>(m)]) * L.D;
            double* gd = gv.data() + (n * M + m) * L.D;
            for (long d = 0; d < L.D; ++d) gd[d] += gs[d];
          }
      }
      if (bid >= 0) {
        Tensor& gb = tp.grad(bid);
        std::vector<char> overwritten(static_cast<std::size_t>(L.L), 0);
        for (long i : indices) overwritten[static_cast<std::size_t>(i)] = 1;
        for (long n = 0; n < L.N; ++n)
          for (long l = 0; l < L.L; ++l) {
            if (overwritten[static_cast<std::size_t>(l)]) continue;
            const double* gs = g.data() + (n * L.L + l) * L.D;
            double* gd = gb.data() + (n * L.L + l) * L.D;
            for (long d = 0; d < L.D; ++d) gd[d] += gs[d];
          }
      }
    });
  }
  return r;
}

Value linear(Tape* t, const Value& x, const Value& weight,
             const std::optional<Value>& bias) {
  const long Dout = weight.v.dim(0), Din = weight.v.dim(1);
  if (weight.v.rank() != 2) throw std::invalid_argument("linear: weight must be rank 2");
  if (x.v.rank() < 1 || x.v.dim(x.v.rank() - 1) != Din)
    throw std::invalid_argument("linear: input " + shape_str(x.v.shape()) + " incompatible with weight " + shape_str(weight.v.shape()));
  if (bias && bias->v.numel() != Dout) throw std::invalid_argument("linear: bias length mismatch");
  const long rows = x.v.numel() / Din;
  Shape oshape = x.v.shape();
  oshape[oshape.size() - 1] = Dout;
  Tensor out(oshape);
  const double* xp = x.v.data();
  const double* wp = weight.v.data();
  double* op = out.data();
  for (long r = 0; r < rows; ++r)
    for (long o = 0; o < Dout; ++o) {
      double acc = bias ? bias->v[o] : 0.0;
      const double* xr = xp + r * Din;
      const double* wr = wp + o * Din;
      for (long i = 0; i < Din; ++i) acc += xr[i] * wr[i];
      op[r * Dout + o] = acc;
    }
  Value r{std::move(out), -1};
  const bool track_bias = bias && bias->tracked();
  if (t && (any_tracked({&x, &weight}) || track_bias)) {
    const int bid = track_bias ? bias->id : -1;
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), x, weight, bid, rows, Din, Dout](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      const double* gp = g.data();
      Tensor* gx = x.tracked() ? &tp.grad(x.id) : nullptr;
      Tensor* gw = weight.tracked() ? &tp.grad(weight.id) : nullptr;
      Tensor* gb = bid >= 0 ? &tp.grad(bid) : nullptr;
      for (long r2 = 0; r2 < rows; ++r2)
        for (long o = 0; o < Dout; ++o) {
          const double go = gp[r2 * Dout + o];
          if (gb) (*gb)[o] += go;
          const double* xr = x.v.data() + r2 * Din;
          const double* wr = weight.v.data() + o * Din;
          for (long i = 0; i < Din; ++i) {
            if (gx) (*gx)[r2 * Din + i] += go * wr[i];
            if (gw) (*gw)[o * Din + i] += go * xr[i];
          }
        }
    });
  }
  return r;
}

Value bmm(Tape* t, const Value& a, const Value& b) {
  if (a.v.rank() != 3 || b.v.rank() != 3 || a.v.dim(0) != b.v.dim(0) || a.v.dim(2) != b.v.dim(1))
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.v.shape()) + " and " + shape_str(b.v.shape()));
  const long B = a.v.dim(0), M = a.v.dim(1), K = a.v.dim(2), N = b.v.dim(2);
  Tensor out({B, M, N});
  for (long bb = 0; bb < B; ++bb) {
    const double* ap = a.v.data() + bb * M * K;
    const double* bp = b.v.data() + bb * K * N;
    double* op = out.data() + bb * M * N;
    for (long m = 0; m < M; ++m)
      for (long n = 0; n < N; ++n) {
        double acc = 0;
        for (long k = 0; k < K; ++k) acc += ap[m * K + k] * bp[k * N + n];
        op[m * N + n] = acc;
      }
  }
  Value r{std::move(out), -1};
  if (t && any_tracked({&a, &b})) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), a, b, B, M, K, N](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor* ga = a.tracked() ? &tp.grad(a.id) : nullptr;
      Tensor* gb = b.tracked() ? &tp.grad(b.id) : nullptr;
      for (long bb = 0; bb < B; ++bb) {
        const double* gp = g.data() + bb * M * N;
        const double* ap = a.v.data() + bb * M * K;
        const double* bp = b.v.data() + bb * K * N;
        for (long m = 0; m < M; ++m)
          for (long n = 0; n < N; ++n) {
            const double go = gp[m * N + n];
            for (long k = 0; k < K; ++k) {
              if (ga) (*ga)[bb * M * K + m * K + k] += go * bp[k * N + n];
              if (gb) (*gb)[bb * K * N + k * N + n] += go * ap[m * K + k];
            }
          }
      }
    });
  }
  return r;
}

Value transpose_last(Tape* t, const Value& x) {
  if (x.v.rank() != 3) throw std::invalid_argument("transpose_last expects rank 3, got " + shape_str(x.v.shape()));
  const long B = x.v.dim(0), M = x.v.dim(1), N = x.v.dim(2);
  Tensor out({B, N, M});
  for (long b = 0; b < B; ++b)
    for (long m = 0; m < M; ++m)
      for (long n = 0; n < N; ++n) out[b * N * M + n * M + m] = x.v[b * M * N + m * N + n];
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, B, M, N](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(xid);
      for (long b = 0; b < B; ++b)
        for (long m = 0; m < M; ++m)
          for (long n = 0; n < N; ++n) gx[b * M * N + m * N + n] += g[b * N * M + n * M + m];
    });
  }
  return r;
}

namespace {
// [N,L,D] <-> [N*heads, L, D/heads] index maps share this permutation.
void heads_permute(const Tensor& src, Tensor& dst, long N, long L, long H, long Dh, bool split, bool accumulate) {
  for (long n = 0; n < N; ++n)
    for (long l = 0; l < L; ++l)
      for (long h = 0; h < H; ++h)
        for (long d = 0; d < Dh; ++d) {
          const long flat = ((n * L + l) * H + h) * Dh + d;  // [N,L,D]
          const long byhead = ((n * H + h) * L + l) * Dh + d;  // [N*H,L,Dh]
          const long s = split ? flat : byhead;
          const long dd = split ? byhead : flat;
          if (accumulate)
            dst[dd] += src[s];
          else
            dst[dd] = src[s];
        }
}
}  // namespace

Value split_heads(Tape* t, const Value& x, long heads) {
  if (x.v.rank() != 3 || x.v.dim(2) % heads != 0)
    throw std::invalid_argument("split_heads: " + shape_str(x.v.shape()) + " not divisible into " + std::to_string(heads) + " heads");
  const long N = x.v.dim(0), L = x.v.dim(1), Dh = x.v.dim(2) / heads;
  Tensor out({N * heads, L, Dh});
  heads_permute(x.v, out, N, L, heads, Dh, true, false);
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, N, L, heads, Dh](Tape& tp) {
      heads_permute(tp.grad(rid), tp.grad(xid), N, L, heads, Dh, false, true);
    });
  }
  return r;
}

Value merge_heads(Tape* t, const Value& x, long heads) {
  if (x.v.rank() != 3 || x.v.dim(0) % heads != 0)
    throw std::invalid_argument("merge_heads: bad shape " + shape_str(x.v.shape()));
  const long N = x.v.dim(0) / heads, L = x.v.dim(1), Dh = x.v.dim(2);
  Tensor out({N, L, heads * Dh});
  heads_permute(x.v, out, N, L, heads, Dh, false, false);
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, N, L, heads, Dh](Tape& tp) {
      heads_permute(tp.grad(rid), tp.grad(xid), N, L, heads, Dh, true, true);
    });
  }
  return r;
}

Value broadcast_row(Tape* t, const Value& row, long batch, long n) {
  if (row.v.rank() != 1) throw std::invalid_argument("broadcast_row expects a vector");
  const long D = row.v.dim(0);
  Tensor out({batch, n, D});
  for (long b = 0; b < batch; ++b)
    for (long i = 0; i < n; ++i)
      for (long d = 0; d < D; ++d) out[(b * n + i) * D + d] = row.v[d];
  Value r{std::move(out), -1};
  if (t && row.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = row.id, batch, n, D](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(xid);
      for (long b = 0; b < batch; ++b)
        for (long i = 0; i < n; ++i)
          for (long d = 0; d < D; ++d) gx[d] += g[(b * n + i) * D + d];
    });
  }
  return r;
}

Value add_rows_broadcast(Tape* t, const Value& x, const Value& rows) {
  if (x.v.rank() != 3 || rows.v.rank() != 2 || x.v.dim(1) != rows.v.dim(0) || x.v.dim(2) != rows.v.dim(1))
    throw std::invalid_argument("add_rows_broadcast: " + shape_str(x.v.shape()) + " vs " + shape_str(rows.v.shape()));
  const long N = x.v.dim(0), L = x.v.dim(1), D = x.v.dim(2);
  Tensor out(x.v.shape());
  for (long n = 0; n < N; ++n)
    for (long i = 0; i < L * D; ++i) out[n * L * D + i] = x.v[n * L * D + i] + rows.v[i];
  Value r{std::move(out), -1};
  if (t && any_tracked({&x, &rows})) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, pid = rows.id, N, L, D](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      if (xid >= 0) axpy(tp.grad(xid), g);
      if (pid >= 0) {
        Tensor& gp = tp.grad(pid);
        for (long n = 0; n < N; ++n)
          for (long i = 0; i < L * D; ++i) gp[i] += g[n * L * D + i];
      }
    });
  }
  return r;
}

Value seq_to_map(Tape* t, const Value& x, long h, long w) {
  if (x.v.rank() != 3 || x.v.dim(1) != h * w)
    throw std::invalid_argument("seq_to_map: " + shape_str(x.v.shape()) + " incompatible with grid " +
                                std::to_string(h) + "x" + std::to_string(w));
  const long N = x.v.dim(0), C = x.v.dim(2);
  Tensor out({N, C, h, w});
  for (long n = 0; n < N; ++n)
    for (long l = 0; l < h * w; ++l)
      for (long c = 0; c < C; ++c) out[(n * C + c) * h * w + l] = x.v[(n * h * w + l) * C + c];
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, N, C, hw = h * w](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(xid);
      for (long n = 0; n < N; ++n)
        for (long l = 0; l < hw; ++l)
          for (long c = 0; c < C; ++c) gx[(n * hw + l) * C + c] += g[(n * C + c) * hw + l];
    });
  }
  return r;
}

Value upsample_nearest2x(Tape* t, const Value& x) {
  if (x.v.rank() != 4) throw std::invalid_argument("upsample_nearest2x expects rank-4 input");
  const long N = x.v.dim(0), C = x.v.dim(1), H = x.v.dim(2), W = x.v.dim(3);
  Tensor out({N, C, 2 * H, 2 * W});
  for (long nc = 0; nc < N * C; ++nc)
    for (long h = 0; h < 2 * H; ++h)
      for (long w = 0; w < 2 * W; ++w)
        out[(nc * 2 * H + h) * 2 * W + w] = x.v[(nc * H + h / 2) * W + w / 2];
  Value r{std::move(out), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id, N, C, H, W](Tape& tp) {
      const Tensor& g = tp.grad(rid);
      Tensor& gx = tp.grad(xid);
      for (long nc = 0; nc < N * C; ++nc)
        for (long h = 0; h < 2 * H; ++h)
          for (long w = 0; w < 2 * W; ++w) gx[(nc * H + h / 2) * W + w / 2] += g[(nc * 2 * H + h) * 2 * W + w];
    });
  }
  return r;
}

Value reshape(Tape* t, const Value& x, Shape shape) {
  Value r{x.v.reshaped(std::move(shape)).clone(), -1};
  if (t && x.tracked()) {
    r.id = t->node(r.v.shape(), [rid = static_cast<int>(t->size()), xid = x.id](Tape& tp) {
      Tensor g = tp.grad(rid).reshaped(tp.grad(xid).shape());
      axpy(tp.grad(xid), g);
    });
  }
  return r;
}

Value sum_all(Tape* t, const Value& x) {
  double s = 0;
  const long n = x.v.numel();
  for (long i = 0; i < n; ++i) s += x.v[i];
  Value r{Tensor::scalar(s), -1};
  if (t && x.tracked()) {
    r.id = t->node({1}, [rid = static_cast<int>(t->size()), xid = x.id](Tape& tp) {
      axpy(tp.grad(xid), Tensor::full(tp.grad(xid).shape(), tp.grad(rid)[0]));
    });
  }
  return r;
}

Value mse(Tape* t, const Value& a, const Value& b) {
  if (!a.v.same_shape(b.v))
    throw std::invalid_argument("mse shape mismatch " + shape_str(a.v.shape()) + " vs " + shape_str(b.v.shape()));
  const long n = a.v.numel();
  double s = 0;
  for (long i = 0; i < n; ++i) {
    const double d = a.v[i] - b.v[i];
    s += d * d;
  }
  Value r{Tensor::scalar(s / static_cast<double>(n)), -1};
  if (t && any_tracked({&a, &b})) {
    r.id = t->node({1}, [rid = static_cast<int>(t->size()), a, b, n](Tape& tp) {
      const double g = tp.grad(rid)[0] * 2.0 / static_cast<double>(n);
      Tensor* ga = a.tracked() ? &tp.grad(a.id) : nullptr;
      Tensor* gb = b.tracked() ? &tp.grad(b.id) : nullptr;
      for (long i = 0; i < n; ++i) {
        const double d = g * (a.v[i] - b.v[i]);
        if (ga) (*ga)[i] += d;
        if (gb) (*gb)[i] -= d;
      }
    });
  }
  return r;
}

}  // namespace mimdet
