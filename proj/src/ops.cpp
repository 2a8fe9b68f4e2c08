#include "reformer/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace reformer::ops {

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// x - x is 0 for finite x and NaN otherwise; four lanes keep the loop vectorizable.
template <typename T>
bool all_finite(const std::vector<T>& data) {
  T acc[4] = {0, 0, 0, 0};
  const std::size_t n = data.size(), body = n - n % 4;
  for (std::size_t i = 0; i < body; i += 4)
    for (std::size_t j = 0; j < 4; ++j) acc[j] += data[i + j] - data[i + j];
  T tail = 0;
  for (std::size_t i = body; i < n; ++i) tail += data[i] - data[i];
  return acc[0] + acc[1] + acc[2] + acc[3] + tail == T(0);
}

template <typename T>
NodePtr<T> make_node(Shape shape, std::vector<T> data, const char* op) {
  if (!all_finite(data)) throw NumericError(std::string(op) + ": non-finite value in output");
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

// The active tape when at least one input needs a gradient, else nullptr.
template <typename T>
GradTape<T>* recording(std::initializer_list<const BasicTensor<T>*> inputs) {
  auto* tape = GradTape<T>::active();
  if (!tape) return nullptr;
  for (auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

// Plain loops beat the BLAS call overhead for tiny products.
constexpr std::size_t kSmallGemm = 16384;

template <typename T>
void small_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
                const T* b, T beta, T* c) {
  if (beta == T(0)) {
    std::fill(c, c + m * n, T(0));
  } else if (beta != T(1)) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] *= beta;
  }
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T x = a[i * k + p];
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += x * b[p * n + j];
      }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
        c[i * n + j] += acc;
      }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        const T x = a[p * m + i];
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += x * b[p * n + j];
      }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
  }
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const float* a,
          const float* b, float beta, float* c) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0f) std::fill(c, c + m * n, 0.0f);
    return;
  }
  if (m * n * k <= kSmallGemm) {
    small_gemm(ta, tb, m, n, k, a, b, beta, c);
    return;
  }
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0f, a,
              static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), beta, c,
              static_cast<int>(n));
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double beta, double* c) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0) std::fill(c, c + m * n, 0.0);
    return;
  }
  if (m * n * k <= kSmallGemm) {
    small_gemm(ta, tb, m, n, k, a, b, beta, c);
    return;
  }
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
              static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), beta, c,
              static_cast<int>(n));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// ---------------------------------------------------------------- matmul

template <typename T>
BasicTensor<T> matmul_impl(const BasicTensor<T>& a, const BasicTensor<T>& b, bool tb) {
  const char* op = tb ? "matmul_transposed" : "matmul";
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError(std::string(op) + ": operands need rank >= 2, got " +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t kb = tb ? b.dim(-1) : b.dim(-2);
  const std::size_t n = tb ? b.dim(-2) : b.dim(-1);
  if (k != kb) {
    throw ShapeError(std::string(op) + ": inner extents differ for shapes " +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  }

  const std::size_t ra = a.rank() - 2, rb = b.rank() - 2;
  const std::size_t rl = std::max(ra, rb);
  Shape lead(rl), lead_a(rl, 1), lead_b(rl, 1);
  for (std::size_t i = 0; i < ra; ++i) lead_a[rl - ra + i] = a.shape()[i];
  for (std::size_t i = 0; i < rb; ++i) lead_b[rl - rb + i] = b.shape()[i];
  for (std::size_t i = 0; i < rl; ++i) {
    if (lead_a[i] != lead_b[i] && lead_a[i] != 1 && lead_b[i] != 1) {
      throw ShapeError(std::string(op) + ": batch extents not broadcast-compatible for shapes " +
                       to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    lead[i] = std::max(lead_a[i], lead_b[i]);
  }
  const std::size_t batches = numel(lead);
  const std::size_t batch_b = numel(lead_b);

  // Offsets of each output batch into a and b.
  std::vector<std::size_t> off_a(batches), off_b(batches);
  {
    auto st_a = strides_of(lead_a), st_b = strides_of(lead_b);
    std::vector<std::size_t> idx(rl, 0);
    for (std::size_t flat = 0; flat < batches; ++flat) {
      std::size_t oa = 0, ob = 0;
      for (std::size_t i = 0; i < rl; ++i) {
        if (lead_a[i] != 1) oa += idx[i] * st_a[i];
        if (lead_b[i] != 1) ob += idx[i] * st_b[i];
      }
      off_a[flat] = oa * m * k;
      off_b[flat] = ob * k * n;
      for (std::size_t i = rl; i-- > 0;) {
        if (++idx[i] < lead[i]) break;
        idx[i] = 0;
      }
    }
  }

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(batches * m * n);

  // A single shared right operand lets the whole left operand be one GEMM.
  const bool flat_a = batch_b == 1 && numel(lead_a) == batches;
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (flat_a) {
    gemm(false, tb, batches * m, n, k, pa, pb, T(0), out.data());
  } else {
    for (std::size_t i = 0; i < batches; ++i) {
      gemm(false, tb, m, n, k, pa + off_a[i], pb + off_b[i], T(0), out.data() + i * m * n);
    }
  }

  auto node = make_node<T>(std::move(out_shape), std::move(out), op);
  if (auto* tape = recording<T>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    tape->record(node, {an, bn},
                 [an, bn, m, n, k, tb, batches, flat_a, off_a = std::move(off_a),
                  off_b = std::move(off_b)](std::span<const T> g, GradSink<T>& sink) {
                   const T* pa = an->data.data();
                   const T* pb = bn->data.data();
                   if (T* ga = sink(0)) {
                     // dA = dC * op(B)^T
                     if (flat_a) {
                       gemm(false, !tb, batches * m, k, n, g.data(), pb, T(1), ga);
                     } else {
                       for (std::size_t i = 0; i < batches; ++i) {
                         gemm(false, !tb, m, k, n, g.data() + i * m * n, pb + off_b[i], T(1),
                              ga + off_a[i]);
                       }
                     }
                   }
                   if (T* gb = sink(1)) {
                     if (flat_a) {
                       if (tb) {
                         gemm(true, false, n, k, batches * m, g.data(), pa, T(1), gb);
                       } else {
                         gemm(true, false, k, n, batches * m, pa, g.data(), T(1), gb);
                       }
                     } else {
                       for (std::size_t i = 0; i < batches; ++i) {
                         if (tb) {
                           gemm(true, false, n, k, m, g.data() + i * m * n, pa + off_a[i], T(1),
                                gb + off_b[i]);
                         } else {
                           gemm(true, false, k, n, m, pa + off_a[i], g.data() + i * m * n, T(1),
                                gb + off_b[i]);
                         }
                       }
                     }
                   }
                 });
  }
  return BasicTensor<T>(node);
}

// ----------------------------------------------------------- elementwise

enum class Binary { add, sub, mul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, Binary kind) {
  const char* op = kind == Binary::add ? "add" : kind == Binary::sub ? "sub" : "mul";
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  if (ok) {
    for (std::size_t i = 0; i < sb.size(); ++i) {
      if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) ok = false;
    }
  }
  if (!ok) {
    throw ShapeError(std::string(op) + ": right operand shape " + to_string(sb) +
                     " is not a suffix of " + to_string(sa));
  }
  const std::size_t nb = b.numel();
  const std::size_t na = a.numel();
  const std::size_t blocks = nb ? na / nb : 0;
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  std::vector<T> out(na);
  for (std::size_t o = 0; o < blocks; ++o) {
    const T* x = pa + o * nb;
    T* z = out.data() + o * nb;
    switch (kind) {
      case Binary::add:
        for (std::size_t j = 0; j < nb; ++j) z[j] = x[j] + pb[j];
        break;
      case Binary::sub:
        for (std::size_t j = 0; j < nb; ++j) z[j] = x[j] - pb[j];
        break;
      case Binary::mul:
        for (std::size_t j = 0; j < nb; ++j) z[j] = x[j] * pb[j];
        break;
    }
  }
  auto node = make_node<T>(sa, std::move(out), op);
  if (auto* tape = recording<T>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    tape->record(node, {an, bn}, [an, bn, kind, blocks, nb](std::span<const T> g, GradSink<T>& sink) {
      const T* y = bn->data.data();
      const T* x = an->data.data();
      if (T* ga = sink(0)) {
        for (std::size_t o = 0; o < blocks; ++o) {
          const T* go = g.data() + o * nb;
          T* gao = ga + o * nb;
          if (kind == Binary::mul) {
            for (std::size_t j = 0; j < nb; ++j) gao[j] += go[j] * y[j];
          } else {
            for (std::size_t j = 0; j < nb; ++j) gao[j] += go[j];
          }
        }
      }
      if (T* gb = sink(1)) {
        for (std::size_t o = 0; o < blocks; ++o) {
          const T* go = g.data() + o * nb;
          const T* xo = x + o * nb;
          switch (kind) {
            case Binary::add:
              for (std::size_t j = 0; j < nb; ++j) gb[j] += go[j];
              break;
            case Binary::sub:
              for (std::size_t j = 0; j < nb; ++j) gb[j] -= go[j];
              break;
            case Binary::mul:
              for (std::size_t j = 0; j < nb; ++j) gb[j] += go[j] * xo[j];
              break;
          }
        }
      }
    });
  }
  return BasicTensor<T>(node);
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul_impl(a, b, false);
}

template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul_impl(a, b, true);
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::add);
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::sub);
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, Binary::mul);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto node = make_node<T>(a.shape(), std::move(out), "scale");
  if (auto* tape = recording<T>({&a})) {
    tape->record(node, {a.node()}, [factor](std::span<const T> g, GradSink<T>& sink) {
      if (T* ga = sink(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
      }
    });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto node = make_node<T>(x.shape(), std::move(out), "relu");
  if (auto* tape = recording<T>({&x})) {
    auto xn = x.node();
    tape->record(node, {xn}, [xn](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xn->data[i] > T(0)) gx[i] += g[i];
        }
      }
    });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  if (s.n == 0) throw ShapeError("softmax: empty axis in shape " + to_string(x.shape()));
  const T* px = x.data().data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = px[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, px[base + j * s.inner]);
      T total = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const T e = std::exp(px[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out), "softmax");
  if (auto* tape = recording<T>({&x})) {
    std::weak_ptr<Node<T>> weak = node;
    tape->record(node, {x.node()}, [weak, s](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink(0);
      if (!gx) return;
      auto yn = weak.lock();
      const T* y = yn->data.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.n * s.inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < s.n; ++j) {
            dot += g[base + j * s.inner] * y[base + j * s.inner];
          }
          for (std::size_t j = 0; j < s.n; ++j) {
            const std::size_t p = base + j * s.inner;
            gx[p] += y[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t e = x.dim(-1);
  if (e == 0) throw ShapeError("layer_norm: zero-width last axis");
  if (gain.shape() != Shape{e} || bias.shape() != Shape{e}) {
    throw ShapeError("layer_norm: gain/bias shapes " + to_string(gain.shape()) + ", " +
                     to_string(bias.shape()) + " do not match width " + std::to_string(e));
  }
  const std::size_t rows = x.numel() / e;
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * e;
    double mean = 0;
    for (std::size_t i = 0; i < e; ++i) mean += row[i];
    mean /= static_cast<double>(e);
    double var = 0;
    for (std::size_t i = 0; i < e; ++i) {
      const double d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(e);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = static_cast<T>(inv);
    for (std::size_t i = 0; i < e; ++i) {
      const T h = static_cast<T>((row[i] - mean) * inv);
      xhat[r * e + i] = h;
      out[r * e + i] = h * pg[i] + pb[i];
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out), "layer_norm");
  if (auto* tape = recording<T>({&x, &gain, &bias})) {
    auto gn = gain.node();
    tape->record(node, {x.node(), gn, bias.node()},
                 [gn, e, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                     std::span<const T> g, GradSink<T>& sink) {
                   const T* pg = gn->data.data();
                   if (T* gx = sink(0)) {
                     for (std::size_t r = 0; r < rows; ++r) {
                       double m1 = 0, m2 = 0;
                       for (std::size_t i = 0; i < e; ++i) {
                         const double gh = g[r * e + i] * pg[i];
                         m1 += gh;
                         m2 += gh * xhat[r * e + i];
                       }
                       m1 /= static_cast<double>(e);
                       m2 /= static_cast<double>(e);
                       for (std::size_t i = 0; i < e; ++i) {
                         const double gh = g[r * e + i] * pg[i];
                         gx[r * e + i] +=
                             static_cast<T>(rstd[r] * (gh - m1 - xhat[r * e + i] * m2));
                       }
                     }
                   }
                   if (T* gg = sink(1)) {
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t i = 0; i < e; ++i) gg[i] += g[r * e + i] * xhat[r * e + i];
                     }
                   }
                   if (T* gb = sink(2)) {
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t i = 0; i < e; ++i) gb[i] += g[r * e + i];
                     }
                   }
                 });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto node = make_node<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()),
                           "reshape");
  if (auto* tape = recording<T>({&x})) {
    tape->record(node, {x.node()}, [](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
    });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, std::vector<std::size_t> axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axis list does not match rank");
  {
    std::vector<bool> seen(r, false);
    for (auto a : axes) {
      if (a >= r || seen[a]) throw ShapeError("permute: invalid axis permutation");
      seen[a] = true;
    }
  }
  // Trailing axes left in place move as contiguous blocks.
  std::size_t keep = r;
  while (keep > 0 && axes[keep - 1] == keep - 1) --keep;
  std::size_t block = 1;
  for (std::size_t i = keep; i < r; ++i) block *= x.shape()[i];
  const auto in_strides = strides_of(x.shape());
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(keep);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[axes[i]];
  for (std::size_t i = 0; i < keep; ++i) src_stride[i] = in_strides[axes[i]];
  const std::size_t total = x.numel();
  const std::size_t n_blocks = block ? total / block : 0;
  // Gather map: output block -> input offset.
  std::vector<std::size_t> gather(n_blocks);
  {
    std::vector<std::size_t> idx(keep, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < n_blocks; ++flat) {
      gather[flat] = src;
      for (std::size_t i = keep; i-- > 0;) {
        ++idx[i];
        src += src_stride[i];
        if (idx[i] < out_shape[i]) break;
        src -= idx[i] * src_stride[i];
        idx[i] = 0;
      }
    }
  }
  const T* px = x.data().data();
  std::vector<T> out(total);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    std::copy(px + gather[b], px + gather[b] + block, out.data() + b * block);
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out), "permute");
  if (auto* tape = recording<T>({&x})) {
    tape->record(node, {x.node()},
                 [gather = std::move(gather), block](std::span<const T> g, GradSink<T>& sink) {
                   if (T* gx = sink(0)) {
                     for (std::size_t b = 0; b < gather.size(); ++b) {
                       const T* src = g.data() + b * block;
                       T* dst = gx + gather[b];
                       for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                     }
                   }
                 });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> expand(const BasicTensor<T>& x, Shape shape) {
  const std::size_t r = x.rank();
  bool ok = shape.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = x.shape()[i] == shape[i] || x.shape()[i] == 1;
  }
  if (!ok) throw ShapeError("expand: cannot expand " + to_string(x.shape()) + " to " + to_string(shape));
  // Trailing axes that are not broadcast move as contiguous blocks.
  std::size_t keep = r;
  while (keep > 0 && x.shape()[keep - 1] == shape[keep - 1]) --keep;
  std::size_t block = 1;
  for (std::size_t i = keep; i < r; ++i) block *= shape[i];
  const auto in_strides = strides_of(x.shape());
  const std::size_t total = numel(shape);
  const std::size_t n_blocks = block ? total / block : 0;
  std::vector<std::size_t> gather(n_blocks);
  {
    std::vector<std::size_t> idx(keep, 0);
    for (std::size_t flat = 0; flat < n_blocks; ++flat) {
      std::size_t src = 0;
      for (std::size_t i = 0; i < keep; ++i) {
        if (x.shape()[i] != 1) src += idx[i] * in_strides[i];
      }
      gather[flat] = src;
      for (std::size_t i = keep; i-- > 0;) {
        if (++idx[i] < shape[i]) break;
        idx[i] = 0;
      }
    }
  }
  const T* px = x.data().data();
  std::vector<T> out(total);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    std::copy(px + gather[b], px + gather[b] + block, out.data() + b * block);
  }
  auto node = make_node<T>(std::move(shape), std::move(out), "expand");
  if (auto* tape = recording<T>({&x})) {
    tape->record(node, {x.node()},
                 [gather = std::move(gather), block](std::span<const T> g, GradSink<T>& sink) {
                   if (T* gx = sink(0)) {
                     for (std::size_t b = 0; b < gather.size(); ++b) {
                       const T* src = g.data() + b * block;
                       T* dst = gx + gather[b];
                       for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                     }
                   }
                 });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t r = parts[0].rank();
  const std::size_t ax = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    bool ok = p.rank() == r;
    for (std::size_t i = 0; ok && i < r; ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + to_string(parts[0].shape()) + " and " +
                       to_string(p.shape()));
    }
    out_shape[ax] += p.shape()[ax];
  }
  const auto s = split_at(out_shape, ax);
  std::vector<T> out(numel(out_shape));
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * s.inner;
    const T* src = p.data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(src + o * w, src + (o + 1) * w, out.begin() + o * s.n * s.inner + col);
    }
    widths.push_back(w);
    col += w;
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out), "concat");
  auto* tape = GradTape<T>::active();
  const bool any = std::any_of(parts.begin(), parts.end(),
                               [](const BasicTensor<T>& p) { return p.requires_grad(); });
  if (tape && any) {
    std::vector<NodePtr<T>> inputs;
    for (const auto& p : parts) inputs.push_back(p.node());
    tape->record(node, std::move(inputs),
                 [s, widths = std::move(widths)](std::span<const T> g, GradSink<T>& sink) {
                   std::size_t col = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     const std::size_t w = widths[k];
                     if (T* gp = sink(k)) {
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         const T* src = g.data() + o * s.n * s.inner + col;
                         for (std::size_t i = 0; i < w; ++i) gp[o * w + i] += src[i];
                       }
                     }
                     col += w;
                   }
                 });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (start + length > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis extent of " +
                     to_string(x.shape()));
  }
  const auto s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const std::size_t w = length * s.inner;
  const std::size_t off = start * s.inner;
  std::vector<T> out(s.outer * w);
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy(px + o * s.n * s.inner + off, px + o * s.n * s.inner + off + w, out.begin() + o * w);
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out), "slice");
  if (auto* tape = recording<T>({&x})) {
    tape->record(node, {x.node()}, [s, w, off](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink(0)) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < w; ++i) gx[o * s.n * s.inner + off + i] += g[o * w + i];
        }
      }
    });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, e], got " + to_string(table.shape()));
  const std::size_t vocab = table.dim(0), e = table.dim(1);
  std::vector<T> out(ids.size() * e);
  const T* pt = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ConfigError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                        std::to_string(vocab));
    }
    std::copy(pt + ids[i] * e, pt + (ids[i] + 1) * e, out.begin() + i * e);
  }
  auto node = make_node<T>(Shape{ids.size(), e}, std::move(out), "embedding");
  if (auto* tape = recording<T>({&table})) {
    tape->record(node, {table.node()},
                 [ids = std::vector<int>(ids.begin(), ids.end()), e](std::span<const T> g,
                                                                     GradSink<T>& sink) {
                   if (T* gt = sink(0)) {
                     for (std::size_t i = 0; i < ids.size(); ++i) {
                       for (std::size_t j = 0; j < e; ++j) gt[ids[i] * e + j] += g[i * e + j];
                     }
                   }
                 });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = std::accumulate(x.data().begin(), x.data().end(), T(0));
  auto node = make_node<T>(Shape{}, std::vector<T>{total}, "sum");
  if (auto* tape = recording<T>({&x})) {
    tape->record(node, {x.node()}, [n = x.numel()](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink(0)) {
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
      }
    });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> sum_axis(const BasicTensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<T> out(s.outer * s.inner, T(0));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.n; ++j) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += px[(o * s.n + j) * s.inner + in];
      }
    }
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out), "sum_axis");
  if (auto* tape = recording<T>({&x})) {
    tape->record(node, {x.node()}, [s](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink(0)) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t j = 0; j < s.n; ++j) {
            for (std::size_t in = 0; in < s.inner; ++in) {
              gx[(o * s.n + j) * s.inner + in] += g[o * s.inner + in];
            }
          }
        }
      }
    });
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> gold,
                             std::span<const std::uint8_t> counted, double label_smoothing,
                             LossReduction reduction) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be [n, V], got " + to_string(logits.shape()));
  }
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (gold.size() != n || (!counted.empty() && counted.size() != n)) {
    throw ShapeError("cross_entropy: " + std::to_string(gold.size()) + " gold ids for " +
                     std::to_string(n) + " logit rows");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("cross_entropy: label smoothing must lie in [0, 1)");
  }
  const T* pl = logits.data().data();
  std::vector<T> probs(n * vocab, T(0));
  std::size_t count = 0;
  double total = 0;
  const double on = 1.0 - label_smoothing;
  const double spread = label_smoothing / static_cast<double>(vocab);
  for (std::size_t i = 0; i < n; ++i) {
    if (!counted.empty() && !counted[i]) continue;
    if (gold[i] < 0 || static_cast<std::size_t>(gold[i]) >= vocab) {
      throw ConfigError("cross_entropy: gold id " + std::to_string(gold[i]) +
                        " outside vocabulary of size " + std::to_string(vocab));
    }
    ++count;
    const T* row = pl + i * vocab;
    double mx = row[0];
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max<double>(mx, row[v]);
    double z = 0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
    const double logz = mx + std::log(z);
    double loss = on * (logz - row[gold[i]]);
    if (label_smoothing > 0) {
      for (std::size_t v = 0; v < vocab; ++v) loss += spread * (logz - row[v]);
    }
    total += loss;
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[i * vocab + v] = static_cast<T>(std::exp(row[v] - logz));
    }
  }
  if (count == 0) throw ConfigError("cross_entropy: every position is padding");
  const double norm = reduction == LossReduction::mean ? 1.0 / static_cast<double>(count) : 1.0;
  auto node = make_node<T>(Shape{}, std::vector<T>{static_cast<T>(total * norm)}, "cross_entropy");
  if (auto* tape = recording<T>({&logits})) {
    tape->record(node, {logits.node()},
                 [probs = std::move(probs), gold = std::vector<int>(gold.begin(), gold.end()),
                  counted = std::vector<std::uint8_t>(counted.begin(), counted.end()), n, vocab, on,
                  spread, norm](std::span<const T> g, GradSink<T>& sink) {
                   T* gl = sink(0);
                   if (!gl) return;
                   const double scale = g[0] * norm;
                   for (std::size_t i = 0; i < n; ++i) {
                     if (!counted.empty() && !counted[i]) continue;
                     for (std::size_t v = 0; v < vocab; ++v) {
                       double target = spread;
                       if (static_cast<int>(v) == gold[i]) target += on;
                       gl[i * vocab + v] += static_cast<T>(scale * (probs[i * vocab + v] - target));
                     }
                   }
                 });
  }
  return BasicTensor<T>(node);
}

#define REFORMER_INSTANTIATE_OPS(T)                                                            \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> matmul_transposed(const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                     \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                         \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                 \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                     const BasicTensor<T>&);                                   \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                               \
  template BasicTensor<T> permute(const BasicTensor<T>&, std::vector<std::size_t>);            \
  template BasicTensor<T> expand(const BasicTensor<T>&, Shape);                                \
  template BasicTensor<T> concat(std::span<const BasicTensor<T>>, int);                        \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, std::size_t, std::size_t);         \
  template BasicTensor<T> embedding(const BasicTensor<T>&, std::span<const int>);              \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                          \
  template BasicTensor<T> sum_axis(const BasicTensor<T>&, int);                                \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>,           \
                                        std::span<const std::uint8_t>, double, LossReduction);

REFORMER_INSTANTIATE_OPS(float)
REFORMER_INSTANTIATE_OPS(double)

#undef REFORMER_INSTANTIATE_OPS

}  // namespace reformer::ops
