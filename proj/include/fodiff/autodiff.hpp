#pragma once

// Minimal tape-based reverse-mode differentiation over channel-major 3D
// feature maps ([C][Z][Y][X]; vectors are C x 1 x 1 x 1).
//
// Every op appends a node holding its value and, when recording, a closure
// that pushes the node's gradient into its inputs. Parameters enter the tape
// as leaf nodes tagged with a slot index; Tape::backward adds their gradient
// into the caller's per-slot buffers.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fodiff/error.hpp"

namespace fodiff::ad {

struct Shape {
  int c = 1;
  int z = 1;
  int y = 1;
  int x = 1;

  std::size_t spatial() const noexcept {
    return static_cast<std::size_t>(z) * static_cast<std::size_t>(y) * static_cast<std::size_t>(x);
  }
  std::size_t size() const noexcept { return static_cast<std::size_t>(c) * spatial(); }
  bool same_spatial(const Shape& o) const noexcept { return z == o.z && y == o.y && x == o.x; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

template <class T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;

  std::size_t size() const noexcept { return value.size(); }
};

/// One gradient buffer per parameter slot.
template <class T>
using GradientSet = std::vector<std::vector<T>>;

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  int slot = -1;
  std::function<void()> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {
template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void check(bool ok, const char* what) {
  if (!ok) fodiff::detail::fail(ErrorKind::Contract, what);
}
}  // namespace detail

template <class T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Node<T>& node(Var<T> v) { return *nodes_[v.id]; }
  const Node<T>& node(Var<T> v) const { return *nodes_[v.id]; }
  const std::vector<T>& value(Var<T> v) const { return nodes_[v.id]->value; }
  const Shape& shape(Var<T> v) const { return nodes_[v.id]->shape; }

  Var<T> constant(Shape shape, std::vector<T> values) {
    detail::check(values.size() == shape.size(), "constant: value count does not match shape");
    auto& n = push(shape);
    n.value = std::move(values);
    return last();
  }

  Var<T> param(const Parameter<T>& p, int slot) {
    auto& n = push({static_cast<int>(p.size()), 1, 1, 1});
    n.value = p.value;
    n.requires_grad = record_;
    n.slot = slot;
    return last();
  }

  /// Runs the reverse sweep seeded with d(objective)/d(out) = seed and adds
  /// each parameter node's gradient into grads[slot].
  void backward(Var<T> out, std::span<const T> seed, GradientSet<T>& grads) {
    if (!record_) fodiff::detail::fail(ErrorKind::Usage, "backward on a tape that did not record");
    auto& o = node(out);
    detail::check(seed.size() == o.value.size(), "backward: seed has wrong length");
    auto& g = o.ensure_grad();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = *nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward();
      if (n.slot >= 0) {
        detail::check(static_cast<std::size_t>(n.slot) < grads.size(), "backward: gradient slot out of range");
        auto& dst = grads[static_cast<std::size_t>(n.slot)];
        if (dst.size() != n.grad.size()) dst.assign(n.grad.size(), T(0));
        for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

  // ---- ops -------------------------------------------------------------

  /// Stride-1 convolution with zero "same" padding; kernel edge k is odd.
  /// w: [cout][cin][k][k][k], b: [cout].
  Var<T> conv3d(Var<T> xv, Var<T> wv, Var<T> bv, int cout, int k) {
    const Shape xs = shape(xv);
    const int cin = xs.c;
    const std::size_t kk = static_cast<std::size_t>(k) * k * k;
    const std::size_t rows = static_cast<std::size_t>(cin) * kk;
    detail::check(k % 2 == 1, "conv3d: kernel edge must be odd");
    detail::check(value(wv).size() == static_cast<std::size_t>(cout) * rows, "conv3d: weight size mismatch");
    detail::check(value(bv).size() == static_cast<std::size_t>(cout), "conv3d: bias size mismatch");
    const std::size_t P = xs.spatial();

    auto col = std::make_shared<std::vector<T>>();
    const T* colp = nullptr;
    if (k == 1) {
      colp = value(xv).data();
    } else {
      im2col(value(xv), xs, k, *col);
      colp = col->data();
    }
    Shape os{cout, xs.z, xs.y, xs.x};
    std::vector<T> out(os.size());
    {
      detail::MapR<T> O(out.data(), cout, P);
      detail::CMapR<T> W(value(wv).data(), cout, rows);
      detail::CMapR<T> C(colp, rows, P);
      O.noalias() = W * C;
      const auto& b = value(bv);
      for (int co = 0; co < cout; ++co) O.row(co).array() += b[co];
    }
    auto& n = push(os);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv, wv, bv}, [this, self, xv, wv, bv, col, xs, cout, k, rows, P] {
      const auto& g = node(self).grad;
      detail::CMapR<T> G(g.data(), cout, P);
      const T* cp = k == 1 ? value(xv).data() : col->data();
      detail::CMapR<T> C(cp, rows, P);
      if (node(wv).requires_grad) {
        detail::MapR<T> dW(node(wv).ensure_grad().data(), cout, rows);
        dW.noalias() += G * C.transpose();
      }
      if (node(bv).requires_grad) {
        auto& db = node(bv).ensure_grad();
        for (int co = 0; co < cout; ++co) db[co] += G.row(co).sum();
      }
      if (node(xv).requires_grad) {
        detail::CMapR<T> W(value(wv).data(), cout, rows);
        if (k == 1) {
          detail::MapR<T> dX(node(xv).ensure_grad().data(), rows, P);
          dX.noalias() += W.transpose() * G;
        } else {
          std::vector<T> dcol(rows * P);
          detail::MapR<T> dC(dcol.data(), rows, P);
          dC.noalias() = W.transpose() * G;
          col2im(dcol, xs, k, node(xv).ensure_grad());
        }
      }
    });
    return self;
  }

  Var<T> group_norm(Var<T> xv, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
    const Shape xs = shape(xv);
    detail::check(groups >= 1 && xs.c % groups == 0, "group_norm: channels not divisible by groups");
    detail::check(value(gamma).size() == static_cast<std::size_t>(xs.c) &&
                      value(beta).size() == static_cast<std::size_t>(xs.c),
                  "group_norm: affine size mismatch");
    const std::size_t P = xs.spatial();
    const int cg = xs.c / groups;
    const std::size_t count = static_cast<std::size_t>(cg) * P;
    auto xhat = std::make_shared<std::vector<T>>(xs.size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups));
    std::vector<T> out(xs.size());
    const auto& x = value(xv);
    const auto& ga = value(gamma);
    const auto& be = value(beta);
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = static_cast<std::size_t>(g) * count;
      double mean = 0.0;
      for (std::size_t i = 0; i < count; ++i) mean += x[off + i];
      mean /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double d = x[off + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(count);
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      (*inv_std)[g] = is;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t idx = off + i;
        const int c = static_cast<int>(idx / P);
        (*xhat)[idx] = (x[idx] - static_cast<T>(mean)) * is;
        out[idx] = ga[c] * (*xhat)[idx] + be[c];
      }
    }
    auto& n = push(xs);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv, gamma, beta}, [this, self, xv, gamma, beta, xhat, inv_std, groups, cg, P, count] {
      const auto& g = node(self).grad;
      const auto& ga = value(gamma);
      const bool need_x = node(xv).requires_grad;
      const bool need_gamma = node(gamma).requires_grad;
      const bool need_beta = node(beta).requires_grad;
      for (int gr = 0; gr < groups; ++gr) {
        const std::size_t off = static_cast<std::size_t>(gr) * count;
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int cc = 0; cc < cg; ++cc) {
          const int c = gr * cg + cc;
          double sg = 0.0, sgx = 0.0;
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * P + p;
            sg += g[idx];
            sgx += g[idx] * (*xhat)[idx];
          }
          if (need_gamma) node(gamma).ensure_grad()[c] += static_cast<T>(sgx);
          if (need_beta) node(beta).ensure_grad()[c] += static_cast<T>(sg);
          sum_dxh += sg * ga[c];
          sum_dxh_xh += sgx * ga[c];
        }
        if (!need_x) continue;
        auto& dx = node(xv).ensure_grad();
        const double n_inv = 1.0 / static_cast<double>(count);
        const double is = (*inv_std)[gr];
        for (int cc = 0; cc < cg; ++cc) {
          const int c = gr * cg + cc;
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * P + p;
            const double dxh = static_cast<double>(g[idx]) * ga[c];
            dx[idx] += static_cast<T>(is * (dxh - n_inv * sum_dxh - (*xhat)[idx] * n_inv * sum_dxh_xh));
          }
        }
      }
    });
    return self;
  }

  Var<T> silu(Var<T> xv) {
    return unary(xv, [](T x) { return x / (T(1) + std::exp(-x)); },
                 [](T x, T) {
                   const T s = T(1) / (T(1) + std::exp(-x));
                   return s * (T(1) + x * (T(1) - s));
                 });
  }

  Var<T> relu(Var<T> xv) {
    return unary(xv, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
  }

  Var<T> sigmoid(Var<T> xv) {
    return unary(xv, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
  }

  Var<T> add(Var<T> av, Var<T> bv) {
    detail::check(shape(av) == shape(bv), "add: shapes differ");
    std::vector<T> out(value(av));
    const auto& b = value(bv);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    auto& n = push(shape(av));
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {av, bv}, [this, self, av, bv] {
      const auto& g = node(self).grad;
      for (Var<T> in : {av, bv}) {
        if (!node(in).requires_grad) continue;
        auto& d = node(in).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
    return self;
  }

  /// y[c, p] = x[c, p] + v[c]
  Var<T> add_channel(Var<T> xv, Var<T> vv) {
    const Shape xs = shape(xv);
    detail::check(value(vv).size() == static_cast<std::size_t>(xs.c), "add_channel: vector size mismatch");
    const std::size_t P = xs.spatial();
    std::vector<T> out(value(xv));
    const auto& v = value(vv);
    for (int c = 0; c < xs.c; ++c)
      for (std::size_t p = 0; p < P; ++p) out[c * P + p] += v[c];
    auto& n = push(xs);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv, vv}, [this, self, xv, vv, xs, P] {
      const auto& g = node(self).grad;
      if (node(xv).requires_grad) {
        auto& d = node(xv).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (node(vv).requires_grad) {
        auto& d = node(vv).ensure_grad();
        for (int c = 0; c < xs.c; ++c) {
          T s = T(0);
          for (std::size_t p = 0; p < P; ++p) s += g[c * P + p];
          d[c] += s;
        }
      }
    });
    return self;
  }

  /// y[c, p] = x[c, p] * w[c]
  Var<T> mul_channel(Var<T> xv, Var<T> wv) {
    const Shape xs = shape(xv);
    detail::check(value(wv).size() == static_cast<std::size_t>(xs.c), "mul_channel: vector size mismatch");
    const std::size_t P = xs.spatial();
    std::vector<T> out(xs.size());
    const auto& x = value(xv);
    const auto& w = value(wv);
    for (int c = 0; c < xs.c; ++c)
      for (std::size_t p = 0; p < P; ++p) out[c * P + p] = x[c * P + p] * w[c];
    auto& n = push(xs);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv, wv}, [this, self, xv, wv, xs, P] {
      const auto& g = node(self).grad;
      const auto& x = value(xv);
      const auto& w = value(wv);
      if (node(xv).requires_grad) {
        auto& d = node(xv).ensure_grad();
        for (int c = 0; c < xs.c; ++c)
          for (std::size_t p = 0; p < P; ++p) d[c * P + p] += g[c * P + p] * w[c];
      }
      if (node(wv).requires_grad) {
        auto& d = node(wv).ensure_grad();
        for (int c = 0; c < xs.c; ++c) {
          T s = T(0);
          for (std::size_t p = 0; p < P; ++p) s += g[c * P + p] * x[c * P + p];
          d[c] += s;
        }
      }
    });
    return self;
  }

  /// y = W v + b with W: [m][n].
  Var<T> linear(Var<T> vv, Var<T> wv, Var<T> bv, int m) {
    const std::size_t nin = value(vv).size();
    detail::check(value(wv).size() == static_cast<std::size_t>(m) * nin, "linear: weight size mismatch");
    detail::check(value(bv).size() == static_cast<std::size_t>(m), "linear: bias size mismatch");
    std::vector<T> out(static_cast<std::size_t>(m));
    const auto& v = value(vv);
    const auto& w = value(wv);
    const auto& b = value(bv);
    for (int i = 0; i < m; ++i) {
      T s = b[i];
      for (std::size_t j = 0; j < nin; ++j) s += w[i * nin + j] * v[j];
      out[i] = s;
    }
    auto& n = push({m, 1, 1, 1});
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {vv, wv, bv}, [this, self, vv, wv, bv, m, nin] {
      const auto& g = node(self).grad;
      const auto& v = value(vv);
      const auto& w = value(wv);
      if (node(wv).requires_grad) {
        auto& d = node(wv).ensure_grad();
        for (int i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nin; ++j) d[i * nin + j] += g[i] * v[j];
      }
      if (node(bv).requires_grad) {
        auto& d = node(bv).ensure_grad();
        for (int i = 0; i < m; ++i) d[i] += g[i];
      }
      if (node(vv).requires_grad) {
        auto& d = node(vv).ensure_grad();
        for (int i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nin; ++j) d[j] += g[i] * w[i * nin + j];
      }
    });
    return self;
  }

  /// Channel concatenation of maps sharing a spatial grid.
  Var<T> concat(std::initializer_list<Var<T>> parts) {
    std::vector<Var<T>> ins(parts);
    detail::check(!ins.empty(), "concat: no inputs");
    Shape os = shape(ins.front());
    os.c = 0;
    for (auto in : ins) {
      detail::check(shape(in).same_spatial(shape(ins.front())), "concat: spatial dims differ");
      os.c += shape(in).c;
    }
    std::vector<T> out;
    out.reserve(os.size());
    for (auto in : ins) out.insert(out.end(), value(in).begin(), value(in).end());
    auto& n = push(os);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, ins, [this, self, ins] {
      const auto& g = node(self).grad;
      std::size_t off = 0;
      for (auto in : ins) {
        const std::size_t len = value(in).size();
        if (node(in).requires_grad) {
          auto& d = node(in).ensure_grad();
          for (std::size_t i = 0; i < len; ++i) d[i] += g[off + i];
        }
        off += len;
      }
    });
    return self;
  }

  /// 2x average pooling per spatial axis; extents must be even.
  Var<T> avg_pool2(Var<T> xv) {
    const Shape xs = shape(xv);
    detail::check(xs.z % 2 == 0 && xs.y % 2 == 0 && xs.x % 2 == 0, "avg_pool2: odd spatial extent");
    return adaptive_avg_pool(xv, {xs.c, xs.z / 2, xs.y / 2, xs.x / 2});
  }

  /// Nearest-neighbour 2x upsampling.
  Var<T> upsample2(Var<T> xv) {
    const Shape xs = shape(xv);
    const Shape os{xs.c, xs.z * 2, xs.y * 2, xs.x * 2};
    std::vector<T> out(os.size());
    const auto& x = value(xv);
    for (int c = 0; c < os.c; ++c)
      for (int z = 0; z < os.z; ++z)
        for (int y = 0; y < os.y; ++y)
          for (int xx = 0; xx < os.x; ++xx)
            out[flat(os, c, z, y, xx)] = x[flat(xs, c, z / 2, y / 2, xx / 2)];
    auto& n = push(os);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv}, [this, self, xv, xs, os] {
      const auto& g = node(self).grad;
      auto& d = node(xv).ensure_grad();
      for (int c = 0; c < os.c; ++c)
        for (int z = 0; z < os.z; ++z)
          for (int y = 0; y < os.y; ++y)
            for (int xx = 0; xx < os.x; ++xx) d[flat(xs, c, z / 2, y / 2, xx / 2)] += g[flat(os, c, z, y, xx)];
    });
    return self;
  }

  /// Adaptive average pooling to `target` spatial dims (channel count kept).
  /// Output bin i along an axis averages input [floor(i*in/out), ceil((i+1)*in/out)).
  Var<T> adaptive_avg_pool(Var<T> xv, Shape target) {
    const Shape xs = shape(xv);
    const Shape os{xs.c, target.z, target.y, target.x};
    detail::check(os.z >= 1 && os.y >= 1 && os.x >= 1 && os.z <= xs.z && os.y <= xs.y && os.x <= xs.x,
                  "adaptive_avg_pool: bad target dims");
    auto lo = [](int i, int in, int out) { return (i * in) / out; };
    auto hi = [](int i, int in, int out) { return ((i + 1) * in + out - 1) / out; };
    std::vector<T> out(os.size(), T(0));
    const auto& x = value(xv);
    for (int c = 0; c < os.c; ++c)
      for (int z = 0; z < os.z; ++z)
        for (int y = 0; y < os.y; ++y)
          for (int xx = 0; xx < os.x; ++xx) {
            const int z0 = lo(z, xs.z, os.z), z1 = hi(z, xs.z, os.z);
            const int y0 = lo(y, xs.y, os.y), y1 = hi(y, xs.y, os.y);
            const int x0 = lo(xx, xs.x, os.x), x1 = hi(xx, xs.x, os.x);
            T s = T(0);
            for (int iz = z0; iz < z1; ++iz)
              for (int iy = y0; iy < y1; ++iy)
                for (int ix = x0; ix < x1; ++ix) s += x[flat(xs, c, iz, iy, ix)];
            out[flat(os, c, z, y, xx)] = s / static_cast<T>((z1 - z0) * (y1 - y0) * (x1 - x0));
          }
    auto& n = push(os);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv}, [this, self, xv, xs, os, lo, hi] {
      const auto& g = node(self).grad;
      auto& d = node(xv).ensure_grad();
      for (int c = 0; c < os.c; ++c)
        for (int z = 0; z < os.z; ++z)
          for (int y = 0; y < os.y; ++y)
            for (int xx = 0; xx < os.x; ++xx) {
              const int z0 = lo(z, xs.z, os.z), z1 = hi(z, xs.z, os.z);
              const int y0 = lo(y, xs.y, os.y), y1 = hi(y, xs.y, os.y);
              const int x0 = lo(xx, xs.x, os.x), x1 = hi(xx, xs.x, os.x);
              const T share = g[flat(os, c, z, y, xx)] / static_cast<T>((z1 - z0) * (y1 - y0) * (x1 - x0));
              for (int iz = z0; iz < z1; ++iz)
                for (int iy = y0; iy < y1; ++iy)
                  for (int ix = x0; ix < x1; ++ix) d[flat(xs, c, iz, iy, ix)] += share;
            }
    });
    return self;
  }

  Var<T> global_avg_pool(Var<T> xv) {
    const Shape xs = shape(xv);
    return adaptive_avg_pool(xv, {xs.c, 1, 1, 1});
  }

  Var<T> global_max_pool(Var<T> xv) {
    const Shape xs = shape(xv);
    const std::size_t P = xs.spatial();
    std::vector<T> out(static_cast<std::size_t>(xs.c));
    auto arg = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(xs.c));
    const auto& x = value(xv);
    for (int c = 0; c < xs.c; ++c) {
      std::size_t best = 0;
      for (std::size_t p = 1; p < P; ++p)
        if (x[c * P + p] > x[c * P + best]) best = p;
      (*arg)[c] = c * P + best;
      out[c] = x[c * P + best];
    }
    auto& n = push({xs.c, 1, 1, 1});
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv}, [this, self, xv, arg] {
      const auto& g = node(self).grad;
      auto& d = node(xv).ensure_grad();
      for (std::size_t c = 0; c < g.size(); ++c) d[(*arg)[c]] += g[c];
    });
    return self;
  }

  /// Single-head scaled dot-product attention over spatial positions.
  /// q, k, v: [C][P]; out[c][i] = sum_j v[c][j] softmax_j(q[:,i].k[:,j] / sqrt(C)).
  Var<T> attention(Var<T> qv, Var<T> kv, Var<T> vv) {
    const Shape s = shape(qv);
    detail::check(shape(kv) == s && shape(vv) == s, "attention: q/k/v shapes differ");
    const int C = s.c;
    const std::size_t P = s.spatial();
    const T scale = T(1) / std::sqrt(static_cast<T>(C));
    auto A = std::make_shared<std::vector<T>>(P * P);
    detail::CMapR<T> Q(value(qv).data(), C, P), K(value(kv).data(), C, P), V(value(vv).data(), C, P);
    detail::MapR<T> Am(A->data(), P, P);
    Am.noalias() = (Q.transpose() * K) * scale;
    for (std::size_t i = 0; i < P; ++i) {
      const T mx = Am.row(i).maxCoeff();
      Am.row(i) = (Am.row(i).array() - mx).exp();
      Am.row(i) /= Am.row(i).sum();
    }
    std::vector<T> out(s.size());
    detail::MapR<T> O(out.data(), C, P);
    O.noalias() = V * Am.transpose();
    auto& n = push(s);
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {qv, kv, vv}, [this, self, qv, kv, vv, A, C, P, scale] {
      detail::CMapR<T> G(node(self).grad.data(), C, P);
      detail::CMapR<T> Q(value(qv).data(), C, P), K(value(kv).data(), C, P), V(value(vv).data(), C, P);
      detail::CMapR<T> Am(A->data(), P, P);
      if (node(vv).requires_grad) {
        detail::MapR<T> dV(node(vv).ensure_grad().data(), C, P);
        dV.noalias() += G * Am;
      }
      detail::MatR<T> dA = G.transpose() * V;  // [P][P], dA[i][j] = sum_c G[c][i] V[c][j]
      detail::MatR<T> dS(P, P);
      for (std::size_t i = 0; i < P; ++i) {
        const T dot = (Am.row(i).array() * dA.row(i).array()).sum();
        dS.row(i) = Am.row(i).array() * (dA.row(i).array() - dot) * scale;
      }
      if (node(qv).requires_grad) {
        detail::MapR<T> dQ(node(qv).ensure_grad().data(), C, P);
        dQ.noalias() += K * dS.transpose();
      }
      if (node(kv).requires_grad) {
        detail::MapR<T> dK(node(kv).ensure_grad().data(), C, P);
        dK.noalias() += Q * dS;
      }
    });
    return self;
  }

 private:
  static std::size_t flat(const Shape& s, int c, int z, int y, int x) {
    return ((static_cast<std::size_t>(c) * s.z + z) * s.y + y) * s.x + x;
  }

  Node<T>& push(Shape shape) {
    nodes_.push_back(std::make_unique<Node<T>>());
    nodes_.back()->shape = shape;
    return *nodes_.back();
  }
  Var<T> last() { return {this, nodes_.size() - 1}; }

  template <class Fn>
  void wire(Node<T>& n, std::initializer_list<Var<T>> inputs, Fn&& fn) {
    wire(n, std::vector<Var<T>>(inputs), std::forward<Fn>(fn));
  }
  template <class Fn>
  void wire(Node<T>& n, const std::vector<Var<T>>& inputs, Fn&& fn) {
    if (!record_) return;
    bool any = false;
    for (auto in : inputs) any = any || node(in).requires_grad;
    n.requires_grad = any;
    if (any) n.backward = std::forward<Fn>(fn);
  }

  template <class F, class DF>
  Var<T> unary(Var<T> xv, F f, DF df) {
    const auto& x = value(xv);
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    auto& n = push(shape(xv));
    n.value = std::move(out);
    const Var<T> self = last();
    wire(n, {xv}, [this, self, xv, df] {
      const auto& g = node(self).grad;
      const auto& x = value(xv);
      const auto& y = node(self).value;
      auto& d = node(xv).ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * df(x[i], y[i]);
    });
    return self;
  }

  // col[(ci*k^3 + kz*k*k + ky*k + kx)][p] = x[ci][z+kz-r][y+ky-r][x+kx-r], zero outside.
  static void im2col(const std::vector<T>& x, const Shape& s, int k, std::vector<T>& col) {
    const int r = k / 2;
    const std::size_t P = s.spatial();
    col.assign(static_cast<std::size_t>(s.c) * k * k * k * P, T(0));
    std::size_t row = 0;
    for (int ci = 0; ci < s.c; ++ci)
      for (int kz = 0; kz < k; ++kz)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx, ++row) {
            T* dst = col.data() + row * P;
            const int dz = kz - r, dy = ky - r, dx = kx - r;
            const int x0 = std::max(0, -dx), x1 = std::min(s.x, s.x - dx);
            for (int z = std::max(0, -dz); z < std::min(s.z, s.z - dz); ++z)
              for (int y = std::max(0, -dy); y < std::min(s.y, s.y - dy); ++y) {
                const T* src = x.data() + flat(s, ci, z + dz, y + dy, 0);
                T* d = dst + (static_cast<std::size_t>(z) * s.y + y) * s.x;
                for (int xx = x0; xx < x1; ++xx) d[xx] = src[xx + dx];
              }
          }
  }

  static void col2im(const std::vector<T>& col, const Shape& s, int k, std::vector<T>& dx_out) {
    const int r = k / 2;
    const std::size_t P = s.spatial();
    std::size_t row = 0;
    for (int ci = 0; ci < s.c; ++ci)
      for (int kz = 0; kz < k; ++kz)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx, ++row) {
            const T* src = col.data() + row * P;
            const int dz = kz - r, dy = ky - r, dx = kx - r;
            const int x0 = std::max(0, -dx), x1 = std::min(s.x, s.x - dx);
            for (int z = std::max(0, -dz); z < std::min(s.z, s.z - dz); ++z)
              for (int y = std::max(0, -dy); y < std::min(s.y, s.y - dy); ++y) {
                T* d = dx_out.data() + flat(s, ci, z + dz, y + dy, 0);
                const T* g = src + (static_cast<std::size_t>(z) * s.y + y) * s.x;
                for (int xx = x0; xx < x1; ++xx) d[xx + dx] += g[xx];
              }
          }
  }

  bool record_;
  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

}  // namespace fodiff::ad
