#include "ncs/autodiff.h"

#include "ncs/errors.h"
#include "ncs/random.h"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace ncs::ad {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

std::string shapeString(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

void requireShape(bool ok, const char* op, const std::vector<int>& a, const std::vector<int>& b) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": shape mismatch " + shapeString(a) + " vs " + shapeString(b));
}

template <class T>
T sigmoidOf(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T softplusOf(T x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, T(0));
}

} // namespace

template <class T>
Tensor<T>::Tensor(std::vector<int> shp, T fill) : shape(std::move(shp)), data(count(shape), fill) {}

template <class T>
Tensor<T>::Tensor(std::vector<int> shp, std::vector<T> values) : shape(std::move(shp)), data(std::move(values)) {
  if (data.size() != count(shape)) throw std::invalid_argument("tensor data does not match shape " + shapeString(shape));
}

template <class T>
std::size_t Tensor<T>::count(std::span<const int> shp) {
  if (shp.size() > 4) throw std::invalid_argument("tensors have at most four axes");
  std::size_t n = 1;
  for (int d : shp) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <class T>
typename Tape<T>::Var Tape<T>::push(Tensor<T> value, bool requiresGrad, std::function<void()> backward) {
  Node node;
  node.value = std::move(value);
  node.requiresGrad = requiresGrad;
  if (requiresGrad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class T>
Tensor<T>& Tape<T>::gradRef(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape, T(0));
  return n.grad;
}

template <class T>
void Tape<T>::mixBranch(std::uint64_t bits) {
  branchHash_ ^= bits;
  branchHash_ *= 1099511628211ull;
}

template <class T>
typename Tape<T>::Var Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <class T>
typename Tape<T>::Var Tape<T>::leaf(Tensor<T> value) {
  return push(std::move(value), true);
}

template <class T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.data.empty()) return Tensor<T>(n.value.shape, T(0));
  return n.grad;
}

template <class T>
void Tape<T>::backward(Var out) {
  if (nodes_.empty() || !out.valid() || out.id >= static_cast<int>(nodes_.size())) {
    throw Error(ErrorKind::Numeric, "backward: nothing recorded on the tape");
  }
  if (backwardDone_) throw Error(ErrorKind::Numeric, "backward: tape already consumed");
  if (nodes_[out.id].value.size() != 1) throw std::invalid_argument("backward: output must be a scalar");
  backwardDone_ = true;
  gradRef(out.id).data[0] = T(1);
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.data.empty()) n.backward();
  }
}

template <class T>
typename Tape<T>::Var Tape<T>::linear(Var x, Var W, Var b) {
  const auto& xs = value(x).shape;
  const auto& ws = value(W).shape;
  requireShape(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1], "linear", xs, ws);
  const int n = xs[0], in = xs[1], outDim = ws[0];
  if (b.valid()) requireShape(value(b).size() == static_cast<size_t>(outDim), "linear bias", value(b).shape, ws);
  Tensor<T> y({n, outDim});
  MapR<T> Y(y.data.data(), n, outDim);
  Y.noalias() = CMapR<T>(value(x).data.data(), n, in) * CMapR<T>(value(W).data.data(), outDim, in).transpose();
  if (b.valid()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(value(b).data.data(), outDim);
    Y.rowwise() += bias;
  }
  const bool rg = needs(x) || needs(W) || (b.valid() && needs(b));
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), rg, [this, id, x, W, b, n, in, outDim] {
    CMapR<T> G(nodes_[id].grad.data.data(), n, outDim);
    if (needs(x)) {
      MapR<T>(gradRef(x.id).data.data(), n, in).noalias() += G * CMapR<T>(value(W).data.data(), outDim, in);
    }
    if (needs(W)) {
      MapR<T>(gradRef(W.id).data.data(), outDim, in).noalias() +=
          G.transpose() * CMapR<T>(value(x).data.data(), n, in);
    }
    if (b.valid() && needs(b)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gradRef(b.id).data.data(), outDim) += G.colwise().sum();
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::softplus(Var x) {
  const Tensor<T>& xv = value(x);
  Tensor<T> y(xv.shape);
  for (size_t i = 0; i < y.size(); ++i) y[i] = softplusOf(xv[i]);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(x), [this, id, x] {
    const Tensor<T>& g = nodes_[id].grad;
    const Tensor<T>& xv = value(x);
    Tensor<T>& dx = gradRef(x.id);
    for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * sigmoidOf(xv[i]);
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::sigmoid(Var x) {
  const Tensor<T>& xv = value(x);
  Tensor<T> y(xv.shape);
  for (size_t i = 0; i < y.size(); ++i) y[i] = sigmoidOf(xv[i]);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(x), [this, id, x] {
    const Tensor<T>& g = nodes_[id].grad;
    const Tensor<T>& yv = nodes_[id].value;
    Tensor<T>& dx = gradRef(x.id);
    for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::relu(Var x) {
  const Tensor<T>& xv = value(x);
  Tensor<T> y(xv.shape);
  std::uint64_t bits = 0;
  for (size_t i = 0; i < y.size(); ++i) {
    const bool on = xv[i] > T(0);
    y[i] = on ? xv[i] : T(0);
    bits = bits * 31 + (on ? 1 : 2);
  }
  mixBranch(bits);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(x), [this, id, x] {
    const Tensor<T>& g = nodes_[id].grad;
    const Tensor<T>& xv = value(x);
    Tensor<T>& dx = gradRef(x.id);
    for (size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) dx[i] += g[i];
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::activate(Var x, Activation act) {
  switch (act) {
    case Activation::Softplus: return softplus(x);
    case Activation::Relu: return relu(x);
    case Activation::None: break;
  }
  return x;
}

template <class T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
  requireShape(value(a).shape == value(b).shape, "add", value(a).shape, value(b).shape);
  Tensor<T> y = value(a);
  const Tensor<T>& bv = value(b);
  for (size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a) || needs(b), [this, id, a, b] {
    const Tensor<T>& g = nodes_[id].grad;
    for (Var v : {a, b}) {
      if (!needs(v)) continue;
      Tensor<T>& d = gradRef(v.id);
      for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::sub(Var a, Var b) {
  requireShape(value(a).shape == value(b).shape, "sub", value(a).shape, value(b).shape);
  Tensor<T> y = value(a);
  const Tensor<T>& bv = value(b);
  for (size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a) || needs(b), [this, id, a, b] {
    const Tensor<T>& g = nodes_[id].grad;
    if (needs(a)) {
      Tensor<T>& d = gradRef(a.id);
      for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (needs(b)) {
      Tensor<T>& d = gradRef(b.id);
      for (size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::mul(Var a, Var b) {
  requireShape(value(a).shape == value(b).shape, "mul", value(a).shape, value(b).shape);
  Tensor<T> y = value(a);
  const Tensor<T>& bv = value(b);
  for (size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a) || needs(b), [this, id, a, b] {
    const Tensor<T>& g = nodes_[id].grad;
    if (needs(a)) {
      Tensor<T>& d = gradRef(a.id);
      const Tensor<T>& bv = value(b);
      for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (needs(b)) {
      Tensor<T>& d = gradRef(b.id);
      const Tensor<T>& av = value(a);
      for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::scale(Var a, T factor) {
  Tensor<T> y = value(a);
  for (T& v : y.data) v *= factor;
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a), [this, id, a, factor] {
    const Tensor<T>& g = nodes_[id].grad;
    Tensor<T>& d = gradRef(a.id);
    for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::combine(Var a, T wa, Var b, T wb) {
  requireShape(value(a).size() == 1 && value(b).size() == 1, "combine", value(a).shape, value(b).shape);
  Tensor<T> y({}, wa * value(a)[0] + wb * value(b)[0]);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a) || needs(b), [this, id, a, wa, b, wb] {
    const T g = nodes_[id].grad[0];
    if (needs(a)) gradRef(a.id)[0] += wa * g;
    if (needs(b)) gradRef(b.id)[0] += wb * g;
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::crossRows(Var a, Var b) {
  const auto& as = value(a).shape;
  requireShape(as.size() == 2 && as[1] == 3 && as == value(b).shape, "crossRows", as, value(b).shape);
  const int n = as[0];
  Tensor<T> y({n, 3});
  const T* A = value(a).data.data();
  const T* B = value(b).data.data();
  for (int i = 0; i < n; ++i) {
    const T* p = A + 3 * i;
    const T* q = B + 3 * i;
    T* o = y.data.data() + 3 * i;
    o[0] = p[1] * q[2] - p[2] * q[1];
    o[1] = p[2] * q[0] - p[0] * q[2];
    o[2] = p[0] * q[1] - p[1] * q[0];
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a) || needs(b), [this, id, a, b, n] {
    const T* G = nodes_[id].grad.data.data();
    const T* A = value(a).data.data();
    const T* B = value(b).data.data();
    T* dA = needs(a) ? gradRef(a.id).data.data() : nullptr;
    T* dB = needs(b) ? gradRef(b.id).data.data() : nullptr;
    for (int i = 0; i < n; ++i) {
      const T* g = G + 3 * i;
      const T* p = A + 3 * i;
      const T* q = B + 3 * i;
      // g . (p x q) = p . (q x g) = q . (g x p)
      if (dA) {
        dA[3 * i + 0] += q[1] * g[2] - q[2] * g[1];
        dA[3 * i + 1] += q[2] * g[0] - q[0] * g[2];
        dA[3 * i + 2] += q[0] * g[1] - q[1] * g[0];
      }
      if (dB) {
        dB[3 * i + 0] += g[1] * p[2] - g[2] * p[1];
        dB[3 * i + 1] += g[2] * p[0] - g[0] * p[2];
        dB[3 * i + 2] += g[0] * p[1] - g[1] * p[0];
      }
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::normalizeRows(Var a) {
  const auto& as = value(a).shape;
  requireShape(as.size() == 2, "normalizeRows", as, as);
  const int n = as[0], k = as[1];
  Tensor<T> y = value(a);
  std::vector<T> norms(n);
  for (int i = 0; i < n; ++i) {
    T s = 0;
    for (int j = 0; j < k; ++j) s += y[i * k + j] * y[i * k + j];
    norms[i] = std::max(std::sqrt(s), T(1e-30));
    for (int j = 0; j < k; ++j) y[i * k + j] /= norms[i];
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a), [this, id, a, n, k, norms = std::move(norms)] {
    const Tensor<T>& g = nodes_[id].grad;
    const Tensor<T>& yv = nodes_[id].value;
    Tensor<T>& d = gradRef(a.id);
    for (int i = 0; i < n; ++i) {
      T dot = 0;
      for (int j = 0; j < k; ++j) dot += yv[i * k + j] * g[i * k + j];
      for (int j = 0; j < k; ++j) d[i * k + j] += (g[i * k + j] - yv[i * k + j] * dot) / norms[i];
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::column(Var a, int col) {
  const auto& as = value(a).shape;
  requireShape(as.size() == 2 && col >= 0 && col < as[1], "column", as, as);
  const int n = as[0], k = as[1];
  Tensor<T> y({n, 1});
  for (int i = 0; i < n; ++i) y[i] = value(a)[i * k + col];
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a), [this, id, a, n, k, col] {
    const Tensor<T>& g = nodes_[id].grad;
    Tensor<T>& d = gradRef(a.id);
    for (int i = 0; i < n; ++i) d[i * k + col] += g[i];
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::frameApply(Var nv, Var tv, Var bv, Var dv) {
  const auto& s = value(nv).shape;
  requireShape(s.size() == 2 && s[1] == 3 && value(tv).shape == s && value(bv).shape == s && value(dv).shape == s,
               "frameApply", s, value(dv).shape);
  const int n = s[0];
  Tensor<T> y({n, 3});
  const T* N = value(nv).data.data();
  const T* Tt = value(tv).data.data();
  const T* B = value(bv).data.data();
  const T* D = value(dv).data.data();
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      y[3 * i + c] = N[3 * i + c] * D[3 * i] + Tt[3 * i + c] * D[3 * i + 1] + B[3 * i + c] * D[3 * i + 2];
    }
  }
  const bool rg = needs(nv) || needs(tv) || needs(bv) || needs(dv);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), rg, [this, id, nv, tv, bv, dv, n] {
    const T* G = nodes_[id].grad.data.data();
    const T* D = value(dv).data.data();
    const Var axes[3] = {nv, tv, bv};
    for (int a = 0; a < 3; ++a) {
      if (!needs(axes[a])) continue;
      T* dAxis = gradRef(axes[a].id).data.data();
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) dAxis[3 * i + c] += G[3 * i + c] * D[3 * i + a];
      }
    }
    if (needs(dv)) {
      T* dD = gradRef(dv.id).data.data();
      for (int a = 0; a < 3; ++a) {
        const T* Ax = value(axes[a]).data.data();
        for (int i = 0; i < n; ++i) {
          dD[3 * i + a] += G[3 * i] * Ax[3 * i] + G[3 * i + 1] * Ax[3 * i + 1] + G[3 * i + 2] * Ax[3 * i + 2];
        }
      }
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::applyFrames(Var frames, Var h) {
  const auto& fs = value(frames).shape;
  const auto& hs = value(h).shape;
  requireShape(fs.size() == 2 && fs[1] == 9 && hs.size() == 2 && hs[1] == 3 && fs[0] == hs[0], "applyFrames", fs, hs);
  const int e = hs[0];
  Tensor<T> y({e, 3});
  const T* F = value(frames).data.data();
  const T* H = value(h).data.data();
  for (int i = 0; i < e; ++i) {
    for (int r = 0; r < 3; ++r) {
      y[3 * i + r] = F[9 * i + 3 * r] * H[3 * i] + F[9 * i + 3 * r + 1] * H[3 * i + 1] + F[9 * i + 3 * r + 2] * H[3 * i + 2];
    }
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(frames) || needs(h), [this, id, frames, h, e] {
    const T* G = nodes_[id].grad.data.data();
    const T* F = value(frames).data.data();
    const T* H = value(h).data.data();
    if (needs(h)) {
      T* dH = gradRef(h.id).data.data();
      for (int i = 0; i < e; ++i) {
        for (int c = 0; c < 3; ++c) {
          dH[3 * i + c] += F[9 * i + c] * G[3 * i] + F[9 * i + 3 + c] * G[3 * i + 1] + F[9 * i + 6 + c] * G[3 * i + 2];
        }
      }
    }
    if (needs(frames)) {
      T* dF = gradRef(frames.id).data.data();
      for (int i = 0; i < e; ++i) {
        for (int r = 0; r < 3; ++r) {
          for (int c = 0; c < 3; ++c) dF[9 * i + 3 * r + c] += G[3 * i + r] * H[3 * i + c];
        }
      }
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::segmentWeightedSum(Var values, std::span<const int> segment, std::span<const T> weight,
                                                  int numSegments) {
  const auto& vs = value(values).shape;
  requireShape(vs.size() == 2 && static_cast<size_t>(vs[0]) == segment.size() && segment.size() == weight.size(),
               "segmentWeightedSum", vs, {static_cast<int>(segment.size())});
  const int e = vs[0], k = vs[1];
  Tensor<T> y({numSegments, k});
  const T* V = value(values).data.data();
  for (int i = 0; i < e; ++i) {
    const int s = segment[i];
    if (s < 0 || s >= numSegments) throw std::out_of_range("segmentWeightedSum: segment index");
    for (int c = 0; c < k; ++c) y[s * k + c] += weight[i] * V[i * k + c];
  }
  const int id = static_cast<int>(nodes_.size());
  std::vector<int> seg(segment.begin(), segment.end());
  std::vector<T> w(weight.begin(), weight.end());
  return push(std::move(y), needs(values), [this, id, values, e, k, seg = std::move(seg), w = std::move(w)] {
    const T* G = nodes_[id].grad.data.data();
    T* dV = gradRef(values.id).data.data();
    for (int i = 0; i < e; ++i) {
      for (int c = 0; c < k; ++c) dV[i * k + c] += w[i] * G[seg[i] * k + c];
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::meanSquaredError(Var a, Var b) {
  const auto& as = value(a).shape;
  requireShape(as.size() == 2 && as == value(b).shape && as[0] > 0, "meanSquaredError", as, value(b).shape);
  const int n = as[0];
  const Tensor<T>& av = value(a);
  const Tensor<T>& bv = value(b);
  T sum = 0;
  for (size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    sum += d * d;
  }
  Tensor<T> y({}, sum / static_cast<T>(n));
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(a) || needs(b), [this, id, a, b, n] {
    const T g = nodes_[id].grad[0] * T(2) / static_cast<T>(n);
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (needs(a)) {
      Tensor<T>& d = gradRef(a.id);
      for (size_t i = 0; i < av.size(); ++i) d[i] += g * (av[i] - bv[i]);
    }
    if (needs(b)) {
      Tensor<T>& d = gradRef(b.id);
      for (size_t i = 0; i < av.size(); ++i) d[i] -= g * (av[i] - bv[i]);
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::selectImages(Var x, std::span<const int> images) {
  const auto& xs = value(x).shape;
  requireShape(!xs.empty(), "selectImages", xs, xs);
  const size_t stride = value(x).size() / static_cast<size_t>(xs[0]);
  std::vector<int> shp = xs;
  shp[0] = static_cast<int>(images.size());
  Tensor<T> y(shp);
  for (size_t s = 0; s < images.size(); ++s) {
    if (images[s] < 0 || images[s] >= xs[0]) throw std::out_of_range("selectImages: index");
    std::copy_n(value(x).data.begin() + images[s] * stride, stride, y.data.begin() + s * stride);
  }
  const int id = static_cast<int>(nodes_.size());
  std::vector<int> idx(images.begin(), images.end());
  return push(std::move(y), needs(x), [this, id, x, stride, idx = std::move(idx)] {
    const Tensor<T>& g = nodes_[id].grad;
    Tensor<T>& d = gradRef(x.id);
    for (size_t s = 0; s < idx.size(); ++s) {
      for (size_t j = 0; j < stride; ++j) d[idx[s] * stride + j] += g[s * stride + j];
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::conv3x3(Var x, Var W, Var b) {
  const auto& xs = value(x).shape;
  const auto& ws = value(W).shape;
  requireShape(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == 3 && ws[3] == 3, "conv3x3", xs, ws);
  const int batch = xs[0], ci = xs[1], h = xs[2], w = xs[3], co = ws[0];
  requireShape(value(b).size() == static_cast<size_t>(co), "conv3x3 bias", value(b).shape, ws);
  const int hw = h * w;
  const int cols = batch * hw;
  const int rows = ci * 9;
  // im2col: row (c, ky, kx), column (image, y, x); zero padding of one pixel.
  auto colsBuf = std::make_shared<std::vector<T>>(static_cast<size_t>(rows) * cols, T(0));
  const T* X = value(x).data.data();
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = colsBuf->data() + static_cast<size_t>((c * 3 + ky) * 3 + kx) * cols;
        for (int im = 0; im < batch; ++im) {
          const T* src = X + (static_cast<size_t>(im) * ci + c) * hw;
          T* dst = row + static_cast<size_t>(im) * hw;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (int xx = 0; xx < w; ++xx) {
              const int sx = xx + kx - 1;
              if (sx >= 0 && sx < w) dst[y * w + xx] = src[sy * w + sx];
            }
          }
        }
      }
    }
  }
  MatR<T> out(co, cols);
  out.noalias() = CMapR<T>(value(W).data.data(), co, rows) * CMapR<T>(colsBuf->data(), rows, cols);
  Tensor<T> y({batch, co, h, w});
  for (int im = 0; im < batch; ++im) {
    for (int c = 0; c < co; ++c) {
      const T bias = value(b)[c];
      T* dst = y.data.data() + (static_cast<size_t>(im) * co + c) * hw;
      const T* src = out.data() + static_cast<size_t>(c) * cols + static_cast<size_t>(im) * hw;
      for (int j = 0; j < hw; ++j) dst[j] = src[j] + bias;
    }
  }
  const bool rg = needs(x) || needs(W) || needs(b);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), rg, [this, id, x, W, b, batch, ci, co, h, w, hw, cols, rows, colsBuf] {
    const T* G = nodes_[id].grad.data.data();
    MatR<T> gmat(co, cols);
    for (int im = 0; im < batch; ++im) {
      for (int c = 0; c < co; ++c) {
        std::copy_n(G + (static_cast<size_t>(im) * co + c) * hw, hw,
                    gmat.data() + static_cast<size_t>(c) * cols + static_cast<size_t>(im) * hw);
      }
    }
    if (needs(b)) {
      Tensor<T>& db = gradRef(b.id);
      for (int c = 0; c < co; ++c) db[c] += gmat.row(c).sum();
    }
    if (needs(W)) {
      MapR<T>(gradRef(W.id).data.data(), co, rows).noalias() +=
          gmat * CMapR<T>(colsBuf->data(), rows, cols).transpose();
    }
    if (needs(x)) {
      MatR<T> dcols(rows, cols);
      dcols.noalias() = CMapR<T>(value(W).data.data(), co, rows).transpose() * gmat;
      T* dX = gradRef(x.id).data.data();
      for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const T* row = dcols.data() + static_cast<size_t>((c * 3 + ky) * 3 + kx) * cols;
            for (int im = 0; im < batch; ++im) {
              T* dst = dX + (static_cast<size_t>(im) * ci + c) * hw;
              const T* src = row + static_cast<size_t>(im) * hw;
              for (int yy = 0; yy < h; ++yy) {
                const int sy = yy + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (int xx = 0; xx < w; ++xx) {
                  const int sx = xx + kx - 1;
                  if (sx >= 0 && sx < w) dst[sy * w + sx] += src[yy * w + xx];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
typename Tape<T>::Var Tape<T>::upsample2x(Var x) {
  const auto& xs = value(x).shape;
  requireShape(xs.size() == 4, "upsample2x", xs, xs);
  const int planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  Tensor<T> y({xs[0], xs[1], 2 * h, 2 * w});
  const T* X = value(x).data.data();
  for (int p = 0; p < planes; ++p) {
    for (int yy = 0; yy < 2 * h; ++yy) {
      const T* src = X + (static_cast<size_t>(p) * h + yy / 2) * w;
      T* dst = y.data.data() + (static_cast<size_t>(p) * 2 * h + yy) * 2 * w;
      for (int xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(x), [this, id, x, planes, h, w] {
    const T* G = nodes_[id].grad.data.data();
    T* dX = gradRef(x.id).data.data();
    for (int p = 0; p < planes; ++p) {
      for (int yy = 0; yy < 2 * h; ++yy) {
        T* dst = dX + (static_cast<size_t>(p) * h + yy / 2) * w;
        const T* src = G + (static_cast<size_t>(p) * 2 * h + yy) * 2 * w;
        for (int xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
      }
    }
  });
}

BilinearTap bilinearTap(double u, double v, int h, int w) {
  auto axis = [](double t, int n, int& i0, int& i1, double& f) {
    const double p = (std::clamp(t, -1.0, 1.0) + 1.0) * 0.5 * (n - 1);
    i0 = std::min(static_cast<int>(std::floor(p)), std::max(n - 2, 0));
    i1 = std::min(i0 + 1, n - 1);
    f = n == 1 ? 0.0 : p - i0;
  };
  BilinearTap tap{};
  axis(u, w, tap.x0, tap.x1, tap.fx);
  axis(v, h, tap.y0, tap.y1, tap.fy);
  return tap;
}

template <class T>
void bilinearSample(const Tensor<T>& grid, const GatherEntry& entry, T* out) {
  const int c = grid.shape[1], h = grid.shape[2], w = grid.shape[3];
  const BilinearTap t = bilinearTap(entry.u, entry.v, h, w);
  const T w00 = T((1 - t.fx) * (1 - t.fy)), w01 = T(t.fx * (1 - t.fy));
  const T w10 = T((1 - t.fx) * t.fy), w11 = T(t.fx * t.fy);
  const size_t plane = static_cast<size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const T* img = grid.data.data() + (static_cast<size_t>(entry.image) * c + ch) * plane;
    out[ch] = w00 * img[t.y0 * w + t.x0] + w01 * img[t.y0 * w + t.x1] + w10 * img[t.y1 * w + t.x0] +
              w11 * img[t.y1 * w + t.x1];
  }
}

template void bilinearSample<float>(const Tensor<float>&, const GatherEntry&, float*);
template void bilinearSample<double>(const Tensor<double>&, const GatherEntry&, double*);

template <class T>
typename Tape<T>::Var Tape<T>::bilinearGather(Var grid, std::span<const GatherEntry> entries) {
  const auto& gs = value(grid).shape;
  requireShape(gs.size() == 4, "bilinearGather", gs, gs);
  const int batch = gs[0], c = gs[1], h = gs[2], w = gs[3];
  const int e = static_cast<int>(entries.size());
  std::vector<BilinearTap> taps(e);
  std::vector<int> images(e);
  Tensor<T> y({e, c});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int i = 0; i < e; ++i) {
    if (entries[i].image < 0 || entries[i].image >= batch) throw std::out_of_range("bilinearGather: image index");
    taps[i] = bilinearTap(entries[i].u, entries[i].v, h, w);
    images[i] = entries[i].image;
    bilinearSample(value(grid), entries[i], y.data.data() + static_cast<size_t>(i) * c);
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(y), needs(grid), [this, id, grid, c, w, plane, taps = std::move(taps), images = std::move(images)] {
    const T* Gy = nodes_[id].grad.data.data();
    T* dG = gradRef(grid.id).data.data();
    for (size_t i = 0; i < taps.size(); ++i) {
      const BilinearTap& t = taps[i];
      const T w00 = T((1 - t.fx) * (1 - t.fy)), w01 = T(t.fx * (1 - t.fy));
      const T w10 = T((1 - t.fx) * t.fy), w11 = T(t.fx * t.fy);
      for (int ch = 0; ch < c; ++ch) {
        T* img = dG + (static_cast<size_t>(images[i]) * c + ch) * plane;
        const T g = Gy[i * c + ch];
        img[t.y0 * w + t.x0] += w00 * g;
        img[t.y0 * w + t.x1] += w01 * g;
        img[t.y1 * w + t.x0] += w10 * g;
        img[t.y1 * w + t.x1] += w11 * g;
      }
    }
  });
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

FiniteDiffReport finiteDiffCheck(const LossBuilder& loss, const std::vector<Tensor64>& params, double eps,
                                 int coordinates, std::uint64_t seed) {
  using Var = Tape<double>::Var;
  struct Eval {
    double value;
    std::uint64_t signature;
  };
  auto evaluate = [&](const std::vector<Tensor64>& p) {
    Tape<double> tape;
    std::vector<Var> leaves;
    for (const Tensor64& t : p) leaves.push_back(tape.constant(t));
    Var out = loss(tape, leaves);
    return Eval{tape.value(out)[0], tape.branchSignature()};
  };

  Tape<double> tape;
  std::vector<Var> leaves;
  for (const Tensor64& t : params) leaves.push_back(tape.leaf(t));
  Var out = loss(tape, leaves);
  const std::uint64_t baseSignature = tape.branchSignature();
  tape.backward(out);
  std::vector<Tensor64> grads;
  for (Var v : leaves) grads.push_back(tape.grad(v));

  std::vector<std::pair<int, size_t>> all;
  for (size_t t = 0; t < params.size(); ++t) {
    for (size_t i = 0; i < params[t].size(); ++i) all.emplace_back(static_cast<int>(t), i);
  }
  Rng rng(seed);
  // Partial Fisher-Yates for a reproducible subset.
  const size_t take = std::min<size_t>(all.size(), static_cast<size_t>(std::max(coordinates, 0)));
  for (size_t k = 0; k < take; ++k) {
    const size_t j = k + rng.index(all.size() - k);
    std::swap(all[k], all[j]);
  }

  FiniteDiffReport report;
  std::vector<Tensor64> probe = params;
  for (size_t k = 0; k < take; ++k) {
    const auto [t, i] = all[k];
    const double original = probe[t][i];
    bool sameBranch = true;
    double tap[4];
    const double offsets[4] = {2.0 * eps, eps, -eps, -2.0 * eps};
    for (int j = 0; j < 4; ++j) {
      probe[t][i] = original + offsets[j];
      const Eval e = evaluate(probe);
      tap[j] = e.value;
      sameBranch = sameBranch && e.signature == baseSignature;
    }
    probe[t][i] = original;
    if (!sameBranch) {
      ++report.excluded;
      continue;
    }
    const double numeric = (-tap[0] + 8.0 * tap[1] - 8.0 * tap[2] + tap[3]) / (12.0 * eps);
    const double analytic = grads[t][i];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
    report.maxRelativeError = std::max(report.maxRelativeError, std::abs(numeric - analytic) / denom);
    ++report.checked;
  }
  return report;
}

bool allFinite(std::span<const Tensor32> tensors) {
  for (const Tensor32& t : tensors) {
    for (float v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void RmsProp::init(std::span<const Tensor32> params) {
  v_.clear();
  for (const Tensor32& p : params) v_.emplace_back(p.shape, 0.0f);
}

bool RmsProp::step(std::vector<Tensor32>& params, const std::vector<Tensor32>& grads, std::span<const int> indices,
                   double lr) {
  if (v_.size() != params.size()) init(params);
  for (int i : indices) {
    for (float g : grads[i].data) {
      if (!std::isfinite(g)) return false;
    }
  }
  const float decay = static_cast<float>(decay_);
  const float eps = static_cast<float>(eps_);
  const float rate = static_cast<float>(lr);
  for (int i : indices) {
    Tensor32& p = params[i];
    Tensor32& v = v_[i];
    const Tensor32& g = grads[i];
    for (size_t k = 0; k < p.size(); ++k) {
      v[k] = decay * v[k] + (1.0f - decay) * g[k] * g[k];
      p[k] -= rate * g[k] / (std::sqrt(v[k]) + eps);
    }
  }
  return true;
}

} // namespace ncs::ad
