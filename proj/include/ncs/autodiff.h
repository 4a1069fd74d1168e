#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ncs::ad {

// Dense row-major tensor with up to four axes.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp, T fill = T(0));
  Tensor(std::vector<int> shp, std::vector<T> values);

  static std::size_t count(std::span<const int> shp);
  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int axis) const { return shape[axis]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// One bilinear lookup into image b of a [B, C, H, W] grid at (u, v) in [-1, 1]^2.
// u runs along W, v along H, align-corners convention; coordinates are clamped.
struct GatherEntry {
  int image = 0;
  double u = 0.0;
  double v = 0.0;
};

struct BilinearTap {
  int x0, x1, y0, y1;
  double fx, fy;
};
BilinearTap bilinearTap(double u, double v, int height, int width);

// Host-side bilinear lookup matching Tape::bilinearGather; writes C values.
template <class T>
void bilinearSample(const Tensor<T>& grid, const GatherEntry& entry, T* out);

enum class Activation { None, Softplus, Relu };

// Define-by-run reverse-mode tape. Every op computes its value eagerly and records a
// backward closure when any input requires a gradient.
template <class T>
class Tape {
public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value);
  Var leaf(Tensor<T> value);

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  // Gradient of the last backward() output with respect to v (zeros when v was not on a path).
  Tensor<T> grad(Var v) const;
  bool requiresGrad(Var v) const { return nodes_[v.id].requiresGrad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var scalarOutput);

  // Hash of every piecewise branch taken (relu signs, clamp sides). Two evaluations with the
  // same hash lie in the same smooth piece.
  std::uint64_t branchSignature() const { return branchHash_; }

  // ---- ops ----
  // x: [N, in], W: [out, in], b: [out] or invalid -> [N, out]
  Var linear(Var x, Var W, Var b = {});
  Var softplus(Var x);
  Var sigmoid(Var x);
  Var relu(Var x);
  Var activate(Var x, Activation act);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  // Weighted sum of two scalars.
  Var combine(Var a, T wa, Var b, T wb);

  // Row-wise ops on [N, k] tensors.
  Var crossRows(Var a, Var b);
  Var normalizeRows(Var a);
  Var column(Var a, int col);
  // out_i = n_i * d_i0 + t_i * d_i1 + b_i * d_i2 for [N,3] inputs.
  Var frameApply(Var n, Var t, Var b, Var d);
  // out_e = F_e * h_e with F given as row-major 3x3 per row of frames [E, 9].
  Var applyFrames(Var frames, Var h);
  // out[segment[e]] += weight[e] * values[e]; output [numSegments, k].
  Var segmentWeightedSum(Var values, std::span<const int> segment, std::span<const T> weight, int numSegments);
  // mean_i ||a_i - b_i||^2 over rows.
  Var meanSquaredError(Var a, Var b);

  // Image ops on [B, C, H, W].
  Var selectImages(Var x, std::span<const int> images);
  Var conv3x3(Var x, Var W, Var b);
  Var upsample2x(Var x);
  Var bilinearGather(Var grid, std::span<const GatherEntry> entries);

private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requiresGrad = false;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  bool backwardDone_ = false;
  std::uint64_t branchHash_ = 1469598103934665603ull;

  Var push(Tensor<T> value, bool requiresGrad, std::function<void()> backward = {});
  Tensor<T>& gradRef(int id);
  bool needs(Var v) const { return nodes_[v.id].requiresGrad; }
  void mixBranch(std::uint64_t bits);
};

extern template void bilinearSample<float>(const Tensor<float>&, const GatherEntry&, float*);
extern template void bilinearSample<double>(const Tensor<double>&, const GatherEntry&, double*);
extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

// Fourth-order central-difference gradient check (taps at +/-eps, +/-2eps) in 64-bit arithmetic.
// The loss builder records a scalar on the tape from leaves holding the given parameters.
// Coordinates where any tap takes a different piecewise branch than the base point (relu kinks)
// are excluded.
struct FiniteDiffReport {
  double maxRelativeError = 0.0;
  int checked = 0;
  int excluded = 0;
};

using LossBuilder = std::function<Tape<double>::Var(Tape<double>&, std::span<const Tape<double>::Var>)>;

FiniteDiffReport finiteDiffCheck(const LossBuilder& loss, const std::vector<Tensor64>& params, double eps,
                                 int coordinates, std::uint64_t seed);

// RMSProp: v <- decay v + (1 - decay) g^2; p <- p - lr g / (sqrt(v) + eps).
class RmsProp {
public:
  RmsProp(double decay = 0.99, double eps = 1e-8) : decay_(decay), eps_(eps) {}

  void init(std::span<const Tensor32> params);
  // Updates params[i] for i in indices. Returns false without touching anything when a
  // gradient is non-finite.
  bool step(std::vector<Tensor32>& params, const std::vector<Tensor32>& grads, std::span<const int> indices,
            double lr);

  const std::vector<Tensor32>& state() const { return v_; }
  std::vector<Tensor32>& state() { return v_; }
  double decay() const { return decay_; }
  double epsilon() const { return eps_; }

private:
  double decay_;
  double eps_;
  std::vector<Tensor32> v_;
};

bool allFinite(std::span<const Tensor32> tensors);

} // namespace ncs::ad
