#pragma once

#include "ncs/autodiff.h"
#include "ncs/geometry.h"
#include "ncs/parameterization.h"
#include "ncs/patching.h"

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ncs {

enum class DisplacementMode { VectorLrf, ScalarNormal, VectorPca };

std::string toString(DisplacementMode mode);
DisplacementMode displacementModeFromString(const std::string& text);

struct ArchConfig {
  std::vector<int> coarseWidths{128, 64, 64};
  int codeChannels = 8;
  int codeHeight = 4;
  int codeWidth = 4;
  int cnnChannels = 8;
  int cnnBlocks = 5;
  std::vector<int> fineWidths{16, 16};
  DisplacementMode mode = DisplacementMode::VectorLrf;

  void validate() const;
  // Decoded feature grid size: code resolution doubled once per block.
  int gridHeight() const { return codeHeight << cnnBlocks; }
  int gridWidth() const { return codeWidth << cnnBlocks; }
  bool hasInputAdapter() const { return codeChannels != cnnChannels; }
};

struct ParamCounts {
  long coarse = 0;
  long code = 0;
  long cnn = 0;
  long fineMlp = 0;
  long total() const { return coarse + code + cnn + fineMlp; }
};

ParamCounts countParameters(const ArchConfig& arch, int numPatches);
// Two 3x3 convolutions (C -> C, with biases) per residual block.
long residualBlockParameters(int channels);
// Parameter table in the layout of the per-shape parameter distribution table.
std::string formatParameterTable(const ParamCounts& counts, const std::string& label);

// Indices of each learnable tensor within ModelParams::tensors.
struct ParamLayout {
  std::vector<int> coarseWeights, coarseBiases;
  int codes = -1;
  int adapterWeight = -1, adapterBias = -1;
  struct Block {
    int conv1Weight, conv1Bias, conv2Weight, conv2Bias;
  };
  std::vector<Block> blocks;
  std::vector<int> fineWeights, fineBiases;
  int count = 0;

  static ParamLayout of(const ArchConfig& arch);
  std::vector<int> coarseIndices() const;
  std::vector<int> fineIndices() const;
};

struct ModelParams {
  ArchConfig arch;
  int numPatches = 0;
  std::vector<std::string> names;
  std::vector<ad::Tensor32> tensors;
  // Per-patch ground-truth PCA frames, row-major 3x3 with columns [n, t, b]. Used in PCA mode.
  ad::Tensor32 pcaFrames;
  // Feature-enhancement factor applied to decoded CNN grids before interpolation.
  float detailScale = 1.0f;

  ParamLayout layout() const { return ParamLayout::of(arch); }
  ParamCounts counts() const { return countParameters(arch, numPatches); }
};

ModelParams buildModel(const ArchConfig& arch, const PatchSet& patches, std::uint64_t seed);

// Columns [n, t, b].
using Frame = Eigen::Matrix3d;

// A global-chart query with its covering patch contributions precomputed.
struct FineEntry {
  int sample = 0;
  int patch = 0;
  double u = 0.0, v = 0.0;  // l_i(q) in the patch chart (CNN pixel space)
  double weight = 0.0;
};

struct QuerySet {
  std::vector<Vec2> q;
  std::vector<FineEntry> entries;
  int size() const { return static_cast<int>(q.size()); }
};

QuerySet buildQueries(const PatchSet& patches, const DiskChart& global, std::span<const ChartPoint> points);

// Graph construction shared by training (float), inference (float) and gradient checks (double).
template <class T>
struct ModelGraph {
  using Tp = ad::Tape<T>;
  using Var = typename Tp::Var;

  struct Coarse {
    Var position, ju, jv;
  };
  struct Frames {
    Var n, t, b;
  };

  // Coarse MLP with forward-mode tangents along q_u and q_v.
  static Coarse coarse(Tp& tape, const ArchConfig& arch, const ParamLayout& layout, std::span<const Var> params,
                       std::span<const Vec2> q, bool withJacobian);
  static Frames frames(Tp& tape, const Coarse& coarse);
  // Decoded feature grids [S, C, H, W] for the listed patches.
  static Var decode(Tp& tape, const ArchConfig& arch, const ParamLayout& layout, std::span<const Var> params,
                    std::span<const int> patches);
  static Var fineMlp(Tp& tape, const ArchConfig& arch, const ParamLayout& layout, std::span<const Var> params,
                     Var features);

  struct Output {
    Coarse coarse;
    Frames frames;
    Var displacement;  // blended g^d in local coordinates ([N,3]); world-space in PCA mode
    Var position;      // full reconstruction g(q)
  };
  // Full forward pass. Skips the fine branch when withFine is false.
  static Output forward(Tp& tape, const ModelParams& meta, std::span<const Var> params, const QuerySet& queries,
                        bool withFine);
};

extern template struct ModelGraph<float>;
extern template struct ModelGraph<double>;

// Rows whose Jacobian columns are (near) parallel, |J_u x J_v| < 1e-9.
std::vector<char> degenerateFrameRows(const ad::Tensor32& ju, const ad::Tensor32& jv);
std::vector<char> degenerateFrameRows(const ad::Tensor64& ju, const ad::Tensor64& jv);

Vec3 coarseForward(const ModelParams& params, const Vec2& q);
Eigen::Matrix<double, 3, 2> coarseJacobian(const ModelParams& params, const Vec2& q);
// Throws NumericError on a degenerate Jacobian.
Frame localFrame(const ModelParams& params, const Vec2& q);

struct EvalBatch {
  std::vector<Vec3> position;
  std::vector<Vec3> coarse;
  std::vector<Vec3> displacement;  // g^d(q) before the frame rotation (world-space in PCA mode)
  std::vector<Frame> frames;
  int degenerateFrames = 0;
};

// Inference over a fixed model: decodes every patch grid once and answers batched queries.
class Evaluator {
public:
  Evaluator(const ModelParams& params, const PatchSet& patches, const DiskChart& global);

  EvalBatch evaluate(std::span<const ChartPoint> points) const;
  EvalBatch evaluate(std::span<const Vec2> q) const;
  Vec3 evaluate(const Vec2& q) const;
  // g^d(q): blended fine-branch output before the frame rotation.
  Vec3 fineForward(const Vec2& q) const;
  // Blended bilinear CNN feature vector at each point.
  std::vector<Eigen::VectorXd> features(std::span<const ChartPoint> points) const;

  const ad::Tensor32& decodedGrids() const { return grids_; }
  // Query chunks fan out over this many threads; results do not depend on the count.
  void setWorkers(int workers) { workers_ = std::max(1, workers); }
  const ModelParams& params() const { return params_; }

private:
  const ModelParams& params_;
  const PatchSet& patches_;
  const DiskChart& global_;
  ad::Tensor32 grids_;
  int workers_ = 1;
  std::vector<ChartPoint> locateAll(std::span<const Vec2> q) const;
};

// Feature enhancement: same model with decoded grids multiplied by factor.
ModelParams scaleDetails(const ModelParams& params, double factor);

// Source fine branch on the target coarse branch. Throws on mismatched patch layouts.
ModelParams transferDetails(const ModelParams& source, const ModelParams& targetCoarse);

// Cosine similarity of each point's feature vector with the mean feature of the region.
std::vector<double> activationMap(const Evaluator& evaluator, std::span<const ChartPoint> region,
                                  std::span<const ChartPoint> points);

} // namespace ncs
