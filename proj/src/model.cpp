#include "ncs/model.h"

#include "ncs/errors.h"
#include "ncs/random.h"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <thread>

namespace ncs {

std::string toString(DisplacementMode mode) {
  switch (mode) {
    case DisplacementMode::VectorLrf: return "vector-lrf";
    case DisplacementMode::ScalarNormal: return "scalar-normal";
    case DisplacementMode::VectorPca: return "vector-pca";
  }
  return "vector-lrf";
}

DisplacementMode displacementModeFromString(const std::string& text) {
  if (text == "vector-lrf") return DisplacementMode::VectorLrf;
  if (text == "scalar-normal") return DisplacementMode::ScalarNormal;
  if (text == "vector-pca") return DisplacementMode::VectorPca;
  throw ConfigError("unknown displacement mode '" + text + "' (vector-lrf, scalar-normal, vector-pca)");
}

void ArchConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
  };
  if (coarseWidths.empty()) throw ConfigError("coarse MLP needs at least one hidden layer");
  for (int w : coarseWidths) positive(w, "coarse width");
  for (int w : fineWidths) positive(w, "fine width");
  positive(codeChannels, "code channels");
  positive(codeHeight, "code height");
  positive(codeWidth, "code width");
  positive(cnnChannels, "CNN channels");
  if (cnnBlocks < 0 || cnnBlocks > 8) throw ConfigError("CNN block count must be in [0, 8]");
}

namespace {

long mlpParameters(int in, const std::vector<int>& hidden, int out) {
  long total = 0;
  int prev = in;
  for (int w : hidden) {
    total += static_cast<long>(prev) * w + w;
    prev = w;
  }
  return total + static_cast<long>(prev) * out + out;
}

} // namespace

long residualBlockParameters(int channels) {
  return 2L * (static_cast<long>(channels) * channels * 9 + channels);
}

ParamCounts countParameters(const ArchConfig& arch, int numPatches) {
  ParamCounts c;
  c.coarse = mlpParameters(2, arch.coarseWidths, 3);
  c.code = static_cast<long>(numPatches) * arch.codeChannels * arch.codeHeight * arch.codeWidth;
  c.cnn = arch.cnnBlocks * residualBlockParameters(arch.cnnChannels);
  if (arch.hasInputAdapter()) c.cnn += static_cast<long>(arch.cnnChannels) * arch.codeChannels * 9 + arch.cnnChannels;
  c.fineMlp = mlpParameters(arch.cnnChannels, arch.fineWidths, 3);
  return c;
}

std::string formatParameterTable(const ParamCounts& c, const std::string& label) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%-12s | %10s | %10s | %8s | %8s | %10s\n"
                "%-12s | %10ld | %10ld | %8ld | %8ld | %10ld\n",
                "", "Coarse MLP", "Code", "CNN", "Fine MLP", "Total", label.c_str(), c.coarse, c.code, c.cnn,
                c.fineMlp, c.total());
  return buf;
}

ParamLayout ParamLayout::of(const ArchConfig& arch) {
  ParamLayout l;
  int next = 0;
  for (size_t k = 0; k <= arch.coarseWidths.size(); ++k) {
    l.coarseWeights.push_back(next++);
    l.coarseBiases.push_back(next++);
  }
  l.codes = next++;
  if (arch.hasInputAdapter()) {
    l.adapterWeight = next++;
    l.adapterBias = next++;
  }
  for (int b = 0; b < arch.cnnBlocks; ++b) {
    Block blk{};
    blk.conv1Weight = next++;
    blk.conv1Bias = next++;
    blk.conv2Weight = next++;
    blk.conv2Bias = next++;
    l.blocks.push_back(blk);
  }
  for (size_t k = 0; k <= arch.fineWidths.size(); ++k) {
    l.fineWeights.push_back(next++);
    l.fineBiases.push_back(next++);
  }
  l.count = next;
  return l;
}

std::vector<int> ParamLayout::coarseIndices() const {
  std::vector<int> out;
  for (size_t k = 0; k < coarseWeights.size(); ++k) {
    out.push_back(coarseWeights[k]);
    out.push_back(coarseBiases[k]);
  }
  return out;
}

std::vector<int> ParamLayout::fineIndices() const {
  std::vector<int> out;
  const int first = codes;
  for (int i = first; i < count; ++i) out.push_back(i);
  return out;
}

namespace {

ad::Tensor32 uniformTensor(std::vector<int> shape, double bound, Rng& rng) {
  ad::Tensor32 t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

// Ground-truth PCA frame of a patch: n = least-variance axis (oriented by face normals),
// t = most-variance axis, b = n x t.
Frame pcaFrame(const Patch& patch) {
  const auto& pos = patch.chart.positions();
  Vec3 mean = Vec3::Zero();
  for (const Vec3& p : pos) mean += p;
  mean /= static_cast<double>(pos.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const Vec3& p : pos) cov += (p - mean) * (p - mean).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Vec3 n = eig.eigenvectors().col(0);
  Vec3 t = eig.eigenvectors().col(2);
  Vec3 areaNormal = Vec3::Zero();
  for (const Face& f : patch.chart.faces()) {
    areaNormal += (pos[f[1]] - pos[f[0]]).cross(pos[f[2]] - pos[f[0]]);
  }
  if (n.dot(areaNormal) < 0.0) n = -n;
  Frame frame;
  frame.col(0) = n;
  frame.col(1) = t;
  frame.col(2) = n.cross(t).normalized();
  return frame;
}

} // namespace

ModelParams buildModel(const ArchConfig& arch, const PatchSet& patches, std::uint64_t seed) {
  arch.validate();
  if (patches.size() == 0) throw ConfigError("build_model: the patch set is empty");
  ModelParams m;
  m.arch = arch;
  m.numPatches = patches.size();
  const ParamLayout layout = ParamLayout::of(arch);
  m.tensors.resize(layout.count);
  m.names.resize(layout.count);
  Rng rng(seed);

  int prev = 2;
  for (size_t k = 0; k < layout.coarseWeights.size(); ++k) {
    const int out = k < arch.coarseWidths.size() ? arch.coarseWidths[k] : 3;
    const double bound = 1.0 / std::sqrt(static_cast<double>(prev));
    m.tensors[layout.coarseWeights[k]] = uniformTensor({out, prev}, bound, rng);
    m.tensors[layout.coarseBiases[k]] = uniformTensor({out}, bound, rng);
    m.names[layout.coarseWeights[k]] = "coarse." + std::to_string(k) + ".weight";
    m.names[layout.coarseBiases[k]] = "coarse." + std::to_string(k) + ".bias";
    prev = out;
  }

  ad::Tensor32 codes({m.numPatches, arch.codeChannels, arch.codeHeight, arch.codeWidth});
  for (float& v : codes.data) v = static_cast<float>(0.01 * rng.normal());
  m.tensors[layout.codes] = std::move(codes);
  m.names[layout.codes] = "codes";

  const int c = arch.cnnChannels;
  if (arch.hasInputAdapter()) {
    const double bound = 1.0 / std::sqrt(9.0 * arch.codeChannels);
    m.tensors[layout.adapterWeight] = uniformTensor({c, arch.codeChannels, 3, 3}, bound, rng);
    m.tensors[layout.adapterBias] = uniformTensor({c}, bound, rng);
    m.names[layout.adapterWeight] = "cnn.adapter.weight";
    m.names[layout.adapterBias] = "cnn.adapter.bias";
  }
  const double convBound = 1.0 / std::sqrt(9.0 * c);
  for (size_t b = 0; b < layout.blocks.size(); ++b) {
    const auto& blk = layout.blocks[b];
    const std::string prefix = "cnn.block" + std::to_string(b);
    m.tensors[blk.conv1Weight] = uniformTensor({c, c, 3, 3}, convBound, rng);
    m.tensors[blk.conv1Bias] = uniformTensor({c}, convBound, rng);
    m.tensors[blk.conv2Weight] = uniformTensor({c, c, 3, 3}, convBound, rng);
    m.tensors[blk.conv2Bias] = uniformTensor({c}, convBound, rng);
    m.names[blk.conv1Weight] = prefix + ".conv1.weight";
    m.names[blk.conv1Bias] = prefix + ".conv1.bias";
    m.names[blk.conv2Weight] = prefix + ".conv2.weight";
    m.names[blk.conv2Bias] = prefix + ".conv2.bias";
  }

  prev = c;
  for (size_t k = 0; k < layout.fineWeights.size(); ++k) {
    const bool last = k == arch.fineWidths.size();
    const int out = last ? 3 : arch.fineWidths[k];
    const double bound = last ? 0.0 : 1.0 / std::sqrt(static_cast<double>(prev));
    m.tensors[layout.fineWeights[k]] = uniformTensor({out, prev}, bound, rng);
    m.tensors[layout.fineBiases[k]] = uniformTensor({out}, bound, rng);
    m.names[layout.fineWeights[k]] = "fine." + std::to_string(k) + ".weight";
    m.names[layout.fineBiases[k]] = "fine." + std::to_string(k) + ".bias";
    prev = out;
  }

  m.pcaFrames = ad::Tensor32({m.numPatches, 9});
  for (int p = 0; p < m.numPatches; ++p) {
    const Frame f = pcaFrame(patches.patches[p]);
    for (int r = 0; r < 3; ++r) {
      for (int col = 0; col < 3; ++col) m.pcaFrames[p * 9 + r * 3 + col] = static_cast<float>(f(r, col));
    }
  }
  return m;
}

QuerySet buildQueries(const PatchSet& patches, const DiskChart& global, std::span<const ChartPoint> points) {
  QuerySet qs;
  qs.q.reserve(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    qs.q.push_back(points[i].uv);
    for (const BlendEntry& e : blendWeights(patches, global, points[i])) {
      qs.entries.push_back({static_cast<int>(i), e.patch, e.local.uv.x(), e.local.uv.y(), e.weight});
    }
  }
  return qs;
}

// ---------------------------------------------------------------------------------------------
// Graph construction

template <class T>
typename ModelGraph<T>::Coarse ModelGraph<T>::coarse(Tp& tape, const ArchConfig& arch, const ParamLayout& layout,
                                                     std::span<const Var> params, std::span<const Vec2> q,
                                                     bool withJacobian) {
  const int n = static_cast<int>(q.size());
  ad::Tensor<T> input({n, 2});
  for (int i = 0; i < n; ++i) {
    input[2 * i] = static_cast<T>(q[i].x());
    input[2 * i + 1] = static_cast<T>(q[i].y());
  }
  Var x = tape.constant(std::move(input));
  Var tu, tv;
  if (withJacobian) {
    ad::Tensor<T> eu({n, 2}), ev({n, 2});
    for (int i = 0; i < n; ++i) {
      eu[2 * i] = T(1);
      ev[2 * i + 1] = T(1);
    }
    tu = tape.constant(std::move(eu));
    tv = tape.constant(std::move(ev));
  }
  const size_t hidden = arch.coarseWidths.size();
  for (size_t k = 0; k < hidden; ++k) {
    const Var W = params[layout.coarseWeights[k]];
    const Var z = tape.linear(x, W, params[layout.coarseBiases[k]]);
    x = tape.softplus(z);
    if (withJacobian) {
      // Tangents pass through the linear part and are scaled by softplus' = sigmoid.
      const Var slope = tape.sigmoid(z);
      tu = tape.mul(tape.linear(tu, W), slope);
      tv = tape.mul(tape.linear(tv, W), slope);
    }
  }
  const Var W = params[layout.coarseWeights[hidden]];
  Coarse out;
  out.position = tape.linear(x, W, params[layout.coarseBiases[hidden]]);
  if (withJacobian) {
    out.ju = tape.linear(tu, W);
    out.jv = tape.linear(tv, W);
  }
  return out;
}

template <class T>
typename ModelGraph<T>::Frames ModelGraph<T>::frames(Tp& tape, const Coarse& c) {
  Frames f;
  f.n = tape.normalizeRows(tape.crossRows(c.ju, c.jv));
  f.t = tape.normalizeRows(c.ju);
  f.b = tape.normalizeRows(tape.crossRows(f.n, f.t));
  return f;
}

template <class T>
typename ModelGraph<T>::Var ModelGraph<T>::decode(Tp& tape, const ArchConfig& arch, const ParamLayout& layout,
                                                  std::span<const Var> params, std::span<const int> patches) {
  (void)arch;
  Var x = tape.selectImages(params[layout.codes], patches);
  if (layout.adapterWeight >= 0) x = tape.conv3x3(x, params[layout.adapterWeight], params[layout.adapterBias]);
  for (const auto& blk : layout.blocks) {
    x = tape.upsample2x(x);
    Var y = tape.conv3x3(x, params[blk.conv1Weight], params[blk.conv1Bias]);
    y = tape.relu(y);
    y = tape.conv3x3(y, params[blk.conv2Weight], params[blk.conv2Bias]);
    x = tape.relu(tape.add(x, y));
  }
  return x;
}

template <class T>
typename ModelGraph<T>::Var ModelGraph<T>::fineMlp(Tp& tape, const ArchConfig& arch, const ParamLayout& layout,
                                                   std::span<const Var> params, Var features) {
  Var x = features;
  for (size_t k = 0; k < layout.fineWeights.size(); ++k) {
    x = tape.linear(x, params[layout.fineWeights[k]], params[layout.fineBiases[k]]);
    if (k < arch.fineWidths.size()) x = tape.relu(x);
  }
  return x;
}

template <class T>
typename ModelGraph<T>::Output ModelGraph<T>::forward(Tp& tape, const ModelParams& meta, std::span<const Var> params,
                                                      const QuerySet& queries, bool withFine) {
  const ArchConfig& arch = meta.arch;
  const ParamLayout layout = ParamLayout::of(arch);
  const bool pca = arch.mode == DisplacementMode::VectorPca;
  Output out;
  out.coarse = coarse(tape, arch, layout, params, queries.q, withFine && !pca);
  if (!withFine) {
    out.position = out.coarse.position;
    return out;
  }

  std::vector<int> touched;
  for (const FineEntry& e : queries.entries) touched.push_back(e.patch);
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
  std::map<int, int> imageOf;
  for (size_t i = 0; i < touched.size(); ++i) imageOf[touched[i]] = static_cast<int>(i);

  Var grids = decode(tape, arch, layout, params, touched);
  if (meta.detailScale != 1.0f) grids = tape.scale(grids, static_cast<T>(meta.detailScale));

  const int e = static_cast<int>(queries.entries.size());
  std::vector<ad::GatherEntry> gather(e);
  std::vector<int> segment(e);
  std::vector<T> weight(e);
  for (int i = 0; i < e; ++i) {
    const FineEntry& fe = queries.entries[i];
    gather[i] = {imageOf[fe.patch], fe.u, fe.v};
    segment[i] = fe.sample;
    weight[i] = static_cast<T>(fe.weight);
  }
  Var h = fineMlp(tape, arch, layout, params, tape.bilinearGather(grids, gather));
  if (pca) {
    ad::Tensor<T> frames({e, 9});
    for (int i = 0; i < e; ++i) {
      for (int k = 0; k < 9; ++k) frames[i * 9 + k] = static_cast<T>(meta.pcaFrames[queries.entries[i].patch * 9 + k]);
    }
    h = tape.applyFrames(tape.constant(std::move(frames)), h);
  }
  out.displacement = tape.segmentWeightedSum(h, segment, weight, queries.size());
  if (pca) {
    out.position = tape.add(out.coarse.position, out.displacement);
    return out;
  }
  out.frames = frames(tape, out.coarse);
  if (arch.mode == DisplacementMode::ScalarNormal) {
    ad::Tensor<T> mask({queries.size(), 3});
    for (int i = 0; i < queries.size(); ++i) mask[3 * i] = T(1);
    out.displacement = tape.mul(out.displacement, tape.constant(std::move(mask)));
  }
  out.position = tape.add(out.coarse.position,
                          tape.frameApply(out.frames.n, out.frames.t, out.frames.b, out.displacement));
  return out;
}

template struct ModelGraph<float>;
template struct ModelGraph<double>;

namespace {

template <class T>
std::vector<char> degenerateRows(const ad::Tensor<T>& ju, const ad::Tensor<T>& jv) {
  const int n = ju.shape[0];
  std::vector<char> out(n, 0);
  for (int i = 0; i < n; ++i) {
    const Vec3 a(ju[3 * i], ju[3 * i + 1], ju[3 * i + 2]);
    const Vec3 b(jv[3 * i], jv[3 * i + 1], jv[3 * i + 2]);
    out[i] = a.cross(b).norm() < 1e-9 ? 1 : 0;
  }
  return out;
}

std::vector<ad::Tape<float>::Var> bindConstants(ad::Tape<float>& tape, const ModelParams& params) {
  std::vector<ad::Tape<float>::Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(tape.constant(t));
  return vars;
}

Vec3 rowOf(const ad::Tensor32& t, int i) { return Vec3(t[3 * i], t[3 * i + 1], t[3 * i + 2]); }

} // namespace

std::vector<char> degenerateFrameRows(const ad::Tensor32& ju, const ad::Tensor32& jv) { return degenerateRows(ju, jv); }
std::vector<char> degenerateFrameRows(const ad::Tensor64& ju, const ad::Tensor64& jv) { return degenerateRows(ju, jv); }

Vec3 coarseForward(const ModelParams& params, const Vec2& q) {
  ad::Tape<float> tape;
  const auto vars = bindConstants(tape, params);
  const Vec2 qs[1] = {q};
  auto c = ModelGraph<float>::coarse(tape, params.arch, params.layout(), vars, qs, false);
  return rowOf(tape.value(c.position), 0);
}

Eigen::Matrix<double, 3, 2> coarseJacobian(const ModelParams& params, const Vec2& q) {
  ad::Tape<float> tape;
  const auto vars = bindConstants(tape, params);
  const Vec2 qs[1] = {q};
  auto c = ModelGraph<float>::coarse(tape, params.arch, params.layout(), vars, qs, true);
  Eigen::Matrix<double, 3, 2> j;
  j.col(0) = rowOf(tape.value(c.ju), 0);
  j.col(1) = rowOf(tape.value(c.jv), 0);
  return j;
}

Frame localFrame(const ModelParams& params, const Vec2& q) {
  ad::Tape<float> tape;
  const auto vars = bindConstants(tape, params);
  const Vec2 qs[1] = {q};
  auto c = ModelGraph<float>::coarse(tape, params.arch, params.layout(), vars, qs, true);
  if (degenerateFrameRows(tape.value(c.ju), tape.value(c.jv))[0]) {
    throw NumericError("local_frame: degenerate coarse Jacobian");
  }
  auto f = ModelGraph<float>::frames(tape, c);
  Frame frame;
  frame.col(0) = rowOf(tape.value(f.n), 0);
  frame.col(1) = rowOf(tape.value(f.t), 0);
  frame.col(2) = rowOf(tape.value(f.b), 0);
  return frame;
}

// ---------------------------------------------------------------------------------------------
// Inference

Evaluator::Evaluator(const ModelParams& params, const PatchSet& patches, const DiskChart& global)
    : params_(params), patches_(patches), global_(global) {
  if (params.numPatches != patches.size()) {
    throw ConfigError("model has " + std::to_string(params.numPatches) + " codes but the layout has " +
                      std::to_string(patches.size()) + " patches");
  }
  const ArchConfig& arch = params.arch;
  const ParamLayout layout = params.layout();
  grids_ = ad::Tensor32({params.numPatches, arch.cnnChannels, arch.gridHeight(), arch.gridWidth()});
  const size_t stride = grids_.size() / static_cast<size_t>(params.numPatches);
  constexpr int kChunk = 16;
  for (int first = 0; first < params.numPatches; first += kChunk) {
    std::vector<int> ids;
    for (int p = first; p < std::min(first + kChunk, params.numPatches); ++p) ids.push_back(p);
    ad::Tape<float> tape;
    const auto vars = bindConstants(tape, params);
    auto grid = ModelGraph<float>::decode(tape, arch, layout, vars, ids);
    if (params.detailScale != 1.0f) grid = tape.scale(grid, params.detailScale);
    const auto& value = tape.value(grid);
    std::copy(value.data.begin(), value.data.end(), grids_.data.begin() + first * stride);
  }
}

std::vector<ChartPoint> Evaluator::locateAll(std::span<const Vec2> q) const {
  std::vector<ChartPoint> pts;
  pts.reserve(q.size());
  for (const Vec2& p : q) {
    auto located = global_.locate(p);
    if (!located) throw NumericError("evaluate: query outside the global chart");
    pts.push_back(*located);
  }
  return pts;
}

EvalBatch Evaluator::evaluate(std::span<const ChartPoint> points) const {
  const ArchConfig& arch = params_.arch;
  const ParamLayout layout = params_.layout();
  const bool pca = arch.mode == DisplacementMode::VectorPca;
  const int c = arch.cnnChannels;
  EvalBatch out;
  const int total = static_cast<int>(points.size());
  out.position.resize(total);
  out.coarse.resize(total);
  out.displacement.resize(total);
  out.frames.resize(total, Frame::Identity());
  std::vector<char> degenerate(total, 0);

  constexpr int kChunk = 4096;
  auto runChunk = [&](int first) {
    const int count = std::min(kChunk, total - first);
    const QuerySet qs = buildQueries(patches_, global_, points.subspan(first, count));
    ad::Tape<float> tape;
    const auto vars = bindConstants(tape, params_);
    auto coarse = ModelGraph<float>::coarse(tape, arch, layout, vars, qs.q, !pca);

    const int e = static_cast<int>(qs.entries.size());
    ad::Tensor32 features({e, c});
    std::vector<int> segment(e);
    std::vector<float> weight(e);
    for (int i = 0; i < e; ++i) {
      const FineEntry& fe = qs.entries[i];
      ad::bilinearSample(grids_, ad::GatherEntry{fe.patch, fe.u, fe.v}, features.data.data() + i * c);
      segment[i] = fe.sample;
      weight[i] = static_cast<float>(fe.weight);
    }
    auto h = ModelGraph<float>::fineMlp(tape, arch, layout, vars, tape.constant(std::move(features)));
    if (pca) {
      ad::Tensor32 frames({e, 9});
      for (int i = 0; i < e; ++i) {
        std::copy_n(params_.pcaFrames.data.begin() + qs.entries[i].patch * 9, 9, frames.data.begin() + i * 9);
      }
      h = tape.applyFrames(tape.constant(std::move(frames)), h);
    }
    auto disp = tape.segmentWeightedSum(h, segment, weight, count);
    const auto& pv = tape.value(coarse.position);
    const auto& dv = tape.value(disp);
    for (int i = 0; i < count; ++i) {
      out.coarse[first + i] = rowOf(pv, i);
      out.displacement[first + i] = rowOf(dv, i);
    }
    if (!pca) {
      const auto deg = degenerateFrameRows(tape.value(coarse.ju), tape.value(coarse.jv));
      auto f = ModelGraph<float>::frames(tape, coarse);
      for (int i = 0; i < count; ++i) {
        degenerate[first + i] = deg[i];
        Frame& fr = out.frames[first + i];
        fr.col(0) = rowOf(tape.value(f.n), i);
        fr.col(1) = rowOf(tape.value(f.t), i);
        fr.col(2) = rowOf(tape.value(f.b), i);
      }
    }
  };
  const int chunks = (total + kChunk - 1) / kChunk;
  const int workers = std::min(workers_, chunks);
  if (workers <= 1) {
    for (int c = 0; c < chunks; ++c) runChunk(c * kChunk);
  } else {
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (int c = next++; c < chunks; c = next++) runChunk(c * kChunk);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  if (!pca) {
    // Degenerate frames borrow the nearest previous valid frame (or the next one at the start).
    int lastValid = -1;
    for (int i = 0; i < total; ++i) {
      if (!degenerate[i]) {
        lastValid = i;
        continue;
      }
      ++out.degenerateFrames;
      if (lastValid >= 0) {
        out.frames[i] = out.frames[lastValid];
      } else {
        auto next = std::find(degenerate.begin() + i, degenerate.end(), 0);
        if (next != degenerate.end()) {
          out.frames[i] = out.frames[next - degenerate.begin()];
        } else {
          out.frames[i] << 0, 1, 0, 0, 0, 1, 1, 0, 0;
        }
      }
    }
  }
  for (int i = 0; i < total; ++i) {
    Vec3 d = out.displacement[i];
    if (arch.mode == DisplacementMode::ScalarNormal) d = Vec3(d[0], 0.0, 0.0);
    out.displacement[i] = d;
    out.position[i] = pca ? Vec3(out.coarse[i] + d) : Vec3(out.coarse[i] + out.frames[i] * d);
  }
  return out;
}

EvalBatch Evaluator::evaluate(std::span<const Vec2> q) const {
  const auto pts = locateAll(q);
  return evaluate(std::span<const ChartPoint>(pts));
}

Vec3 Evaluator::evaluate(const Vec2& q) const {
  const Vec2 qs[1] = {q};
  return evaluate(std::span<const Vec2>(qs)).position[0];
}

Vec3 Evaluator::fineForward(const Vec2& q) const {
  const Vec2 qs[1] = {q};
  return evaluate(std::span<const Vec2>(qs)).displacement[0];
}

std::vector<Eigen::VectorXd> Evaluator::features(std::span<const ChartPoint> points) const {
  const int c = params_.arch.cnnChannels;
  const QuerySet qs = buildQueries(patches_, global_, points);
  std::vector<Eigen::VectorXd> out(points.size(), Eigen::VectorXd::Zero(c));
  std::vector<float> buf(c);
  for (const FineEntry& fe : qs.entries) {
    ad::bilinearSample(grids_, ad::GatherEntry{fe.patch, fe.u, fe.v}, buf.data());
    for (int k = 0; k < c; ++k) out[fe.sample][k] += fe.weight * buf[k];
  }
  return out;
}

ModelParams scaleDetails(const ModelParams& params, double factor) {
  if (!(factor >= 0.0)) throw ConfigError("scale_details: factor must be >= 0");
  ModelParams out = params;
  out.detailScale = static_cast<float>(params.detailScale * factor);
  return out;
}

ModelParams transferDetails(const ModelParams& source, const ModelParams& targetCoarse) {
  if (source.numPatches != targetCoarse.numPatches) {
    throw TopologyError("transfer_details: patch counts differ (" + std::to_string(source.numPatches) + " vs " +
                        std::to_string(targetCoarse.numPatches) + ")");
  }
  ModelParams hybrid = source;
  const ParamLayout src = source.layout();
  const ParamLayout dst = targetCoarse.layout();
  hybrid.arch.coarseWidths = targetCoarse.arch.coarseWidths;
  const ParamLayout mixed = hybrid.layout();
  std::vector<ad::Tensor32> tensors(mixed.count);
  std::vector<std::string> names(mixed.count);
  for (size_t k = 0; k < mixed.coarseWeights.size(); ++k) {
    tensors[mixed.coarseWeights[k]] = targetCoarse.tensors[dst.coarseWeights[k]];
    tensors[mixed.coarseBiases[k]] = targetCoarse.tensors[dst.coarseBiases[k]];
    names[mixed.coarseWeights[k]] = targetCoarse.names[dst.coarseWeights[k]];
    names[mixed.coarseBiases[k]] = targetCoarse.names[dst.coarseBiases[k]];
  }
  const auto srcFine = src.fineIndices();
  const auto mixedFine = mixed.fineIndices();
  for (size_t k = 0; k < srcFine.size(); ++k) {
    tensors[mixedFine[k]] = source.tensors[srcFine[k]];
    names[mixedFine[k]] = source.names[srcFine[k]];
  }
  hybrid.tensors = std::move(tensors);
  hybrid.names = std::move(names);
  return hybrid;
}

std::vector<double> activationMap(const Evaluator& evaluator, std::span<const ChartPoint> region,
                                  std::span<const ChartPoint> points) {
  if (region.empty()) throw ConfigError("activation_map: empty region");
  const auto regionFeatures = evaluator.features(region);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(regionFeatures.front().size());
  for (const auto& f : regionFeatures) mean += f;
  mean /= static_cast<double>(regionFeatures.size());
  const double meanNorm = mean.norm();
  std::vector<double> scores;
  scores.reserve(points.size());
  for (const auto& f : evaluator.features(points)) {
    const double denom = meanNorm * f.norm();
    scores.push_back(denom > 0.0 ? std::clamp(mean.dot(f) / denom, -1.0, 1.0) : 0.0);
  }
  return scores;
}

} // namespace ncs
