#include "ncs/training.h"

#include "ncs/errors.h"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <ostream>

namespace ncs {

void TrainSchedule::validate() const {
  if (warmupIters < 0) throw ConfigError("warmup_iters must be >= 0");
  if (totalIters < 0) throw ConfigError("total_iters must be >= 0");
  if (!(baseLr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(coarseFloorLr >= 0.0) || coarseFloorLr > baseLr) throw ConfigError("coarse_floor_lr must be in [0, base_lr]");
}

ScheduleValues scheduleAt(const TrainSchedule& s, long t) {
  ScheduleValues v;
  const double progress = s.warmupIters > 0 ? std::min(static_cast<double>(std::max(t, 0L)) / s.warmupIters, 1.0) : 1.0;
  v.lambda = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  if (progress >= 1.0) v.lambda = 0.0;
  v.lrCoarse = s.baseLr * v.lambda;
  if (progress >= 1.0) v.lrCoarse = std::max(v.lrCoarse, s.coarseFloorLr);
  v.lrFine = s.baseLr - s.baseLr * v.lambda;
  return v;
}

TrainBatch sampleBatch(const TriMesh& mesh, const DiskChart& global, const PatchSet& patches, int n,
                       std::uint64_t seed) {
  TrainBatch batch;
  const auto samples = sampleSurface(mesh, n, seed);
  batch.points.reserve(samples.size());
  batch.targets.reserve(samples.size());
  for (const SurfaceSample& s : samples) {
    const int local = global.localFace(s.face);
    if (local < 0) throw TopologyError("sample_batch: face " + std::to_string(s.face) + " missing from the global chart");
    const ChartPoint p = global.pointOnFace(local, s.barycentric);
    batch.points.push_back(p);
    batch.targets.push_back(global.lift(p));
  }
  batch.queries = buildQueries(patches, global, batch.points);
  return batch;
}

TrainBatch selectRows(const TrainBatch& batch, std::span<const int> rows) {
  TrainBatch out;
  std::vector<int> remap(batch.size(), -1);
  for (size_t k = 0; k < rows.size(); ++k) {
    remap[rows[k]] = static_cast<int>(k);
    out.points.push_back(batch.points[rows[k]]);
    out.targets.push_back(batch.targets[rows[k]]);
    out.queries.q.push_back(batch.queries.q[rows[k]]);
  }
  for (const FineEntry& e : batch.queries.entries) {
    if (remap[e.sample] < 0) continue;
    FineEntry copy = e;
    copy.sample = remap[e.sample];
    out.queries.entries.push_back(copy);
  }
  return out;
}

template <class T>
LossGraph<T> buildLoss(ad::Tape<T>& tape, const ModelParams& meta, std::span<const typename ad::Tape<T>::Var> params,
                       const TrainBatch& batch, double lambda) {
  if (batch.size() == 0) throw ConfigError("loss on an empty batch");
  LossGraph<T> g;
  ad::Tensor<T> target({batch.size(), 3});
  for (int i = 0; i < batch.size(); ++i) {
    for (int k = 0; k < 3; ++k) target[3 * i + k] = static_cast<T>(batch.targets[i][k]);
  }
  const auto s = tape.constant(std::move(target));
  g.model = ModelGraph<T>::forward(tape, meta, params, batch.queries, true);
  g.joint = tape.meanSquaredError(g.model.position, s);
  g.reg = tape.meanSquaredError(g.model.coarse.position, s);
  g.total = tape.combine(g.joint, static_cast<T>(1.0 - lambda), g.reg, static_cast<T>(lambda));
  return g;
}

template LossGraph<float> buildLoss<float>(ad::Tape<float>&, const ModelParams&,
                                           std::span<const ad::Tape<float>::Var>, const TrainBatch&, double);
template LossGraph<double> buildLoss<double>(ad::Tape<double>&, const ModelParams&,
                                             std::span<const ad::Tape<double>::Var>, const TrainBatch&, double);

namespace {

std::vector<ad::Tape<float>::Var> constants(ad::Tape<float>& tape, const ModelParams& params) {
  std::vector<ad::Tape<float>::Var> vars;
  for (const auto& t : params.tensors) vars.push_back(tape.constant(t));
  return vars;
}

} // namespace

double lossJoint(const ModelParams& params, const TrainBatch& batch) {
  ad::Tape<float> tape;
  const auto vars = constants(tape, params);
  return tape.value(buildLoss<float>(tape, params, vars, batch, 0.0).joint)[0];
}

double lossReg(const ModelParams& params, const TrainBatch& batch) {
  if (batch.size() == 0) throw ConfigError("loss on an empty batch");
  ad::Tape<float> tape;
  const auto vars = constants(tape, params);
  auto c = ModelGraph<float>::coarse(tape, params.arch, params.layout(), vars, batch.queries.q, false);
  ad::Tensor32 target({batch.size(), 3});
  for (int i = 0; i < batch.size(); ++i) {
    for (int k = 0; k < 3; ++k) target[3 * i + k] = static_cast<float>(batch.targets[i][k]);
  }
  return tape.value(tape.meanSquaredError(c.position, tape.constant(std::move(target))))[0];
}

void writeLogHeader(std::ostream& out) { out << "iter,lambda,lr_c,lr_f,L,L_joint,L_reg,wall_ms\n"; }

void writeLogRow(std::ostream& out, const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.1f\n", r.iter, r.lambda, r.lrCoarse, r.lrFine,
                r.loss, r.joint, r.reg, r.wallMs);
  out << buf;
}

std::uint64_t batchSeed(std::uint64_t seed, long t) {
  // splitmix64 finalizer over (seed, t).
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(t + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

FitResult fit(const TriMesh& mesh, const DiskChart& global, const PatchSet& patches, TrainState& state,
              const FitOptions& options) {
  options.schedule.validate();
  if (options.batchSize < 1) throw ConfigError("batch size must be >= 1");
  FitResult result;
  ModelParams& params = state.params;
  if (state.optimizer.state().size() != params.tensors.size()) state.optimizer.init(params.tensors);
  const ParamLayout layout = params.layout();
  const auto coarseIdx = layout.coarseIndices();
  const auto fineIdx = layout.fineIndices();
  const bool pca = params.arch.mode == DisplacementMode::VectorPca;
  const long stop = options.stopAt >= 0 ? std::min(options.stopAt, options.schedule.totalIters)
                                         : options.schedule.totalIters;
  const auto start = std::chrono::steady_clock::now();

  while (state.iteration < stop) {
    const long t = state.iteration + 1;
    const ScheduleValues sv = scheduleAt(options.schedule, state.iteration);
    TrainBatch batch = sampleBatch(mesh, global, patches, options.batchSize, batchSeed(options.seed, t));

    // Samples whose coarse frame is degenerate are dropped and the step is recorded again.
    auto tape = std::make_unique<ad::Tape<float>>();
    std::vector<ad::Tape<float>::Var> leaves;
    LossGraph<float> loss;
    for (int attempt = 0;; ++attempt) {
      leaves.clear();
      for (const auto& p : params.tensors) leaves.push_back(tape->leaf(p));
      loss = buildLoss<float>(*tape, params, leaves, batch, sv.lambda);
      if (pca || attempt > 0) break;
      const auto deg = degenerateFrameRows(tape->value(loss.model.coarse.ju), tape->value(loss.model.coarse.jv));
      std::vector<int> keep;
      for (int i = 0; i < batch.size(); ++i) {
        if (!deg[i]) keep.push_back(i);
      }
      if (static_cast<int>(keep.size()) == batch.size()) break;
      if (keep.empty()) throw NumericError("fit: every sample of iteration " + std::to_string(t) + " has a degenerate frame");
      result.degenerateDropped += batch.size() - static_cast<long>(keep.size());
      batch = selectRows(batch, keep);
      tape = std::make_unique<ad::Tape<float>>();
    }
    const double total = tape->value(loss.total)[0];
    if (!std::isfinite(total)) throw NumericError("fit: non-finite loss at iteration " + std::to_string(t));
    tape->backward(loss.total);
    std::vector<ad::Tensor32> grads;
    grads.reserve(leaves.size());
    for (auto v : leaves) grads.push_back(tape->grad(v));
    if (!ad::allFinite(grads)) throw NumericError("fit: non-finite gradient at iteration " + std::to_string(t));
    state.optimizer.step(params.tensors, grads, coarseIdx, sv.lrCoarse);
    state.optimizer.step(params.tensors, grads, fineIdx, sv.lrFine);
    state.iteration = t;
    result.finalLoss = total;

    if (t % std::max(options.logEvery, 1L) == 0 || t == stop) {
      LogRow row;
      row.iter = t;
      row.lambda = sv.lambda;
      row.lrCoarse = sv.lrCoarse;
      row.lrFine = sv.lrFine;
      row.loss = total;
      row.joint = tape->value(loss.joint)[0];
      row.reg = tape->value(loss.reg)[0];
      row.wallMs = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      if (options.onLog) options.onLog(row);
      result.log.push_back(row);
    }
    if (options.onCheckpoint && options.checkpointEvery > 0 && t % options.checkpointEvery == 0) {
      options.onCheckpoint(state);
    }
  }
  return result;
}

} // namespace ncs
