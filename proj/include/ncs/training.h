#pragma once

#include "ncs/autodiff.h"
#include "ncs/geometry.h"
#include "ncs/model.h"
#include "ncs/parameterization.h"
#include "ncs/patching.h"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace ncs {

struct TrainSchedule {
  long warmupIters = 100000;
  long totalIters = 400000;
  double baseLr = 1e-4;
  // Coarse learning rate once warm-up is over. 0 freezes the coarse branch.
  double coarseFloorLr = 1e-6;

  void validate() const;
};

struct ScheduleValues {
  double lambda = 1.0;
  double lrCoarse = 0.0;
  double lrFine = 0.0;
};

// lambda(t) = 0.5 (1 + cos(pi min(t / warmup, 1))); lr_c = base lambda (floored after warm-up);
// lr_f = base - base lambda.
ScheduleValues scheduleAt(const TrainSchedule& schedule, long t);

struct TrainBatch {
  QuerySet queries;
  std::vector<ChartPoint> points;
  std::vector<Vec3> targets;  // s(q)
  int size() const { return queries.size(); }
};

// Area-uniform samples carried into the global chart, with covering-patch data precomputed.
TrainBatch sampleBatch(const TriMesh& mesh, const DiskChart& global, const PatchSet& patches, int n,
                       std::uint64_t seed);

// Keeps only the listed rows.
TrainBatch selectRows(const TrainBatch& batch, std::span<const int> rows);

template <class T>
struct LossGraph {
  using Var = typename ad::Tape<T>::Var;
  Var total, joint, reg;
  typename ModelGraph<T>::Output model;
};

// L = (1 - lambda) L_joint + lambda L_reg on a tape.
template <class T>
LossGraph<T> buildLoss(ad::Tape<T>& tape, const ModelParams& meta, std::span<const typename ad::Tape<T>::Var> params,
                       const TrainBatch& batch, double lambda);

double lossJoint(const ModelParams& params, const TrainBatch& batch);
double lossReg(const ModelParams& params, const TrainBatch& batch);

struct TrainState {
  ModelParams params;
  ad::RmsProp optimizer;
  long iteration = 0;
};

struct LogRow {
  long iter = 0;
  double lambda = 0.0, lrCoarse = 0.0, lrFine = 0.0;
  double loss = 0.0, joint = 0.0, reg = 0.0;
  double wallMs = 0.0;
};

void writeLogHeader(std::ostream& out);
void writeLogRow(std::ostream& out, const LogRow& row);

struct FitOptions {
  TrainSchedule schedule;
  int batchSize = 2048;
  std::uint64_t seed = 1;
  // Hook called every checkpointEvery iterations (0 disables) with the current state.
  long checkpointEvery = 0;
  std::function<void(const TrainState&)> onCheckpoint;
  // Receives a row after every logEvery iterations (and the last one).
  long logEvery = 1;
  std::function<void(const LogRow&)> onLog;
  // Iteration count at which to stop early (resumable); -1 = schedule total.
  long stopAt = -1;
};

struct FitResult {
  double finalLoss = 0.0;
  long degenerateDropped = 0;
  std::vector<LogRow> log;
};

// Runs iterations state.iteration+1 .. total. A non-finite loss or gradient throws NumericError
// and leaves state at the last good iteration.
FitResult fit(const TriMesh& mesh, const DiskChart& global, const PatchSet& patches, TrainState& state,
              const FitOptions& options);

// Seed of the batch drawn at iteration t.
std::uint64_t batchSeed(std::uint64_t seed, long t);

} // namespace ncs
