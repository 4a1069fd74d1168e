#pragma once

#include "ncs/checkpoint.h"
#include "ncs/config.h"
#include "ncs/model.h"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace ncs {

// Worker count for evaluation fan-out, from NCS_WORKERS (default 1).
int workerCount();

// Mesh, global chart and patches for a run. With layout_from set, the charts of that checkpoint
// are re-seated on this mesh (identical connectivity required).
struct Layout {
  TriMesh mesh;
  DiskChart global;
  PatchSet patches;
};
Layout prepareLayout(const RunConfig& config);
Layout rebaseLayout(const TriMesh& mesh, const DiskChart& global, const PatchSet& patches);

struct FitSummary {
  Checkpoint checkpoint;
  FitResult result;
  std::filesystem::path checkpointPath;
  std::filesystem::path warmupPath;  // empty when the run did not reach the end of warm-up
};

// Parameterize, patch, build and fit. Writes the checkpoint, the CSV log and, when the run
// crosses the end of warm-up, a snapshot "<name>.warmup". Progress goes to out.
FitSummary runFit(const RunConfig& config, std::ostream& out);

enum class ReconstructMode { Vertices, Dense };
ReconstructMode reconstructModeFromString(const std::string& text);

struct Reconstruction {
  TriMesh mesh;
  int degenerateFrames = 0;
};

// Vertices mode evaluates g at every mesh vertex's global UV and keeps the connectivity. Dense
// mode evaluates a res x res grid over [-1,1]^2 restricted to the chart image. coarseOnly
// drops the fine branch.
Reconstruction reconstruct(const Checkpoint& ckpt, const ModelParams& params, ReconstructMode mode, int resolution = 512,
                           bool coarseOnly = false);
Reconstruction reconstruct(const Checkpoint& ckpt, ReconstructMode mode = ReconstructMode::Vertices,
                           int resolution = 512, bool coarseOnly = false);

struct EvalReport {
  double chamfer = 0.0;  // raw bidirectional Chamfer
  int samples = 0;
  long parameters = 0;
  int degenerateFrames = 0;
  std::string toJson() const;
  std::string toText() const;
};

// Samples the same number of points (same seed) from the reconstruction and ground truth.
EvalReport evaluateReconstruction(const TriMesh& reconstruction, const TriMesh& groundTruth, int samples,
                                  std::uint64_t seed = 12345);
// Accepts a checkpoint or an OBJ as the first argument.
EvalReport runEval(const std::filesystem::path& modelOrMesh, const std::filesystem::path& meshPath, int samples,
                   bool coarseOnly = false);

Reconstruction runEdit(const Checkpoint& ckpt, double factor);
// Source fine branch on the target's coarse branch, reconstructed over the target layout.
Reconstruction runTransfer(const Checkpoint& source, const Checkpoint& target);

struct PatchRow {
  int id = 0;
  int vertices = 0;
  int faces = 0;
  int flips = 0;
  double maxScale = 0.0;
  double maxConformal = 0.0;
};
struct PatchReport {
  std::vector<PatchRow> rows;
  double meanOverlap = 0.0;
  std::vector<int> overlapHistogram;  // vertices covered by k patches at index k
  std::string csv() const;
  std::string summary() const;
};
PatchReport patchReport(const PatchSet& patches, int numVertices);

} // namespace ncs
