#pragma once

#include "ncs/geometry.h"
#include "ncs/parameterization.h"

#include <cstdint>
#include <vector>

namespace ncs {

struct Patch {
  int center = -1;
  std::vector<int> vertices;  // mesh vertex ids, sorted
  std::vector<int> faces;     // mesh face ids, sorted
  DiskChart chart;
};

struct PatchSet {
  std::vector<Patch> patches;
  std::vector<std::vector<int>> vertexPatches;  // covering patches per mesh vertex
  std::vector<std::vector<int>> facePatches;    // patches whose submesh holds each mesh face
  double rho = 0.04;
  double eta = 0.5;
  double radius = 0.0;  // absolute geodesic radius, rho * max axis extent

  int size() const { return static_cast<int>(patches.size()); }
  // Mean number of covering patches per vertex.
  double meanOverlap() const;

  // Rebuild vertexPatches/facePatches from the patch list.
  void rebuildCoverage(int numVertices, int numFaces);
};

// Iterative geodesic patch decomposition. Centers are drawn uniformly from vertices that
// touch an uncovered face and are not forbidden; each patch collects the faces within
// rho * (max axis extent) of its center, grown as a topological disk, and gets its own chart.
// Members are marked forbidden with probability eta.
PatchSet extractPatches(const TriMesh& mesh, double rho, double eta, std::uint64_t seed);

// Signed 2D distance to the chart boundary polygon: negative inside, positive outside.
double boundarySignedDistance(const DiskChart& chart, const Vec2& uv);

struct BlendEntry {
  int patch = -1;
  double weight = 0.0;
  ChartPoint local;  // l_i(q) in the patch chart
};

// Normalized blend weights of the patches covering q. When every raw weight is zero the
// covering patches share uniform weights. Points within 1e-12 of a chart boundary count as on it.
std::vector<BlendEntry> blendWeights(const PatchSet& patches, const DiskChart& global, const ChartPoint& q);
std::vector<BlendEntry> blendWeights(const PatchSet& patches, const DiskChart& global, const Vec2& q);

} // namespace ncs
