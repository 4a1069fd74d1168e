#pragma once

#include "ncs/geometry.h"

#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace ncs {

// A point in a chart: containing chart triangle (local index) and barycentric weights.
struct ChartPoint {
  Vec2 uv;
  int face = -1;
  Vec3 barycentric;
};

// Piecewise-linear bijection between a disk-topology (sub)mesh and a region of the unit disk.
class DiskChart {
public:
  DiskChart() = default;

  // Local-to-mesh index maps.
  const std::vector<int>& vertexIds() const { return vertexIds_; }
  const std::vector<int>& faceIds() const { return faceIds_; }
  const std::vector<Face>& faces() const { return faces_; }
  const std::vector<Vec3>& positions() const { return positions_; }
  const std::vector<Vec2>& uv() const { return uv_; }
  // Counter-clockwise boundary loop, local vertex indices.
  const std::vector<int>& boundary() const { return boundary_; }

  int numFaces() const { return static_cast<int>(faces_.size()); }
  int localVertex(int meshVertex) const;
  int localFace(int meshFace) const;

  // Triangle containing q, tolerant to 1e-9 in barycentric coordinates.
  std::optional<ChartPoint> locate(const Vec2& q) const;
  // Barycentric lift of a located point; the same data always gives the same 3D point.
  Vec3 lift(const ChartPoint& p) const;
  // locate + lift. Throws NumericError when q lies outside every triangle.
  Vec3 lift(const Vec2& q) const;

  ChartPoint pointOnFace(int localFace, const Vec3& barycentric) const;

  double signedArea(int localFace) const;
  int flipCount() const;

  // Assemble a chart from precomputed data (checkpoint load). Rebuilds lookup structures.
  static DiskChart fromData(std::vector<int> vertexIds, std::vector<int> faceIds, std::vector<Face> faces,
                            std::vector<Vec3> positions, std::vector<Vec2> uv, std::vector<int> boundary);

private:
  friend DiskChart embedDisk(const TriMesh&, std::span<const int>);

  std::vector<int> vertexIds_;
  std::vector<int> faceIds_;
  std::vector<Face> faces_;
  std::vector<Vec3> positions_;
  std::vector<Vec2> uv_;
  std::vector<int> boundary_;

  std::unordered_map<int, int> vertexLookup_;
  std::unordered_map<int, int> faceLookup_;

  // Uniform grid over the uv bounding box holding overlapping triangles.
  Vec2 gridLo_ = Vec2::Zero();
  double gridCell_ = 1.0;
  int gridRes_[2] = {1, 1};
  std::vector<int> gridStart_;
  std::vector<int> gridItems_;

  void buildLookups();
  Vec3 barycentricOf(int localFace, const Vec2& q) const;
};

// Mean-value (Floater) convex-combination embedding of a disk-topology submesh with the
// boundary pinned to the unit circle by cumulative arc length. faceIds selects the submesh.
DiskChart embedDisk(const TriMesh& mesh, std::span<const int> faceIds);
DiskChart embedDisk(const TriMesh& mesh);

// Disk topology check of a face subset: edge-connected, single boundary loop, Euler characteristic 1.
// Returns an empty string when valid, otherwise a description of the violation.
std::string diskTopologyViolation(const TriMesh& mesh, std::span<const int> faceIds);

// l_i(q): the global location re-expressed in the patch chart. Empty when the global
// triangle is not part of the patch.
std::optional<ChartPoint> globalToLocal(const DiskChart& global, const DiskChart& patch, const ChartPoint& q);
std::optional<ChartPoint> globalToLocal(const DiskChart& global, const DiskChart& patch, const Vec2& q);

struct TriangleDistortion {
  double sigmaMax = 0.0;
  double sigmaMin = 0.0;
  double scale = 0.0;      // sigmaMax * sigmaMin
  double conformal = 0.0;  // sigmaMax / sigmaMin
};

// Singular values of the per-triangle 2D -> 3D linear map. Degenerate 2D triangles report +inf.
std::vector<TriangleDistortion> chartDistortion(const DiskChart& chart);

} // namespace ncs
