#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace ncs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Face = std::array<int, 3>;

// Indexed triangle surface.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  int numVertices() const { return static_cast<int>(vertices.size()); }
  int numFaces() const { return static_cast<int>(faces.size()); }
  double faceArea(int f) const;
  Vec3 facePoint(int f, const Vec3& bary) const;
};

struct SurfaceSample {
  Vec3 position;
  int face = -1;
  Vec3 barycentric;
};

struct LoadReport {
  int vertexCount = 0;
  int faceCount = 0;
  int nonManifoldEdges = 0;
  int degenerateFacesDropped = 0;
};

// ASCII OBJ subset: "v" and "f" records. Polygons are fan-triangulated, normals and
// texture coordinates are ignored. Zero-area faces are dropped.
TriMesh loadMesh(const std::filesystem::path& path, LoadReport* report = nullptr);
TriMesh parseObj(std::istream& in, const std::string& name = "<stream>", LoadReport* report = nullptr);

// Writes vertices with %.9g so that a reload reproduces them to float precision.
void exportMesh(const TriMesh& mesh, const std::filesystem::path& path);

// Translate the bounding-box center to the origin and scale the max vertex norm to 1.
TriMesh normalizeUnitSphere(const TriMesh& mesh);

// Largest extent of the mesh along any coordinate axis.
double maxAxisExtent(const TriMesh& mesh);

// Vertex-vertex adjacency with Euclidean edge lengths.
struct EdgeGraph {
  std::vector<std::vector<std::pair<int, double>>> adjacency;
  static EdgeGraph build(const TriMesh& mesh);
};

// Dijkstra over the edge graph. Unreached vertices get +inf.
std::vector<double> vertexGeodesics(const TriMesh& mesh, int source);
std::vector<double> vertexGeodesics(const EdgeGraph& graph, int source,
                                    double cutoff = std::numeric_limits<double>::infinity());

// Area-weighted uniform sampling; deterministic for a fixed seed.
std::vector<SurfaceSample> sampleSurface(const TriMesh& mesh, int n, std::uint64_t seed);

// Uniform hash grid for nearest-neighbor queries on a frozen point set.
class PointGrid {
public:
  explicit PointGrid(std::span<const Vec3> points);
  // Squared distance to the nearest stored point.
  double nearestSquaredDistance(const Vec3& p) const;
  int nearest(const Vec3& p) const;

private:
  std::vector<Vec3> points_;
  Vec3 origin_;
  double cell_ = 1.0;
  std::array<int, 3> dims_{1, 1, 1};
  std::vector<int> cellStart_;
  std::vector<int> order_;
  bool brute_ = false;

  long cellIndex(int x, int y, int z) const {
    return (static_cast<long>(z) * dims_[1] + y) * dims_[0] + x;
  }
};

// Bidirectional Chamfer distance: mean squared nearest-neighbor distance from a to b
// plus the same from b to a.
double chamferDistance(std::span<const Vec3> a, std::span<const Vec3> b);

std::vector<Vec3> positionsOf(std::span<const SurfaceSample> samples);

} // namespace ncs
