#include "ncs/geometry.h"

#include "ncs/errors.h"
#include "ncs/random.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <queue>
#include <sstream>

namespace ncs {

double TriMesh::faceArea(int f) const {
  const Face& t = faces[f];
  return 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
}

Vec3 TriMesh::facePoint(int f, const Vec3& bary) const {
  const Face& t = faces[f];
  return bary[0] * vertices[t[0]] + bary[1] * vertices[t[1]] + bary[2] * vertices[t[2]];
}

namespace {

// OBJ face tokens look like "7", "7/1", "7//3" or "7/1/3"; negative indices are relative.
int parseFaceIndex(const std::string& token, int vertexCount, const std::string& name, int line) {
  const std::string head = token.substr(0, token.find('/'));
  int idx = 0;
  try {
    size_t used = 0;
    idx = std::stoi(head, &used);
    if (used != head.size()) throw std::invalid_argument(head);
  } catch (const std::exception&) {
    throw IoError(name + ":" + std::to_string(line) + ": bad face index '" + token + "'");
  }
  if (idx < 0) idx = vertexCount + idx + 1;
  if (idx < 1 || idx > vertexCount) {
    throw IoError(name + ":" + std::to_string(line) + ": face index " + head + " out of range (" +
                  std::to_string(vertexCount) + " vertices)");
  }
  return idx - 1;
}

} // namespace

TriMesh parseObj(std::istream& in, const std::string& name, LoadReport* report) {
  TriMesh mesh;
  LoadReport rep;
  std::string lineText;
  int lineNo = 0;
  while (std::getline(in, lineText)) {
    ++lineNo;
    std::istringstream ls(lineText);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ls >> p[0] >> p[1] >> p[2])) {
        throw IoError(name + ":" + std::to_string(lineNo) + ": malformed vertex");
      }
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<int> poly;
      std::string tok;
      while (ls >> tok) poly.push_back(parseFaceIndex(tok, mesh.numVertices(), name, lineNo));
      if (poly.size() < 3) {
        throw IoError(name + ":" + std::to_string(lineNo) + ": face with fewer than 3 vertices");
      }
      for (size_t k = 1; k + 1 < poly.size(); ++k) mesh.faces.push_back({poly[0], poly[k], poly[k + 1]});
    }
  }
  if (mesh.vertices.empty() || mesh.faces.empty()) throw IoError(name + ": empty mesh");

  std::vector<Face> kept;
  kept.reserve(mesh.faces.size());
  for (int f = 0; f < mesh.numFaces(); ++f) {
    const Face& t = mesh.faces[f];
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2] || mesh.faceArea(f) <= 0.0) {
      ++rep.degenerateFacesDropped;
      continue;
    }
    kept.push_back(t);
  }
  mesh.faces = std::move(kept);
  if (mesh.faces.empty()) throw IoError(name + ": empty mesh (all faces degenerate)");

  std::map<std::pair<int, int>, int> edgeUse;
  for (const Face& t : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = t[k], b = t[(k + 1) % 3];
      ++edgeUse[{std::min(a, b), std::max(a, b)}];
    }
  }
  for (const auto& [e, n] : edgeUse) {
    if (n > 2) ++rep.nonManifoldEdges;
  }
  if (rep.nonManifoldEdges > 0) {
    std::cerr << "warning: " << name << ": " << rep.nonManifoldEdges << " non-manifold edges\n";
  }
  rep.vertexCount = mesh.numVertices();
  rep.faceCount = mesh.numFaces();
  if (report) *report = rep;
  return mesh;
}

TriMesh loadMesh(const std::filesystem::path& path, LoadReport* report) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mesh " + path.string());
  return parseObj(in, path.string(), report);
}

void exportMesh(const TriMesh& mesh, const std::filesystem::path& path) {
  if (mesh.vertices.empty() || mesh.faces.empty()) throw IoError("refusing to export an empty mesh");
  std::FILE* out = std::fopen(path.string().c_str(), "w");
  if (!out) throw IoError("cannot write " + path.string());
  for (const Vec3& v : mesh.vertices) std::fprintf(out, "v %.9g %.9g %.9g\n", v[0], v[1], v[2]);
  for (const Face& f : mesh.faces) std::fprintf(out, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
  if (std::fclose(out) != 0) throw IoError("write failed for " + path.string());
}

TriMesh normalizeUnitSphere(const TriMesh& mesh) {
  if (mesh.vertices.empty()) throw IoError("cannot normalize an empty mesh");
  Vec3 lo = mesh.vertices.front(), hi = lo;
  for (const Vec3& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const Vec3 center = 0.5 * (lo + hi);
  double radius = 0.0;
  for (const Vec3& v : mesh.vertices) radius = std::max(radius, (v - center).norm());
  if (!(radius > 1e-12)) throw NumericError("degenerate scale: all vertices coincide");
  TriMesh out = mesh;
  for (Vec3& v : out.vertices) v = (v - center) / radius;
  return out;
}

double maxAxisExtent(const TriMesh& mesh) {
  Vec3 lo = mesh.vertices.front(), hi = lo;
  for (const Vec3& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  return (hi - lo).maxCoeff();
}

EdgeGraph EdgeGraph::build(const TriMesh& mesh) {
  EdgeGraph g;
  g.adjacency.resize(mesh.vertices.size());
  for (const Face& t : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = t[k], b = t[(k + 1) % 3];
      auto& adj = g.adjacency[a];
      if (std::none_of(adj.begin(), adj.end(), [b](const auto& e) { return e.first == b; })) {
        const double len = (mesh.vertices[a] - mesh.vertices[b]).norm();
        adj.emplace_back(b, len);
        g.adjacency[b].emplace_back(a, len);
      }
    }
  }
  return g;
}

std::vector<double> vertexGeodesics(const EdgeGraph& graph, int source, double cutoff) {
  const int n = static_cast<int>(graph.adjacency.size());
  if (source < 0 || source >= n) throw std::out_of_range("geodesic source out of range");
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  dist[source] = 0.0;
  heap.emplace(0.0, source);
  while (!heap.empty()) {
    const auto [d, v] = heap.top();
    heap.pop();
    if (d > dist[v] || d > cutoff) continue;
    for (const auto& [w, len] : graph.adjacency[v]) {
      const double nd = d + len;
      if (nd < dist[w]) {
        dist[w] = nd;
        heap.emplace(nd, w);
      }
    }
  }
  return dist;
}

std::vector<double> vertexGeodesics(const TriMesh& mesh, int source) {
  return vertexGeodesics(EdgeGraph::build(mesh), source);
}

std::vector<SurfaceSample> sampleSurface(const TriMesh& mesh, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (int f = 0; f < mesh.numFaces(); ++f) {
    total += mesh.faceArea(f);
    cumulative[f] = total;
  }
  Rng rng(seed);
  std::vector<SurfaceSample> out(n);
  for (SurfaceSample& s : out) {
    const double pick = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    s.face = static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(), mesh.numFaces() - 1));
    const double r1 = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    s.barycentric = Vec3(1.0 - r1, r1 * (1.0 - r2), r1 * r2);
    s.position = mesh.facePoint(s.face, s.barycentric);
  }
  return out;
}

std::vector<Vec3> positionsOf(std::span<const SurfaceSample> samples) {
  std::vector<Vec3> out;
  out.reserve(samples.size());
  for (const SurfaceSample& s : samples) out.push_back(s.position);
  return out;
}

PointGrid::PointGrid(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  if (points_.empty()) throw std::invalid_argument("PointGrid needs at least one point");
  brute_ = points_.size() < 2000;
  if (brute_) return;
  Vec3 lo = points_.front(), hi = lo;
  for (const Vec3& p : points_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 span = (hi - lo).cwiseMax(Vec3::Constant(1e-9));
  // About two points per occupied cell for surface-like sets.
  const double volume = span.prod();
  cell_ = std::cbrt(volume * 2.0 / static_cast<double>(points_.size()));
  const double area = 2.0 * (span[0] * span[1] + span[1] * span[2] + span[0] * span[2]);
  cell_ = std::max(cell_, 0.5 * std::sqrt(area / static_cast<double>(points_.size())));
  const long maxCells = 4 * static_cast<long>(points_.size()) + 1024;
  while (true) {
    for (int k = 0; k < 3; ++k) dims_[k] = static_cast<int>(span[k] / cell_) + 1;
    if (static_cast<long>(dims_[0]) * dims_[1] * dims_[2] <= maxCells) break;
    cell_ *= 1.25;
  }
  origin_ = lo;
  const long cells = static_cast<long>(dims_[0]) * dims_[1] * dims_[2];
  std::vector<long> cellOf(points_.size());
  std::vector<int> counts(cells + 1, 0);
  for (size_t i = 0; i < points_.size(); ++i) {
    std::array<int, 3> c;
    for (int k = 0; k < 3; ++k) {
      c[k] = std::clamp(static_cast<int>((points_[i][k] - origin_[k]) / cell_), 0, dims_[k] - 1);
    }
    cellOf[i] = cellIndex(c[0], c[1], c[2]);
    ++counts[cellOf[i] + 1];
  }
  for (long c = 0; c < cells; ++c) counts[c + 1] += counts[c];
  cellStart_.assign(counts.begin(), counts.end());
  order_.resize(points_.size());
  std::vector<int> fill(counts.begin(), counts.end() - 1);
  for (size_t i = 0; i < points_.size(); ++i) order_[fill[cellOf[i]]++] = static_cast<int>(i);
}

int PointGrid::nearest(const Vec3& p) const {
  int best = -1;
  double bestD = std::numeric_limits<double>::infinity();
  if (brute_) {
    for (size_t i = 0; i < points_.size(); ++i) {
      const double d = (points_[i] - p).squaredNorm();
      if (d < bestD) {
        bestD = d;
        best = static_cast<int>(i);
      }
    }
    return best;
  }
  std::array<int, 3> c;
  for (int k = 0; k < 3; ++k) {
    c[k] = std::clamp(static_cast<int>(std::floor((p[k] - origin_[k]) / cell_)), 0, dims_[k] - 1);
  }
  const int maxRing = std::max({dims_[0], dims_[1], dims_[2]});
  for (int ring = 0; ring <= maxRing; ++ring) {
    for (int z = c[2] - ring; z <= c[2] + ring; ++z) {
      if (z < 0 || z >= dims_[2]) continue;
      for (int y = c[1] - ring; y <= c[1] + ring; ++y) {
        if (y < 0 || y >= dims_[1]) continue;
        const bool yzShell = std::abs(z - c[2]) == ring || std::abs(y - c[1]) == ring;
        for (int x = c[0] - ring; x <= c[0] + ring; ++x) {
          if (x < 0 || x >= dims_[0]) continue;
          if (!yzShell && std::abs(x - c[0]) != ring) continue;
          const long cell = cellIndex(x, y, z);
          for (int j = cellStart_[cell]; j < cellStart_[cell + 1]; ++j) {
            const double d = (points_[order_[j]] - p).squaredNorm();
            if (d < bestD) {
              bestD = d;
              best = order_[j];
            }
          }
        }
      }
    }
    // Unvisited cells are at least ring*cell_ away from p along some axis, also when p lies
    // outside the grid box (clamping only moves the home cell toward p).
    if (best >= 0) {
      const double reach = ring * cell_;
      if (bestD <= reach * reach) break;
    }
  }
  return best;
}

double PointGrid::nearestSquaredDistance(const Vec3& p) const {
  return (points_[nearest(p)] - p).squaredNorm();
}

double chamferDistance(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer distance of an empty point set");
  const PointGrid gridA(a), gridB(b);
  double ab = 0.0, ba = 0.0;
  for (const Vec3& p : a) ab += gridB.nearestSquaredDistance(p);
  for (const Vec3& p : b) ba += gridA.nearestSquaredDistance(p);
  return ab / static_cast<double>(a.size()) + ba / static_cast<double>(b.size());
}

} // namespace ncs
