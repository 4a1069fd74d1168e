#include "ncs/patching.h"

#include "ncs/errors.h"
#include "ncs/random.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <set>

namespace ncs {

namespace {

using EdgeKey = std::pair<int, int>;

EdgeKey edgeKey(int a, int b) { return {std::min(a, b), std::max(a, b)}; }

struct FaceAdjacency {
  std::vector<std::array<int, 3>> neighbors;  // across edge k = (t[k], t[k+1]); -1 on boundary
  std::vector<std::vector<int>> vertexFaces;

  explicit FaceAdjacency(const TriMesh& mesh) {
    neighbors.assign(mesh.faces.size(), {-1, -1, -1});
    vertexFaces.resize(mesh.vertices.size());
    std::map<EdgeKey, std::vector<std::pair<int, int>>> edges;
    for (int f = 0; f < mesh.numFaces(); ++f) {
      for (int k = 0; k < 3; ++k) {
        edges[edgeKey(mesh.faces[f][k], mesh.faces[f][(k + 1) % 3])].emplace_back(f, k);
        vertexFaces[mesh.faces[f][k]].push_back(f);
      }
    }
    for (const auto& [e, uses] : edges) {
      if (uses.size() != 2) continue;
      neighbors[uses[0].first][uses[0].second] = uses[1].first;
      neighbors[uses[1].first][uses[1].second] = uses[0].first;
    }
  }
};

// Grows a disk-topology face region from a seed face, adding faces whose vertices lie within
// the radius in order of their farthest vertex distance. A face is added only when it attaches
// along one edge with a new apex vertex, or fills a notch along two consecutive boundary edges.
std::vector<int> growDiskRegion(const TriMesh& mesh, const FaceAdjacency& adj, int seedFace,
                                const std::vector<double>& dist, double radius) {
  auto key = [&](int f) {
    const Face& t = mesh.faces[f];
    return std::max({dist[t[0]], dist[t[1]], dist[t[2]]});
  };
  auto eligible = [&](int f) { return key(f) <= radius; };

  std::set<int> region;
  std::map<int, int> vertexUse;
  std::map<EdgeKey, int> edgeUse;
  auto addFace = [&](int f) {
    region.insert(f);
    const Face& t = mesh.faces[f];
    for (int k = 0; k < 3; ++k) {
      ++vertexUse[t[k]];
      ++edgeUse[edgeKey(t[k], t[(k + 1) % 3])];
    }
  };
  addFace(seedFace);

  auto canAdd = [&](int f) {
    const Face& t = mesh.faces[f];
    int shared = 0, apex = -1;
    for (int k = 0; k < 3; ++k) {
      auto it = edgeUse.find(edgeKey(t[k], t[(k + 1) % 3]));
      if (it == edgeUse.end()) continue;
      if (it->second >= 2) return false;
      ++shared;
      apex = t[(k + 2) % 3];
    }
    if (shared == 1) return vertexUse.find(apex) == vertexUse.end();
    // Two shared edges meet at a boundary vertex and close a notch; three would close the surface.
    return shared == 2;
  };

  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> frontier;
  auto pushNeighbors = [&](int f) {
    for (int n : adj.neighbors[f]) {
      if (n >= 0 && !region.count(n) && eligible(n)) frontier.emplace(key(n), n);
    }
  };
  pushNeighbors(seedFace);
  while (!frontier.empty()) {
    const int f = frontier.top().second;
    frontier.pop();
    if (region.count(f)) continue;
    if (!canAdd(f)) continue;  // re-queued if a later addition touches it
    addFace(f);
    pushNeighbors(f);
    // Rejected faces adjacent to the new face may now close a notch.
    const Face& t = mesh.faces[f];
    for (int v : t) {
      for (int g : adj.vertexFaces[v]) {
        if (!region.count(g) && eligible(g)) frontier.emplace(key(g), g);
      }
    }
  }
  return {region.begin(), region.end()};
}

} // namespace

double PatchSet::meanOverlap() const {
  if (vertexPatches.empty()) return 0.0;
  double total = 0.0;
  for (const auto& v : vertexPatches) total += static_cast<double>(v.size());
  return total / static_cast<double>(vertexPatches.size());
}

void PatchSet::rebuildCoverage(int numVertices, int numFaces) {
  vertexPatches.assign(numVertices, {});
  facePatches.assign(numFaces, {});
  for (int p = 0; p < size(); ++p) {
    for (int v : patches[p].vertices) vertexPatches[v].push_back(p);
    for (int f : patches[p].faces) facePatches[f].push_back(p);
  }
}

PatchSet extractPatches(const TriMesh& mesh, double rho, double eta, std::uint64_t seed) {
  if (!(rho > 0.0)) throw ConfigError("patch radius rho must be positive");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("forbid probability eta must be in [0,1]");

  const FaceAdjacency adj(mesh);
  for (int v = 0; v < mesh.numVertices(); ++v) {
    if (adj.vertexFaces[v].empty()) {
      throw TopologyError("extract_patches: isolated vertex " + std::to_string(v));
    }
  }
  const EdgeGraph graph = EdgeGraph::build(mesh);

  PatchSet set;
  set.rho = rho;
  set.eta = eta;
  set.radius = rho * maxAxisExtent(mesh);

  Rng rng(seed);
  std::vector<bool> faceCovered(mesh.faces.size(), false);
  std::vector<bool> forbidden(mesh.vertices.size(), false);
  int uncoveredFaces = mesh.numFaces();

  while (uncoveredFaces > 0) {
    std::vector<int> candidates, fallback;
    for (int v = 0; v < mesh.numVertices(); ++v) {
      const bool touchesUncovered = std::any_of(adj.vertexFaces[v].begin(), adj.vertexFaces[v].end(),
                                                [&](int f) { return !faceCovered[f]; });
      if (!touchesUncovered) continue;
      fallback.push_back(v);
      if (!forbidden[v]) candidates.push_back(v);
    }
    // Every uncovered vertex may be forbidden (eta near 1); centers then ignore the mark.
    const std::vector<int>& pool = candidates.empty() ? fallback : candidates;
    const int center = pool[rng.index(pool.size())];

    int seedFace = -1;
    for (int f : adj.vertexFaces[center]) {
      if (!faceCovered[f] && (seedFace < 0 || f < seedFace)) seedFace = f;
    }
    const Face& sf = mesh.faces[seedFace];
    // Distances up to the radius are exact; farther ones are upper bounds.
    std::vector<double> dist = vertexGeodesics(graph, center, set.radius);
    // The seed face always belongs to its patch, even when its edges exceed the radius.
    const double radius = std::max({set.radius, dist[sf[0]], dist[sf[1]], dist[sf[2]]});

    Patch patch;
    patch.center = center;
    patch.faces = growDiskRegion(mesh, adj, seedFace, dist, radius);
    std::set<int> verts;
    for (int f : patch.faces) {
      for (int v : mesh.faces[f]) verts.insert(v);
      if (!faceCovered[f]) {
        faceCovered[f] = true;
        --uncoveredFaces;
      }
    }
    patch.vertices.assign(verts.begin(), verts.end());
    for (int v : patch.vertices) {
      if (rng.uniform() < eta) forbidden[v] = true;
    }
    patch.chart = embedDisk(mesh, patch.faces);
    set.patches.push_back(std::move(patch));
  }
  set.rebuildCoverage(mesh.numVertices(), mesh.numFaces());
  return set;
}

double boundarySignedDistance(const DiskChart& chart, const Vec2& uv) {
  const auto& loop = chart.boundary();
  const auto& pts = chart.uv();
  double best = std::numeric_limits<double>::infinity();
  bool inside = false;
  const size_t n = loop.size();
  for (size_t k = 0; k < n; ++k) {
    const Vec2& a = pts[loop[k]];
    const Vec2& b = pts[loop[(k + 1) % n]];
    const Vec2 ab = b - a;
    const double len2 = ab.squaredNorm();
    const double s = len2 > 0.0 ? std::clamp((uv - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    best = std::min(best, (a + s * ab - uv).squaredNorm());
    // Crossing-number parity test.
    if ((a.y() > uv.y()) != (b.y() > uv.y())) {
      const double xCross = a.x() + (uv.y() - a.y()) / (b.y() - a.y()) * ab.x();
      if (uv.x() < xCross) inside = !inside;
    }
  }
  const double d = std::sqrt(best);
  return inside ? -d : d;
}

std::vector<BlendEntry> blendWeights(const PatchSet& patches, const DiskChart& global, const ChartPoint& q) {
  const int meshFace = global.faceIds()[q.face];
  const auto& covering = patches.facePatches[meshFace];
  if (covering.empty()) throw NumericError("blend_weights: point covered by no patch");
  std::vector<BlendEntry> raw;
  raw.reserve(covering.size());
  double total = 0.0;
  for (int p : covering) {
    auto local = globalToLocal(global, patches.patches[p].chart, q);
    if (!local) continue;
    // Round-off in point location leaves boundary points ~1e-15 inside; treat them as on it.
    const double depth = -boundarySignedDistance(patches.patches[p].chart, local->uv);
    const double w = depth > 1e-12 ? depth : 0.0;
    raw.push_back({p, w, *local});
    total += w;
  }
  if (raw.empty()) throw NumericError("blend_weights: point covered by no patch");
  std::vector<BlendEntry> out;
  if (total > 0.0) {
    for (BlendEntry& e : raw) {
      if (e.weight > 0.0) {
        e.weight /= total;
        out.push_back(e);
      }
    }
  } else {
    const double uniform = 1.0 / static_cast<double>(raw.size());
    for (BlendEntry& e : raw) {
      e.weight = uniform;
      out.push_back(e);
    }
  }
  return out;
}

std::vector<BlendEntry> blendWeights(const PatchSet& patches, const DiskChart& global, const Vec2& q) {
  auto located = global.locate(q);
  if (!located) throw NumericError("blend_weights: point outside the global chart");
  return blendWeights(patches, global, *located);
}

} // namespace ncs
