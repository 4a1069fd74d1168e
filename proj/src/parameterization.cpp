#include "ncs/parameterization.h"

#include "ncs/errors.h"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

namespace ncs {

namespace {

constexpr double kBaryTolerance = 1e-9;
constexpr double kMinWeight = 1e-8;

struct LocalSubmesh {
  std::vector<int> vertexIds;
  std::vector<int> faceIds;
  std::vector<Face> faces;
  std::unordered_map<int, int> toLocal;
};

LocalSubmesh extractSubmesh(const TriMesh& mesh, std::span<const int> faceIds) {
  LocalSubmesh sub;
  sub.faceIds.assign(faceIds.begin(), faceIds.end());
  std::vector<int> verts;
  for (int f : faceIds) {
    if (f < 0 || f >= mesh.numFaces()) throw std::out_of_range("submesh face index out of range");
    for (int v : mesh.faces[f]) verts.push_back(v);
  }
  std::sort(verts.begin(), verts.end());
  verts.erase(std::unique(verts.begin(), verts.end()), verts.end());
  sub.vertexIds = verts;
  for (size_t i = 0; i < verts.size(); ++i) sub.toLocal[verts[i]] = static_cast<int>(i);
  for (int f : faceIds) {
    const Face& t = mesh.faces[f];
    sub.faces.push_back({sub.toLocal[t[0]], sub.toLocal[t[1]], sub.toLocal[t[2]]});
  }
  return sub;
}

struct TopologyInfo {
  std::string violation;
  std::vector<int> boundaryLoop;  // local vertex ids
};

TopologyInfo analyzeTopology(const LocalSubmesh& sub) {
  TopologyInfo info;
  const int nv = static_cast<int>(sub.vertexIds.size());
  const int nf = static_cast<int>(sub.faces.size());
  if (nf == 0) {
    info.violation = "empty submesh";
    return info;
  }
  // Directed half-edge counts; an undirected edge used once is a boundary edge.
  std::map<std::pair<int, int>, int> undirected;
  std::map<std::pair<int, int>, int> directed;
  for (const Face& t : sub.faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = t[k], b = t[(k + 1) % 3];
      ++undirected[{std::min(a, b), std::max(a, b)}];
      ++directed[{a, b}];
    }
  }
  for (const auto& [e, n] : undirected) {
    if (n > 2) {
      info.violation = "non-manifold edge";
      return info;
    }
  }
  for (const auto& [e, n] : directed) {
    if (n > 1) {
      info.violation = "inconsistent face orientation";
      return info;
    }
  }

  // Edge connectivity over faces.
  std::vector<int> parent(nf);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::map<std::pair<int, int>, int> firstFace;
  for (int f = 0; f < nf; ++f) {
    const Face& t = sub.faces[f];
    for (int k = 0; k < 3; ++k) {
      const std::pair<int, int> key{std::min(t[k], t[(k + 1) % 3]), std::max(t[k], t[(k + 1) % 3])};
      auto [it, inserted] = firstFace.emplace(key, f);
      if (!inserted) parent[find(f)] = find(it->second);
    }
  }
  for (int f = 1; f < nf; ++f) {
    if (find(f) != find(0)) {
      info.violation = "submesh is not edge-connected";
      return info;
    }
  }

  std::map<int, std::vector<int>> next;
  for (const Face& t : sub.faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = t[k], b = t[(k + 1) % 3];
      if (undirected[{std::min(a, b), std::max(a, b)}] == 1) next[a].push_back(b);
    }
  }
  if (next.empty()) {
    info.violation = "closed surface (no boundary loop)";
    return info;
  }
  for (const auto& [v, outs] : next) {
    if (outs.size() != 1) {
      info.violation = "non-manifold boundary vertex";
      return info;
    }
  }
  // Walk loops starting at the smallest local id for determinism.
  std::map<int, bool> visited;
  int loops = 0;
  for (const auto& [start, outs] : next) {
    if (visited[start]) continue;
    ++loops;
    std::vector<int> loop;
    int v = start;
    while (!visited[v]) {
      visited[v] = true;
      loop.push_back(v);
      v = next[v].front();
    }
    if (loops == 1) info.boundaryLoop = loop;
  }
  const long euler = static_cast<long>(nv) - static_cast<long>(undirected.size()) + nf;
  if (loops > 1) {
    info.violation = std::to_string(loops) + " boundary loops (expected 1), Euler characteristic " +
                     std::to_string(euler);
    return info;
  }
  if (euler != 1) {
    info.violation = "Euler characteristic " + std::to_string(euler) + " (expected 1; genus " +
                     std::to_string((2 - euler - loops) / 2) + ")";
    return info;
  }
  return info;
}

// tan(alpha/2) for the angle between a and b.
double halfAngleTan(const Vec3& a, const Vec3& b) {
  const double s = a.cross(b).norm();
  const double c = a.dot(b);
  const double len = a.norm() * b.norm();
  return s / (len + c);
}

} // namespace

std::string diskTopologyViolation(const TriMesh& mesh, std::span<const int> faceIds) {
  return analyzeTopology(extractSubmesh(mesh, faceIds)).violation;
}

DiskChart embedDisk(const TriMesh& mesh) {
  std::vector<int> all(mesh.faces.size());
  std::iota(all.begin(), all.end(), 0);
  return embedDisk(mesh, all);
}

DiskChart embedDisk(const TriMesh& mesh, std::span<const int> faceIds) {
  LocalSubmesh sub = extractSubmesh(mesh, faceIds);
  TopologyInfo topo = analyzeTopology(sub);
  if (!topo.violation.empty()) throw TopologyError("embed_disk: " + topo.violation);

  const int nv = static_cast<int>(sub.vertexIds.size());
  std::vector<Vec3> pos(nv);
  for (int i = 0; i < nv; ++i) pos[i] = mesh.vertices[sub.vertexIds[i]];

  std::vector<Vec2> uv(nv, Vec2::Zero());
  std::vector<bool> onBoundary(nv, false);
  const auto& loop = topo.boundaryLoop;
  double perimeter = 0.0;
  std::vector<double> arc(loop.size(), 0.0);
  for (size_t k = 0; k < loop.size(); ++k) {
    arc[k] = perimeter;
    perimeter += (pos[loop[(k + 1) % loop.size()]] - pos[loop[k]]).norm();
  }
  if (!(perimeter > 0.0)) throw NumericError("embed_disk: zero-length boundary");
  for (size_t k = 0; k < loop.size(); ++k) {
    const double theta = 2.0 * std::numbers::pi * arc[k] / perimeter;
    uv[loop[k]] = Vec2(std::cos(theta), std::sin(theta));
    onBoundary[loop[k]] = true;
  }

  // Mean-value weights w_ij = (tan(a/2) + tan(b/2)) / |v_i - v_j|, accumulated per face corner.
  std::vector<std::map<int, double>> weights(nv);
  for (const Face& t : sub.faces) {
    for (int k = 0; k < 3; ++k) {
      const int i = t[k], j = t[(k + 1) % 3], l = t[(k + 2) % 3];
      const Vec3 eij = pos[j] - pos[i];
      const Vec3 eil = pos[l] - pos[i];
      const double th = halfAngleTan(eij, eil);
      weights[i][j] += th / eij.norm();
      weights[i][l] += th / eil.norm();
    }
  }

  std::vector<int> interiorIndex(nv, -1);
  int ni = 0;
  for (int i = 0; i < nv; ++i) {
    if (!onBoundary[i]) interiorIndex[i] = ni++;
  }
  if (ni > 0) {
    std::vector<Eigen::Triplet<double>> triplets;
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(ni, 2);
    for (int i = 0; i < nv; ++i) {
      const int row = interiorIndex[i];
      if (row < 0) continue;
      double diag = 0.0;
      for (const auto& [j, wRaw] : weights[i]) {
        const double w = std::max(wRaw, kMinWeight);
        diag += w;
        if (interiorIndex[j] >= 0) {
          triplets.emplace_back(row, interiorIndex[j], -w);
        } else {
          rhs(row, 0) += w * uv[j][0];
          rhs(row, 1) += w * uv[j][1];
        }
      }
      triplets.emplace_back(row, row, diag);
    }
    Eigen::SparseMatrix<double> A(ni, ni);
    A.setFromTriplets(triplets.begin(), triplets.end());
    A.makeCompressed();

    Eigen::MatrixXd x(ni, 2);
    Eigen::BiCGSTAB<Eigen::SparseMatrix<double>, Eigen::IncompleteLUT<double>> iterative;
    iterative.setTolerance(1e-10);
    iterative.setMaxIterations(std::max(1000, 4 * ni));
    iterative.compute(A);
    bool converged = iterative.info() == Eigen::Success;
    if (converged) {
      for (int c = 0; c < 2; ++c) {
        x.col(c) = iterative.solve(rhs.col(c));
        converged = converged && iterative.info() == Eigen::Success;
      }
    }
    if (!converged) {
      Eigen::SparseLU<Eigen::SparseMatrix<double>> direct;
      direct.compute(A);
      if (direct.info() != Eigen::Success) throw NumericError("embed_disk: singular system");
      x = direct.solve(rhs);
    }
    const double rel = (A * x - rhs).norm() / std::max(rhs.norm(), 1e-300);
    if (!std::isfinite(rel) || rel > 1e-8) {
      throw NumericError("embed_disk: linear solve residual " + std::to_string(rel));
    }
    for (int i = 0; i < nv; ++i) {
      if (interiorIndex[i] >= 0) uv[i] = Vec2(x(interiorIndex[i], 0), x(interiorIndex[i], 1));
    }
  }

  DiskChart chart;
  chart.vertexIds_ = std::move(sub.vertexIds);
  chart.faceIds_ = std::move(sub.faceIds);
  chart.faces_ = std::move(sub.faces);
  chart.positions_ = std::move(pos);
  chart.uv_ = std::move(uv);
  chart.boundary_ = loop;
  chart.buildLookups();
  return chart;
}

DiskChart DiskChart::fromData(std::vector<int> vertexIds, std::vector<int> faceIds, std::vector<Face> faces,
                              std::vector<Vec3> positions, std::vector<Vec2> uv, std::vector<int> boundary) {
  DiskChart chart;
  chart.vertexIds_ = std::move(vertexIds);
  chart.faceIds_ = std::move(faceIds);
  chart.faces_ = std::move(faces);
  chart.positions_ = std::move(positions);
  chart.uv_ = std::move(uv);
  chart.boundary_ = std::move(boundary);
  chart.buildLookups();
  return chart;
}

void DiskChart::buildLookups() {
  vertexLookup_.clear();
  faceLookup_.clear();
  for (size_t i = 0; i < vertexIds_.size(); ++i) vertexLookup_[vertexIds_[i]] = static_cast<int>(i);
  for (size_t i = 0; i < faceIds_.size(); ++i) faceLookup_[faceIds_[i]] = static_cast<int>(i);

  Vec2 lo = uv_.front(), hi = lo;
  for (const Vec2& p : uv_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const int res = std::clamp(static_cast<int>(std::sqrt(static_cast<double>(faces_.size()))), 1, 1024);
  const Vec2 span = (hi - lo).cwiseMax(Vec2::Constant(1e-12));
  gridCell_ = std::max(span[0], span[1]) / res * (1.0 + 1e-9);
  gridLo_ = lo;
  gridRes_[0] = std::max(1, static_cast<int>(std::ceil(span[0] / gridCell_)));
  gridRes_[1] = std::max(1, static_cast<int>(std::ceil(span[1] / gridCell_)));
  const int cells = gridRes_[0] * gridRes_[1];
  std::vector<std::vector<int>> buckets(cells);
  for (int f = 0; f < numFaces(); ++f) {
    Vec2 flo = uv_[faces_[f][0]], fhi = flo;
    for (int k = 1; k < 3; ++k) {
      flo = flo.cwiseMin(uv_[faces_[f][k]]);
      fhi = fhi.cwiseMax(uv_[faces_[f][k]]);
    }
    const int x0 = std::clamp(static_cast<int>((flo[0] - gridLo_[0]) / gridCell_) - 1, 0, gridRes_[0] - 1);
    const int x1 = std::clamp(static_cast<int>((fhi[0] - gridLo_[0]) / gridCell_) + 1, 0, gridRes_[0] - 1);
    const int y0 = std::clamp(static_cast<int>((flo[1] - gridLo_[1]) / gridCell_) - 1, 0, gridRes_[1] - 1);
    const int y1 = std::clamp(static_cast<int>((fhi[1] - gridLo_[1]) / gridCell_) + 1, 0, gridRes_[1] - 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) buckets[y * gridRes_[0] + x].push_back(f);
    }
  }
  gridStart_.assign(cells + 1, 0);
  gridItems_.clear();
  for (int c = 0; c < cells; ++c) {
    gridStart_[c] = static_cast<int>(gridItems_.size());
    gridItems_.insert(gridItems_.end(), buckets[c].begin(), buckets[c].end());
  }
  gridStart_[cells] = static_cast<int>(gridItems_.size());
}

int DiskChart::localVertex(int meshVertex) const {
  auto it = vertexLookup_.find(meshVertex);
  return it == vertexLookup_.end() ? -1 : it->second;
}

int DiskChart::localFace(int meshFace) const {
  auto it = faceLookup_.find(meshFace);
  return it == faceLookup_.end() ? -1 : it->second;
}

Vec3 DiskChart::barycentricOf(int f, const Vec2& q) const {
  const Vec2& a = uv_[faces_[f][0]];
  const Vec2& b = uv_[faces_[f][1]];
  const Vec2& c = uv_[faces_[f][2]];
  const double det = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
  if (det == 0.0) return Vec3::Constant(-1.0);
  const double l1 = ((q - a).x() * (c - a).y() - (q - a).y() * (c - a).x()) / det;
  const double l2 = ((b - a).x() * (q - a).y() - (b - a).y() * (q - a).x()) / det;
  return Vec3(1.0 - l1 - l2, l1, l2);
}

std::optional<ChartPoint> DiskChart::locate(const Vec2& q) const {
  const int x = static_cast<int>(std::floor((q[0] - gridLo_[0]) / gridCell_));
  const int y = static_cast<int>(std::floor((q[1] - gridLo_[1]) / gridCell_));
  if (x < -1 || y < -1 || x > gridRes_[0] || y > gridRes_[1]) return std::nullopt;
  const int cx = std::clamp(x, 0, gridRes_[0] - 1);
  const int cy = std::clamp(y, 0, gridRes_[1] - 1);
  const int cell = cy * gridRes_[0] + cx;
  int best = -1;
  double bestMin = -kBaryTolerance;
  Vec3 bestBary;
  for (int k = gridStart_[cell]; k < gridStart_[cell + 1]; ++k) {
    const int f = gridItems_[k];
    const Vec3 bary = barycentricOf(f, q);
    const double m = bary.minCoeff();
    if (m >= bestMin && (best < 0 || m > bestMin)) {
      best = f;
      bestMin = m;
      bestBary = bary;
    }
  }
  if (best < 0) return std::nullopt;
  return pointOnFace(best, bestBary);
}

ChartPoint DiskChart::pointOnFace(int localFace, const Vec3& barycentric) const {
  ChartPoint p;
  p.face = localFace;
  p.barycentric = barycentric.cwiseMax(0.0);
  p.barycentric /= p.barycentric.sum();
  const Face& t = faces_[localFace];
  p.uv = p.barycentric[0] * uv_[t[0]] + p.barycentric[1] * uv_[t[1]] + p.barycentric[2] * uv_[t[2]];
  return p;
}

Vec3 DiskChart::lift(const ChartPoint& p) const {
  const Face& t = faces_[p.face];
  return p.barycentric[0] * positions_[t[0]] + p.barycentric[1] * positions_[t[1]] +
         p.barycentric[2] * positions_[t[2]];
}

Vec3 DiskChart::lift(const Vec2& q) const {
  auto p = locate(q);
  if (!p) throw NumericError("chart_lift: point outside chart");
  return lift(*p);
}

double DiskChart::signedArea(int f) const {
  const Vec2& a = uv_[faces_[f][0]];
  const Vec2& b = uv_[faces_[f][1]];
  const Vec2& c = uv_[faces_[f][2]];
  return 0.5 * ((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
}

int DiskChart::flipCount() const {
  int flips = 0;
  for (int f = 0; f < numFaces(); ++f) {
    if (!(signedArea(f) > 0.0)) ++flips;
  }
  return flips;
}

std::optional<ChartPoint> globalToLocal(const DiskChart& global, const DiskChart& patch, const ChartPoint& q) {
  const int meshFace = global.faceIds()[q.face];
  const int local = patch.localFace(meshFace);
  if (local < 0) return std::nullopt;
  // Both charts carry the mesh face with the same vertex order, so the barycentric data transfers.
  ChartPoint out;
  out.face = local;
  out.barycentric = q.barycentric;
  const Face& t = patch.faces()[local];
  out.uv = q.barycentric[0] * patch.uv()[t[0]] + q.barycentric[1] * patch.uv()[t[1]] +
           q.barycentric[2] * patch.uv()[t[2]];
  return out;
}

std::optional<ChartPoint> globalToLocal(const DiskChart& global, const DiskChart& patch, const Vec2& q) {
  auto located = global.locate(q);
  if (!located) return std::nullopt;
  return globalToLocal(global, patch, *located);
}

std::vector<TriangleDistortion> chartDistortion(const DiskChart& chart) {
  std::vector<TriangleDistortion> out(chart.numFaces());
  const double inf = std::numeric_limits<double>::infinity();
  for (int f = 0; f < chart.numFaces(); ++f) {
    const Face& t = chart.faces()[f];
    Eigen::Matrix2d d2;
    d2.col(0) = chart.uv()[t[1]] - chart.uv()[t[0]];
    d2.col(1) = chart.uv()[t[2]] - chart.uv()[t[0]];
    Eigen::Matrix<double, 3, 2> d3;
    d3.col(0) = chart.positions()[t[1]] - chart.positions()[t[0]];
    d3.col(1) = chart.positions()[t[2]] - chart.positions()[t[0]];
    const double det = d2.determinant();
    TriangleDistortion& td = out[f];
    if (std::abs(det) < 1e-300) {
      td = {inf, 0.0, inf, inf};
      continue;
    }
    const Eigen::Matrix<double, 3, 2> jac = d3 * d2.inverse();
    Eigen::JacobiSVD<Eigen::Matrix<double, 3, 2>> svd(jac);
    td.sigmaMax = svd.singularValues()[0];
    td.sigmaMin = svd.singularValues()[1];
    td.scale = td.sigmaMax * td.sigmaMin;
    td.conformal = td.sigmaMin > 0.0 ? td.sigmaMax / td.sigmaMin : inf;
  }
  return out;
}

} // namespace ncs
