#pragma once

#include "ncs/geometry.h"
#include "ncs/model.h"
#include "ncs/patching.h"
#include "ncs/random.h"

#include <cmath>
#include <functional>
#include <algorithm>
#include <map>
#include <optional>

namespace fixtures {

using ncs::Face;
using ncs::Vec2;
using ncs::TriMesh;
using ncs::Vec3;

// n x n vertex grid over [-1,1]^2 mapped through f(x, y).
inline TriMesh grid(int n, const std::function<Vec3(double, double)>& f) {
  TriMesh m;
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      m.vertices.push_back(f(-1.0 + 2.0 * i / (n - 1), -1.0 + 2.0 * j / (n - 1)));
    }
  }
  for (int j = 0; j + 1 < n; ++j) {
    for (int i = 0; i + 1 < n; ++i) {
      const int a = j * n + i, b = a + 1, c = a + n + 1, d = a + n;
      m.faces.push_back({a, b, c});
      m.faces.push_back({a, c, d});
    }
  }
  return m;
}

inline TriMesh flatPlane(int n = 16) {
  return grid(n, [](double x, double y) { return Vec3(x, y, 0.0); });
}

// z = 0.05 sin(20x) sin(20y) on a 64 x 64 grid.
inline TriMesh bumpyPlane(int n = 64) {
  return grid(n, [](double x, double y) { return Vec3(x, y, 0.05 * std::sin(20 * x) * std::sin(20 * y)); });
}

inline TriMesh saddle(int n = 20) {
  return grid(n, [](double x, double y) { return Vec3(x, y, 0.5 * (x * x - y * y)); });
}

// Leaning waves: x = s + c sin(ks), z = d sin(ks). With c k > 1 the crests overhang, so the
// detail cannot be written as a height above the base plane.
inline TriMesh leaningWaves(int n = 64, double k = 9.0, double c = 0.14, double d = 0.08) {
  return grid(n, [=](double s, double y) { return Vec3(s + c * std::sin(k * s), y, d * std::sin(k * s)); });
}

// Plane with a sharp crease along x = 0.
inline TriMesh creasedPlane(int n = 24) {
  return grid(n, [](double x, double y) { return Vec3(x, y, 0.3 * (1.0 - std::abs(x))); });
}

inline TriMesh icosphere(int subdivisions = 3) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriMesh m;
  m.vertices = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : m.vertices) v.normalize();
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
      const int id = static_cast<int>(m.vertices.size()) - 1;
      mid[key] = id;
      return id;
    };
    std::vector<Face> next;
    for (const Face& f : m.faces) {
      const int ab = midpoint(f[0], f[1]), bc = midpoint(f[1], f[2]), ca = midpoint(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    m.faces = std::move(next);
  }
  return m;
}

// Two hand-built patches (left and right halves, overlapping in the middle column of squares)
// on a small wavy grid, with a tiny architecture: code 2x2x2, one CNN block.
// Blend weights along a -> b sampled at `step` resolution. Every interval whose weights move by
// more than 1e-3, or whose covering set changes, is resampled at 100 and 1000 sub-steps. For a
// continuous field the largest sub-step change drops ~10x between the two; a jump does not shrink.
struct PathContinuity {
  double maxStep = 0.0;
  double worstRatio = 0.0;
  int refined = 0;
  int membershipChanges = 0;
};

inline PathContinuity blendPathContinuity(const ncs::PatchSet& ps, const ncs::DiskChart& global, const Vec2& a,
                                          const Vec2& b, double step = 1e-3) {
  using Weights = std::map<int, double>;
  auto weightsAt = [&](const Vec2& q) -> std::optional<Weights> {
    const auto cp = global.locate(q);
    if (!cp) return std::nullopt;
    Weights w;
    for (const auto& e : ncs::blendWeights(ps, global, *cp)) w[e.patch] = e.weight;
    return w;
  };
  auto change = [](const Weights& x, const Weights& y) {
    double d = 0.0;
    for (const auto& [p, w] : x) d = std::max(d, std::abs(w - (y.count(p) ? y.at(p) : 0.0)));
    for (const auto& [p, w] : y) {
      if (!x.count(p)) d = std::max(d, w);
    }
    return d;
  };
  auto sameKeys = [](const Weights& x, const Weights& y) {
    return x.size() == y.size() && std::equal(x.begin(), x.end(), y.begin(), [](auto& l, auto& r) { return l.first == r.first; });
  };

  PathContinuity r;
  const int steps = std::max(1, static_cast<int>(std::ceil((b - a).norm() / step)));
  auto prev = weightsAt(a);
  for (int i = 1; i <= steps; ++i) {
    const Vec2 q0 = a + (b - a) * (double(i - 1) / steps), q1 = a + (b - a) * (double(i) / steps);
    auto cur = weightsAt(q1);
    if (prev && cur) {
      const double jump = change(*prev, *cur);
      r.maxStep = std::max(r.maxStep, jump);
      const bool membership = !sameKeys(*prev, *cur);
      r.membershipChanges += membership;
      if (jump > 1e-3 || membership) {
        ++r.refined;
        std::vector<std::optional<Weights>> fine(1001);
        fine[0] = prev;
        for (int k = 1; k <= 1000; ++k) fine[k] = weightsAt(q0 + (q1 - q0) * (k / 1000.0));
        auto maxChange = [&](int stride) {
          double m = 0.0;
          for (int k = stride; k <= 1000; k += stride) {
            if (fine[k - stride] && fine[k]) m = std::max(m, change(*fine[k - stride], *fine[k]));
          }
          return m;
        };
        const double coarse = maxChange(10);
        if (coarse > 1e-9) r.worstRatio = std::max(r.worstRatio, maxChange(1) / coarse);
      }
    }
    prev = std::move(cur);
  }
  return r;
}

struct TinyScene {
  TriMesh mesh;
  ncs::DiskChart global;
  ncs::PatchSet patches;
  ncs::ModelParams params;
};

inline TinyScene tinyScene(std::uint64_t seed = 1) {
  TinyScene s;
  s.mesh = ncs::normalizeUnitSphere(
      grid(7, [](double x, double y) { return Vec3(x, y, 0.2 * std::sin(2 * x) * std::cos(2 * y)); }));
  s.global = ncs::embedDisk(s.mesh);
  for (auto [lo, hi] : {std::pair{-2.0, 0.2}, std::pair{-0.2, 2.0}}) {
    ncs::Patch p;
    for (int f = 0; f < s.mesh.numFaces(); ++f) {
      const Face& face = s.mesh.faces[f];
      const double cx = (s.mesh.vertices[face[0]].x() + s.mesh.vertices[face[1]].x() + s.mesh.vertices[face[2]].x()) / 3;
      if (cx > lo && cx < hi) p.faces.push_back(f);
    }
    for (int f : p.faces) p.vertices.insert(p.vertices.end(), s.mesh.faces[f].begin(), s.mesh.faces[f].end());
    std::sort(p.vertices.begin(), p.vertices.end());
    p.vertices.erase(std::unique(p.vertices.begin(), p.vertices.end()), p.vertices.end());
    p.center = p.vertices[p.vertices.size() / 2];
    p.chart = ncs::embedDisk(s.mesh, p.faces);
    s.patches.patches.push_back(std::move(p));
  }
  s.patches.rebuildCoverage(s.mesh.numVertices(), s.mesh.numFaces());

  ncs::ArchConfig arch;
  arch.coarseWidths = {6, 6};
  arch.codeChannels = 2;
  arch.codeHeight = 2;
  arch.codeWidth = 2;
  arch.cnnChannels = 2;
  arch.cnnBlocks = 1;
  arch.fineWidths = {4};
  s.params = ncs::buildModel(arch, s.patches, seed);
  // Wake up the fine branch so every parameter reaches the loss.
  ncs::Rng rng(seed + 17);
  const ncs::ParamLayout l = s.params.layout();
  for (float& v : s.params.tensors[l.codes].data) v = static_cast<float>(rng.normal());
  for (int idx : {l.fineWeights.back(), l.fineBiases.back()}) {
    for (float& v : s.params.tensors[idx].data) v = static_cast<float>(0.3 * rng.normal());
  }
  return s;
}

} // namespace fixtures
