#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.h"
#include "ncs/errors.h"
#include "ncs/parameterization.h"
#include "ncs/random.h"

#include <cmath>
#include <numeric>

using namespace ncs;

namespace {

std::vector<int> allFaces(const TriMesh& m) {
  std::vector<int> ids(m.numFaces());
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

} // namespace

TEST_CASE("embed_disk on a single triangle pins all vertices to the circle") {
  TriMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  m.faces = {{0, 1, 2}};
  const DiskChart c = embedDisk(m);
  CHECK(c.boundary().size() == 3);
  for (const Vec2& p : c.uv()) CHECK(p.norm() == doctest::Approx(1.0));
  CHECK(c.signedArea(0) > 0.0);
}

TEST_CASE("embed_disk on a flat plane") {
  const TriMesh m = fixtures::flatPlane(12);
  const DiskChart c = embedDisk(m);
  CHECK(c.flipCount() == 0);
  CHECK(static_cast<int>(c.boundary().size()) == 4 * 11);
  for (int b : c.boundary()) CHECK(c.uv()[b].norm() == doctest::Approx(1.0));
  for (const Vec2& p : c.uv()) CHECK(p.norm() <= 1.0 + 1e-12);

  SUBCASE("interior vertices satisfy the convex combination") {
    std::vector<char> onBoundary(c.uv().size(), 0);
    for (int b : c.boundary()) onBoundary[b] = 1;
    // Check that every interior vertex lies inside the convex hull of its one-ring.
    for (int v = 0; v < static_cast<int>(c.uv().size()); ++v) {
      if (onBoundary[v]) continue;
      Vec2 lo(1e9, 1e9), hi(-1e9, -1e9);
      for (const Face& f : c.faces()) {
        if (f[0] != v && f[1] != v && f[2] != v) continue;
        for (int k = 0; k < 3; ++k) {
          if (f[k] == v) continue;
          lo = lo.cwiseMin(c.uv()[f[k]]);
          hi = hi.cwiseMax(c.uv()[f[k]]);
        }
      }
      CHECK(c.uv()[v].x() >= lo.x() - 1e-12);
      CHECK(c.uv()[v].x() <= hi.x() + 1e-12);
      CHECK(c.uv()[v].y() >= lo.y() - 1e-12);
      CHECK(c.uv()[v].y() <= hi.y() + 1e-12);
    }
  }
}

TEST_CASE("embed_disk is bijective on curved grids") {
  for (const TriMesh& m : {fixtures::saddle(), normalizeUnitSphere(fixtures::bumpyPlane()), fixtures::creasedPlane()}) {
    const DiskChart c = embedDisk(m);
    CHECK(c.flipCount() == 0);
    for (int f = 0; f < c.numFaces(); ++f) CHECK(c.signedArea(f) > 0.0);
  }
}

TEST_CASE("embed_disk rejects non-disk topology") {
  SUBCASE("closed sphere") { CHECK_THROWS_AS(embedDisk(fixtures::icosphere(1)), TopologyError); }
  SUBCASE("annulus") {
    TriMesh m = fixtures::flatPlane(6);
    std::vector<int> keep;
    for (int f = 0; f < m.numFaces(); ++f) {
      Vec3 c = (m.vertices[m.faces[f][0]] + m.vertices[m.faces[f][1]] + m.vertices[m.faces[f][2]]) / 3.0;
      if (std::max(std::abs(c.x()), std::abs(c.y())) > 0.45) keep.push_back(f);
    }
    CHECK(!diskTopologyViolation(m, keep).empty());
    CHECK_THROWS_AS(embedDisk(m, keep), TopologyError);
  }
  SUBCASE("two components") {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {5, 0, 0}, {6, 0, 0}, {5, 1, 0}};
    m.faces = {{0, 1, 2}, {3, 4, 5}};
    CHECK(!diskTopologyViolation(m, allFaces(m)).empty());
  }
  SUBCASE("valid disk reports no violation") {
    const TriMesh m = fixtures::saddle();
    CHECK(diskTopologyViolation(m, allFaces(m)).empty());
  }
}

TEST_CASE("lift is exact at vertices and consistent inside triangles") {
  const TriMesh m = fixtures::saddle();
  const DiskChart c = embedDisk(m);
  for (int v = 0; v < static_cast<int>(c.uv().size()); ++v) {
    const Vec3 p = c.lift(c.uv()[v]);
    CHECK((p - m.vertices[c.vertexIds()[v]]).norm() < 1e-9);
  }
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const int f = static_cast<int>(rng.index(c.numFaces()));
    double a = rng.uniform(), b = rng.uniform();
    if (a + b > 1.0) a = 1.0 - a, b = 1.0 - b;
    const Vec3 bc(1.0 - a - b, a, b);
    const ChartPoint p = c.pointOnFace(f, bc);
    const auto located = c.locate(p.uv);
    REQUIRE(located);
    CHECK((c.lift(*located) - c.lift(p)).norm() < 1e-9);
    CHECK((c.lift(p) - m.facePoint(c.faceIds()[f], bc)).norm() < 1e-12);
  }
  CHECK_FALSE(c.locate(Vec2(1.5, 0.0)));
  CHECK_THROWS_AS(c.lift(Vec2(1.5, 0.0)), NumericError);
}

TEST_CASE("global_to_local agrees with the global lift") {
  const TriMesh m = normalizeUnitSphere(fixtures::bumpyPlane(32));
  const DiskChart global = embedDisk(m);
  std::vector<int> sub;
  for (int f = 0; f < m.numFaces(); ++f) {
    const Vec3 c = m.vertices[m.faces[f][0]];
    if (std::abs(c.x()) < 0.3 && std::abs(c.y()) < 0.3) sub.push_back(f);
  }
  REQUIRE(diskTopologyViolation(m, sub).empty());
  const DiskChart patch = embedDisk(m, sub);
  CHECK(patch.flipCount() == 0);

  Rng rng(8);
  int inside = 0, outside = 0;
  for (int i = 0; i < 2000; ++i) {
    const Vec2 q(rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7));
    const auto gp = global.locate(q);
    if (!gp) continue;
    const auto lp = globalToLocal(global, patch, *gp);
    if (!lp) {
      ++outside;
      continue;
    }
    ++inside;
    // Same mesh triangle and barycentrics, so the lifts agree exactly.
    CHECK(patch.lift(*lp) == global.lift(*gp));
  }
  CHECK(inside > 0);
  CHECK(outside > 0);
}

TEST_CASE("chart_distortion") {
  SUBCASE("isometric triangle") {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    m.faces = {{0, 1, 2}};
    const DiskChart c = DiskChart::fromData({0, 1, 2}, {0}, {{0, 1, 2}}, m.vertices,
                                            {Vec2(0, 0), Vec2(1, 0), Vec2(0, 1)}, {0, 1, 2});
    const auto d = chartDistortion(c);
    CHECK(d[0].sigmaMax == doctest::Approx(1.0));
    CHECK(d[0].sigmaMin == doctest::Approx(1.0));
    CHECK(d[0].conformal == doctest::Approx(1.0));
  }
  SUBCASE("anisotropic stretch") {
    const std::vector<Vec3> pos{{0, 0, 0}, {2, 0, 0}, {0, 1, 0}};
    const DiskChart c =
        DiskChart::fromData({0, 1, 2}, {0}, {{0, 1, 2}}, pos, {Vec2(0, 0), Vec2(1, 0), Vec2(0, 1)}, {0, 1, 2});
    const auto d = chartDistortion(c);
    CHECK(d[0].sigmaMax == doctest::Approx(2.0));
    CHECK(d[0].sigmaMin == doctest::Approx(1.0));
    CHECK(d[0].scale == doctest::Approx(2.0));
    CHECK(d[0].conformal == doctest::Approx(2.0));
  }
  SUBCASE("degenerate uv triangle reports infinity") {
    const std::vector<Vec3> pos{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    const DiskChart c =
        DiskChart::fromData({0, 1, 2}, {0}, {{0, 1, 2}}, pos, {Vec2(0, 0), Vec2(1, 0), Vec2(2, 0)}, {0, 1, 2});
    CHECK(std::isinf(chartDistortion(c)[0].sigmaMax));
  }
}

TEST_CASE("fromData rebuilds lookups") {
  const TriMesh m = fixtures::saddle(8);
  const DiskChart a = embedDisk(m);
  const DiskChart b = DiskChart::fromData(a.vertexIds(), a.faceIds(), a.faces(), a.positions(), a.uv(), a.boundary());
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Vec2 q(rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9));
    const auto pa = a.locate(q), pb = b.locate(q);
    REQUIRE(pa.has_value() == pb.has_value());
    if (pa) CHECK(a.lift(*pa) == b.lift(*pb));
  }
  CHECK(b.localVertex(a.vertexIds()[5]) == 5);
  CHECK(b.localFace(a.faceIds()[3]) == 3);
}
