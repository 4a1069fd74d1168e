#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.h"
#include "ncs/errors.h"
#include "ncs/training.h"

#include <cmath>
#include <sstream>

using namespace ncs;

namespace {

using Tp64 = ad::Tape<double>;

std::vector<ad::Tensor64> toDouble(const ModelParams& m) {
  std::vector<ad::Tensor64> out;
  for (const auto& t : m.tensors) out.push_back(t.cast<double>());
  return out;
}

double totalLoss(const ModelParams& m, const TrainBatch& batch, double lambda, double* joint = nullptr,
                 double* reg = nullptr) {
  ad::Tape<float> tape;
  std::vector<ad::Tape<float>::Var> vars;
  for (const auto& t : m.tensors) vars.push_back(tape.constant(t));
  const auto g = buildLoss<float>(tape, m, vars, batch, lambda);
  if (joint) *joint = tape.value(g.joint)[0];
  if (reg) *reg = tape.value(g.reg)[0];
  return tape.value(g.total)[0];
}

ModelParams zeroFine(ModelParams m) {
  const ParamLayout l = m.layout();
  for (int idx : {l.fineWeights.back(), l.fineBiases.back()}) m.tensors[idx] = ad::Tensor32(m.tensors[idx].shape, 0.0f);
  return m;
}

bool sameTensors(const std::vector<ad::Tensor32>& a, const std::vector<ad::Tensor32>& b, std::span<const int> idx) {
  for (int i : idx) {
    if (a[i].data != b[i].data) return false;
  }
  return true;
}

} // namespace

TEST_CASE("schedule_at") {
  TrainSchedule s;
  s.warmupIters = 1000;
  s.totalIters = 4000;
  auto v = scheduleAt(s, 0);
  CHECK(v.lambda == 1.0);
  CHECK(v.lrCoarse == doctest::Approx(1e-4));
  CHECK(v.lrFine == 0.0);
  v = scheduleAt(s, 500);
  CHECK(v.lambda == doctest::Approx(0.5));
  CHECK(v.lrCoarse == doctest::Approx(5e-5));
  CHECK(v.lrFine == doctest::Approx(5e-5));
  for (long t : {1000L, 1001L, 3999L}) {
    v = scheduleAt(s, t);
    CHECK(v.lambda == 0.0);
    CHECK(v.lrCoarse == doctest::Approx(1e-6));
    CHECK(v.lrFine == doctest::Approx(1e-4));
  }
  double prevLambda = 2.0, prevFine = -1.0;
  for (long t = 0; t <= 1200; t += 7) {
    v = scheduleAt(s, t);
    CHECK(v.lambda <= prevLambda);
    CHECK(v.lrFine >= prevFine);
    CHECK(v.lrFine >= 0.0);
    prevLambda = v.lambda;
    prevFine = v.lrFine;
  }
  TrainSchedule frozen = s;
  frozen.coarseFloorLr = 0.0;
  CHECK(scheduleAt(frozen, 2000).lrCoarse == 0.0);

  TrainSchedule bad = s;
  bad.baseLr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.coarseFloorLr = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sample_batch") {
  const auto s = fixtures::tinyScene();
  const TrainBatch b = sampleBatch(s.mesh, s.global, s.patches, 200, 3);
  REQUIRE(b.size() == 200);
  std::vector<int> covering(b.size(), 0);
  for (const FineEntry& e : b.queries.entries) ++covering[e.sample];
  for (int i = 0; i < b.size(); ++i) {
    CHECK(covering[i] >= 1);
    CHECK(s.global.lift(b.points[i]) == b.targets[i]);
    CHECK(b.queries.q[i] == b.points[i].uv);
  }
  const TrainBatch again = sampleBatch(s.mesh, s.global, s.patches, 200, 3);
  CHECK(again.targets == b.targets);

  SUBCASE("single triangle") {
    TriMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    m.faces = {{0, 1, 2}};
    const DiskChart g = embedDisk(m);
    PatchSet ps = extractPatches(m, 5.0, 0.0, 1);
    const TrainBatch one = sampleBatch(m, g, ps, 1, 9);
    REQUIRE(one.size() == 1);
    CHECK(one.points[0].face == 0);
    CHECK(one.targets[0].z() == 0.0);
    CHECK(one.targets[0].x() >= 0.0);
    CHECK(one.targets[0].y() >= 0.0);
    CHECK(one.targets[0].x() + one.targets[0].y() <= 1.0 + 1e-12);
  }
  SUBCASE("select rows") {
    const std::vector<int> rows{5, 7, 11};
    const TrainBatch sub = selectRows(b, rows);
    REQUIRE(sub.size() == 3);
    CHECK(sub.targets[1] == b.targets[7]);
    for (const FineEntry& e : sub.queries.entries) CHECK(e.sample < 3);
  }
}

TEST_CASE("losses") {
  const auto s = fixtures::tinyScene();
  const TrainBatch b = sampleBatch(s.mesh, s.global, s.patches, 64, 4);
  const Evaluator ev(s.params, s.patches, s.global);
  const EvalBatch out = ev.evaluate(std::span<const ChartPoint>(b.points));

  SUBCASE("perfect model and constant offsets") {
    TrainBatch perfect = b;
    perfect.targets = out.position;
    CHECK(lossJoint(s.params, perfect) == doctest::Approx(0.0).epsilon(1e-10));
    const Vec3 t(0.1, -0.2, 0.05);
    for (auto& p : perfect.targets) p += t;
    CHECK(lossJoint(s.params, perfect) == doctest::Approx(t.squaredNorm()).epsilon(1e-4));

    TrainBatch two = selectRows(b, std::vector<int>{0, 1});
    two.targets = {out.position[0], out.position[1] + Vec3(2, 0, 0)};
    CHECK(lossJoint(s.params, two) == doctest::Approx(2.0).epsilon(1e-5));

    TrainBatch coarse = b;
    coarse.targets = out.coarse;
    CHECK(lossReg(s.params, coarse) == doctest::Approx(0.0).epsilon(1e-10));
  }
  SUBCASE("reg ignores the fine branch") {
    ModelParams other = s.params;
    for (int idx : other.layout().fineIndices()) {
      for (float& v : other.tensors[idx].data) v += 0.1f;
    }
    CHECK(lossReg(other, b) == lossReg(s.params, b));
    CHECK(lossJoint(other, b) != lossJoint(s.params, b));
    const ModelParams quiet = zeroFine(s.params);
    CHECK(lossJoint(quiet, b) == doctest::Approx(lossReg(quiet, b)).epsilon(1e-6));
  }
  SUBCASE("lambda endpoints select one term exactly") {
    double joint = 0.0, reg = 0.0;
    CHECK(totalLoss(s.params, b, 0.0, &joint, &reg) == joint);
    CHECK(totalLoss(s.params, b, 1.0) == reg);
    const double mid = totalLoss(s.params, b, 0.25, &joint, &reg);
    CHECK(mid == doctest::Approx(0.75 * joint + 0.25 * reg));
  }
}

TEST_CASE("full loss passes the finite difference check") {
  const auto s = fixtures::tinyScene();
  REQUIRE(s.patches.size() == 2);
  const TrainBatch b = sampleBatch(s.mesh, s.global, s.patches, 24, 5);
  const auto params = toDouble(s.params);
  for (double lambda : {0.0, 0.3, 1.0}) {
    const ad::FiniteDiffReport r = ad::finiteDiffCheck(
        [&](Tp64& tape, std::span<const Tp64::Var> vars) { return buildLoss<double>(tape, s.params, vars, b, lambda).total; },
        params, 1e-3, 1000, 7);
    CHECK(r.checked + r.excluded == 200);
    CHECK(r.checked >= 180);
    CHECK(r.maxRelativeError < 1e-5);
  }
}

TEST_CASE("fit") {
  const auto s = fixtures::tinyScene();
  FitOptions opt;
  opt.batchSize = 128;
  opt.seed = 3;
  opt.schedule.warmupIters = 20;
  opt.schedule.totalIters = 60;
  opt.schedule.baseLr = 1e-3;
  opt.schedule.coarseFloorLr = 1e-5;

  SUBCASE("zero iterations leave the model untouched") {
    TrainState st{s.params, {}, 0};
    FitOptions zero = opt;
    zero.schedule.totalIters = 0;
    const FitResult r = fit(s.mesh, s.global, s.patches, st, zero);
    CHECK(r.log.empty());
    CHECK(sameTensors(st.params.tensors, s.params.tensors, st.params.layout().fineIndices()));
    CHECK(sameTensors(st.params.tensors, s.params.tensors, st.params.layout().coarseIndices()));
  }
  SUBCASE("the first step only moves coarse parameters") {
    TrainState st{s.params, {}, 0};
    FitOptions one = opt;
    one.stopAt = 1;
    fit(s.mesh, s.global, s.patches, st, one);
    CHECK(st.iteration == 1);
    CHECK(sameTensors(st.params.tensors, s.params.tensors, st.params.layout().fineIndices()));
    CHECK_FALSE(sameTensors(st.params.tensors, s.params.tensors, st.params.layout().coarseIndices()));
  }
  SUBCASE("loss decreases, log rows and checkpoints") {
    TrainState st{s.params, {}, 0};
    FitOptions run = opt;
    run.logEvery = 10;
    run.checkpointEvery = 25;
    std::vector<long> saved;
    run.onCheckpoint = [&](const TrainState& state) { saved.push_back(state.iteration); };
    const double before = lossReg(st.params, sampleBatch(s.mesh, s.global, s.patches, 512, 99));
    const FitResult r = fit(s.mesh, s.global, s.patches, st, run);
    CHECK(st.iteration == 60);
    CHECK(r.log.size() == 6);
    CHECK(r.log.back().iter == 60);
    CHECK(saved == std::vector<long>{25, 50});
    CHECK(lossReg(st.params, sampleBatch(s.mesh, s.global, s.patches, 512, 99)) < before);
    CHECK(std::isfinite(r.finalLoss));

    std::ostringstream csv;
    writeLogHeader(csv);
    writeLogRow(csv, r.log.front());
    CHECK(csv.str().rfind("iter,lambda,lr_c,lr_f,L,L_joint,L_reg,wall_ms\n10,", 0) == 0);
  }
  SUBCASE("resuming matches an uninterrupted run") {
    TrainState a{s.params, {}, 0}, b{s.params, {}, 0};
    fit(s.mesh, s.global, s.patches, a, opt);
    FitOptions half = opt;
    half.stopAt = 30;
    fit(s.mesh, s.global, s.patches, b, half);
    fit(s.mesh, s.global, s.patches, b, opt);
    for (size_t i = 0; i < a.params.tensors.size(); ++i) CHECK(a.params.tensors[i].data == b.params.tensors[i].data);
  }
  SUBCASE("same seed gives identical parameters") {
    TrainState a{s.params, {}, 0}, b{s.params, {}, 0};
    const FitResult ra = fit(s.mesh, s.global, s.patches, a, opt);
    const FitResult rb = fit(s.mesh, s.global, s.patches, b, opt);
    CHECK(ra.finalLoss == rb.finalLoss);
    for (size_t i = 0; i < a.params.tensors.size(); ++i) CHECK(a.params.tensors[i].data == b.params.tensors[i].data);
    CHECK(batchSeed(3, 1) != batchSeed(3, 2));
    CHECK(batchSeed(3, 1) != batchSeed(4, 1));
  }
  SUBCASE("non-finite loss aborts at the last good state") {
    TrainState st{s.params, {}, 0};
    st.params.tensors[st.params.layout().coarseBiases.back()][0] = NAN;
    CHECK_THROWS_AS(fit(s.mesh, s.global, s.patches, st, opt), NumericError);
    CHECK(st.iteration == 0);
  }
}

TEST_CASE("feature scaling is monotone on a fitted model") {
  const auto s = fixtures::tinyScene(5);
  TrainState st{s.params, {}, 0};
  FitOptions opt;
  opt.batchSize = 256;
  opt.schedule.warmupIters = 50;
  opt.schedule.totalIters = 300;
  opt.schedule.baseLr = 1e-3;
  fit(s.mesh, s.global, s.patches, st, opt);
  const TrainBatch probe = sampleBatch(s.mesh, s.global, s.patches, 2000, 42);
  auto meanDisplacement = [&](double factor) {
    const ModelParams m = scaleDetails(st.params, factor);
    const Evaluator ev(m, s.patches, s.global);
    double sum = 0.0;
    for (const Vec3& d : ev.evaluate(std::span<const ChartPoint>(probe.points)).displacement) sum += d.norm();
    return sum / probe.size();
  };
  const double half = meanDisplacement(0.5), one = meanDisplacement(1.0), two = meanDisplacement(2.0);
  CHECK(half < one);
  CHECK(two > one);
}
