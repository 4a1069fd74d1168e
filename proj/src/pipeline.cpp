#include "ncs/pipeline.h"

#include "ncs/errors.h"

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

namespace ncs {

int workerCount() {
  const char* env = std::getenv("NCS_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("NCS_WORKERS must be a positive integer, got '") + env + "'");
  return static_cast<int>(std::min(n, 256L));
}

Layout rebaseLayout(const TriMesh& mesh, const DiskChart& global, const PatchSet& patches) {
  auto reseat = [&](const DiskChart& c) {
    std::vector<Vec3> positions;
    positions.reserve(c.vertexIds().size());
    for (int v : c.vertexIds()) {
      if (v < 0 || v >= mesh.numVertices()) throw TopologyError("layout: chart vertex missing from the mesh");
      positions.push_back(mesh.vertices[v]);
    }
    return DiskChart::fromData(c.vertexIds(), c.faceIds(), c.faces(), std::move(positions), c.uv(), c.boundary());
  };
  Layout out;
  out.mesh = mesh;
  out.global = reseat(global);
  out.patches = patches;
  for (Patch& p : out.patches.patches) p.chart = reseat(p.chart);
  return out;
}

Layout prepareLayout(const RunConfig& config) {
  LoadReport report;
  TriMesh mesh = loadMesh(config.meshPath, &report);
  if (config.normalize) mesh = normalizeUnitSphere(mesh);
  if (!config.layoutFrom.empty()) {
    const Checkpoint source = loadCheckpoint(config.layoutFrom);
    if (source.mesh.faces != mesh.faces) {
      throw TopologyError("layout_from: " + config.layoutFrom.string() + " has different connectivity (" +
                          std::to_string(source.mesh.numFaces()) + " vs " + std::to_string(mesh.numFaces()) + " faces)");
    }
    return rebaseLayout(mesh, source.global, source.patches);
  }
  Layout out;
  out.global = embedDisk(mesh);
  out.patches = extractPatches(mesh, config.rho, config.eta, config.patchSeed);
  out.mesh = std::move(mesh);
  return out;
}

namespace {

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const TopologyError& e) {
    throw TopologyError(std::string(name) + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(std::string(name) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  }
}

} // namespace

FitSummary runFit(const RunConfig& config, std::ostream& out) {
  config.validate();
  FitSummary s;
  Checkpoint& ck = s.checkpoint;
  ck.config = config;
  Layout layout = stage("parameterize/patch", [&] { return prepareLayout(config); });
  ck.mesh = std::move(layout.mesh);
  ck.global = std::move(layout.global);
  ck.patches = std::move(layout.patches);
  out << "mesh: " << ck.mesh.numVertices() << " vertices, " << ck.mesh.numFaces() << " faces\n";
  out << "patches: " << ck.patches.size() << " (mean overlap " << ck.patches.meanOverlap() << ")\n";

  ck.state.params = stage("build", [&] { return buildModel(config.arch, ck.patches, config.seed); });
  ck.state.optimizer.init(ck.state.params.tensors);
  out << formatParameterTable(ck.state.params.counts(), config.meshPath.stem().string());

  std::filesystem::create_directories(config.outputDir);
  s.checkpointPath = config.checkpointPath();
  std::ofstream log(config.logPath());
  if (!log) throw IoError("cannot write " + config.logPath().string());
  writeLogHeader(log);

  FitOptions opt;
  opt.schedule = config.schedule;
  opt.batchSize = config.batchSize;
  opt.seed = config.seed;
  opt.logEvery = config.logEvery;
  opt.onLog = [&](const LogRow& row) { writeLogRow(log, row); };
  opt.checkpointEvery = config.checkpointEvery;
  opt.onCheckpoint = [&](const TrainState& st) {
    Checkpoint snap = ck;
    snap.state = st;
    saveCheckpoint(snap, s.checkpointPath);
  };

  const long warmup = config.schedule.warmupIters;
  try {
    if (warmup > 0 && warmup < config.schedule.totalIters) {
      opt.stopAt = warmup;
      s.result = stage("fit", [&] { return fit(ck.mesh, ck.global, ck.patches, ck.state, opt); });
      s.warmupPath = s.checkpointPath;
      s.warmupPath += ".warmup";
      saveCheckpoint(ck, s.warmupPath);
      opt.stopAt = -1;
      FitResult rest = stage("fit", [&] { return fit(ck.mesh, ck.global, ck.patches, ck.state, opt); });
      s.result.finalLoss = rest.finalLoss;
      s.result.degenerateDropped += rest.degenerateDropped;
      s.result.log.insert(s.result.log.end(), rest.log.begin(), rest.log.end());
    } else {
      s.result = stage("fit", [&] { return fit(ck.mesh, ck.global, ck.patches, ck.state, opt); });
    }
  } catch (const NumericError&) {
    // ck.state still holds the last good iteration.
    saveCheckpoint(ck, s.checkpointPath);
    throw;
  }
  saveCheckpoint(ck, s.checkpointPath);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "final loss %.9g after %ld iterations", s.result.finalLoss, ck.state.iteration);
  out << buf;
  if (s.result.degenerateDropped) out << " (" << s.result.degenerateDropped << " degenerate-frame samples dropped)";
  out << "\ncheckpoint: " << s.checkpointPath.string() << "\n";
  return s;
}

ReconstructMode reconstructModeFromString(const std::string& text) {
  if (text == "vertices") return ReconstructMode::Vertices;
  if (text == "dense") return ReconstructMode::Dense;
  throw ConfigError("unknown reconstruction mode '" + text + "' (vertices, dense)");
}

Reconstruction reconstruct(const Checkpoint& ck, const ModelParams& params, ReconstructMode mode, int resolution,
                           bool coarseOnly) {
  Evaluator evaluator(params, ck.patches, ck.global);
  evaluator.setWorkers(workerCount());
  Reconstruction rec;
  std::vector<ChartPoint> points;
  if (mode == ReconstructMode::Vertices) {
    std::vector<int> faceOf(ck.mesh.numVertices(), -1), cornerOf(ck.mesh.numVertices(), -1);
    const auto& faces = ck.global.faces();
    for (int f = 0; f < static_cast<int>(faces.size()); ++f) {
      for (int k = 0; k < 3; ++k) {
        const int v = ck.global.vertexIds()[faces[f][k]];
        if (faceOf[v] < 0) {
          faceOf[v] = f;
          cornerOf[v] = k;
        }
      }
    }
    for (int v = 0; v < ck.mesh.numVertices(); ++v) {
      if (faceOf[v] < 0) throw TopologyError("reconstruct: vertex " + std::to_string(v) + " is not in the global chart");
      Vec3 bary = Vec3::Zero();
      bary[cornerOf[v]] = 1.0;
      points.push_back(ck.global.pointOnFace(faceOf[v], bary));
    }
    rec.mesh.faces = ck.mesh.faces;
  } else {
    if (resolution < 2) throw ConfigError("reconstruct: resolution must be >= 2");
    std::vector<int> index(static_cast<size_t>(resolution) * resolution, -1);
    for (int j = 0; j < resolution; ++j) {
      for (int i = 0; i < resolution; ++i) {
        const Vec2 q(-1.0 + 2.0 * i / (resolution - 1), -1.0 + 2.0 * j / (resolution - 1));
        if (auto p = ck.global.locate(q)) {
          index[j * resolution + i] = static_cast<int>(points.size());
          points.push_back(*p);
        }
      }
    }
    auto tri = [&](int a, int b, int c) {
      if (a >= 0 && b >= 0 && c >= 0) rec.mesh.faces.push_back({a, b, c});
    };
    for (int j = 0; j + 1 < resolution; ++j) {
      for (int i = 0; i + 1 < resolution; ++i) {
        const int a = index[j * resolution + i], b = index[j * resolution + i + 1];
        const int c = index[(j + 1) * resolution + i + 1], d = index[(j + 1) * resolution + i];
        tri(a, b, c);
        tri(a, c, d);
      }
    }
  }
  if (points.empty()) throw NumericError("reconstruct: no query point inside the chart");
  const EvalBatch batch = evaluator.evaluate(points);
  rec.mesh.vertices = coarseOnly ? batch.coarse : batch.position;
  rec.degenerateFrames = coarseOnly ? 0 : batch.degenerateFrames;
  return rec;
}

Reconstruction reconstruct(const Checkpoint& ck, ReconstructMode mode, int resolution, bool coarseOnly) {
  return reconstruct(ck, ck.state.params, mode, resolution, coarseOnly);
}

std::string EvalReport::toJson() const {
  nlohmann::json j;
  j["chamfer"] = chamfer;
  j["chamfer_x1e3"] = chamfer * 1e3;
  j["samples"] = samples;
  j["parameters"] = parameters;
  j["degenerate_frames"] = degenerateFrames;
  return j.dump(2);
}

std::string EvalReport::toText() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "Chamfer x1e3: %.6f  (raw %.9g, %d samples per set)\nparameters: %ld\n",
                chamfer * 1e3, chamfer, samples, parameters);
  std::string s = buf;
  if (degenerateFrames) s += "degenerate frames (fallback used): " + std::to_string(degenerateFrames) + "\n";
  return s;
}

EvalReport evaluateReconstruction(const TriMesh& reconstruction, const TriMesh& groundTruth, int samples,
                                  std::uint64_t seed) {
  if (samples < 1) throw ConfigError("eval: samples must be >= 1");
  EvalReport r;
  r.samples = samples;
  const auto a = positionsOf(sampleSurface(reconstruction, samples, seed));
  const auto b = positionsOf(sampleSurface(groundTruth, samples, seed));
  r.chamfer = chamferDistance(a, b);
  return r;
}

EvalReport runEval(const std::filesystem::path& modelOrMesh, const std::filesystem::path& meshPath, int samples,
                   bool coarseOnly) {
  TriMesh truth = loadMesh(meshPath);
  std::string ext = modelOrMesh.extension().string();
  for (char& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".obj") {
    // Mesh against mesh: both get the same normalization.
    return evaluateReconstruction(normalizeUnitSphere(loadMesh(modelOrMesh)), normalizeUnitSphere(truth), samples);
  }
  const Checkpoint ck = loadCheckpoint(modelOrMesh);
  if (ck.config.normalize) truth = normalizeUnitSphere(truth);
  const Reconstruction rec = reconstruct(ck, ReconstructMode::Vertices, 512, coarseOnly);
  EvalReport r = evaluateReconstruction(rec.mesh, truth, samples);
  r.parameters = ck.state.params.counts().total();
  r.degenerateFrames = rec.degenerateFrames;
  return r;
}

Reconstruction runEdit(const Checkpoint& ck, double factor) {
  return reconstruct(ck, scaleDetails(ck.state.params, factor), ReconstructMode::Vertices);
}

Reconstruction runTransfer(const Checkpoint& source, const Checkpoint& target) {
  const auto hs = layoutHash(source.global, source.patches);
  const auto ht = layoutHash(target.global, target.patches);
  if (source.patches.size() != target.patches.size() || hs != ht) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "transfer: layouts are not aligned (patches %d vs %d, layout hash %016llx vs %016llx)",
                  source.patches.size(), target.patches.size(), static_cast<unsigned long long>(hs),
                  static_cast<unsigned long long>(ht));
    throw TopologyError(buf);
  }
  return reconstruct(target, transferDetails(source.state.params, target.state.params), ReconstructMode::Vertices);
}

PatchReport patchReport(const PatchSet& patches, int numVertices) {
  PatchReport r;
  for (int i = 0; i < patches.size(); ++i) {
    const Patch& p = patches.patches[i];
    PatchRow row;
    row.id = i;
    row.vertices = static_cast<int>(p.vertices.size());
    row.faces = static_cast<int>(p.faces.size());
    row.flips = p.chart.flipCount();
    for (const TriangleDistortion& d : chartDistortion(p.chart)) {
      row.maxScale = std::max(row.maxScale, d.scale);
      row.maxConformal = std::max(row.maxConformal, d.conformal);
    }
    r.rows.push_back(row);
  }
  r.meanOverlap = patches.meanOverlap();
  for (int v = 0; v < numVertices && v < static_cast<int>(patches.vertexPatches.size()); ++v) {
    const size_t k = patches.vertexPatches[v].size();
    if (r.overlapHistogram.size() <= k) r.overlapHistogram.resize(k + 1, 0);
    ++r.overlapHistogram[k];
  }
  return r;
}

std::string PatchReport::csv() const {
  std::ostringstream out;
  out << "patch,vertices,faces,flips,max_scale_distortion,max_conformal_distortion,mean_overlap\n";
  char buf[256];
  for (const PatchRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%.9g,%.9g,%.6f\n", r.id, r.vertices, r.faces, r.flips, r.maxScale,
                  r.maxConformal, meanOverlap);
    out << buf;
  }
  return out.str();
}

std::string PatchReport::summary() const {
  std::ostringstream out;
  int flips = 0;
  double worstScale = 0.0, worstConformal = 0.0;
  for (const PatchRow& r : rows) {
    flips += r.flips;
    worstScale = std::max(worstScale, r.maxScale);
    worstConformal = std::max(worstConformal, r.maxConformal);
  }
  out << "patches: " << rows.size() << "\nflipped triangles: " << flips << "\nmax scale distortion: " << worstScale
      << "\nmax conformal distortion: " << worstConformal << "\nmean overlap: " << meanOverlap << "\noverlap histogram:";
  for (size_t k = 1; k < overlapHistogram.size(); ++k) out << " " << k << ":" << overlapHistogram[k];
  out << "\n";
  return out.str();
}

} // namespace ncs
