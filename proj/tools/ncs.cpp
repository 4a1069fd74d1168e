#include "ncs/checkpoint.h"
#include "ncs/config.h"
#include "ncs/errors.h"
#include "ncs/pipeline.h"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace {

fs::path defaultOut(const fs::path& input, const std::string& suffix) {
  fs::path out = input;
  out.replace_extension();
  out += suffix;
  return out;
}

void report(const ncs::Reconstruction& rec, const fs::path& out) {
  ncs::exportMesh(rec.mesh, out);
  std::cout << "wrote " << out.string() << " (" << rec.mesh.numVertices() << " vertices, " << rec.mesh.numFaces()
            << " faces)\n";
  if (rec.degenerateFrames) std::cout << "degenerate frames (fallback used): " << rec.degenerateFrames << "\n";
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural convolutional surfaces: fit, reconstruct, evaluate and edit a mesh"};
  app.require_subcommand(1);

  std::string fitConfig;
  auto* fit = app.add_subcommand("fit", "Parameterize, patch and fit a mesh");
  fit->add_option("config", fitConfig, "Run configuration file")->required();

  std::string recCkpt, recMode = "vertices", recOut;
  int recRes = 512;
  bool recCoarse = false;
  auto* rec = app.add_subcommand("reconstruct", "Export the fitted surface as OBJ");
  rec->add_option("checkpoint", recCkpt)->required();
  rec->add_option("--mode", recMode, "vertices | dense")->check(CLI::IsMember({"vertices", "dense"}));
  rec->add_option("--res", recRes, "Dense grid resolution");
  rec->add_option("-o,--out", recOut, "Output OBJ");
  rec->add_flag("--coarse", recCoarse, "Coarse branch only");

  std::string evalModel, evalMesh;
  int evalSamples = 100000;
  bool evalJson = false, evalCoarse = false;
  auto* eval = app.add_subcommand("eval", "Chamfer distance against the ground truth");
  eval->add_option("checkpoint", evalModel, "Checkpoint or OBJ")->required();
  eval->add_option("mesh", evalMesh, "Ground-truth OBJ")->required();
  eval->add_option("--samples", evalSamples, "Points sampled per set");
  eval->add_flag("--json", evalJson, "Machine-readable output");
  eval->add_flag("--coarse", evalCoarse, "Coarse branch only");

  std::string editCkpt, editOut;
  double editFactor = 1.0;
  auto* edit = app.add_subcommand("edit", "Reconstruct with scaled detail features");
  edit->add_option("checkpoint", editCkpt)->required();
  edit->add_option("--factor", editFactor, "Feature scale (<1 smooths, >1 sharpens)")->required();
  edit->add_option("-o,--out", editOut, "Output OBJ");

  std::string trSource, trTarget, trOut;
  auto* transfer = app.add_subcommand("transfer", "Apply the source's details to the target's coarse surface");
  transfer->add_option("source", trSource)->required();
  transfer->add_option("target", trTarget)->required();
  transfer->add_option("-o,--out", trOut, "Output OBJ");

  std::string patchInput, patchCsv;
  auto* patches = app.add_subcommand("patches", "Patch decomposition diagnostics");
  patches->add_option("input", patchInput, "Config or checkpoint")->required();
  patches->add_option("-o,--out", patchCsv, "CSV output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ncs::ErrorKind::Config);
  }

  try {
    if (*fit) {
      ncs::runFit(ncs::loadConfig(fitConfig), std::cout);
    } else if (*rec) {
      const auto ck = ncs::loadCheckpoint(recCkpt);
      const auto mode = ncs::reconstructModeFromString(recMode);
      report(ncs::reconstruct(ck, mode, recRes, recCoarse),
             recOut.empty() ? defaultOut(recCkpt, "_" + recMode + ".obj") : fs::path(recOut));
    } else if (*eval) {
      const auto r = ncs::runEval(evalModel, evalMesh, evalSamples, evalCoarse);
      std::cout << (evalJson ? r.toJson() + "\n" : r.toText());
    } else if (*edit) {
      const auto ck = ncs::loadCheckpoint(editCkpt);
      report(ncs::runEdit(ck, editFactor), editOut.empty() ? defaultOut(editCkpt, "_edit.obj") : fs::path(editOut));
    } else if (*transfer) {
      const auto src = ncs::loadCheckpoint(trSource);
      const auto dst = ncs::loadCheckpoint(trTarget);
      report(ncs::runTransfer(src, dst), trOut.empty() ? defaultOut(trTarget, "_transfer.obj") : fs::path(trOut));
    } else if (*patches) {
      ncs::PatchSet set;
      int numVertices = 0;
      std::string ext = fs::path(patchInput).extension().string();
      if (ext == ".ncs" || ext == ".warmup") {
        auto ck = ncs::loadCheckpoint(patchInput);
        set = std::move(ck.patches);
        numVertices = ck.mesh.numVertices();
      } else {
        auto layout = ncs::prepareLayout(ncs::loadConfig(patchInput));
        set = std::move(layout.patches);
        numVertices = layout.mesh.numVertices();
      }
      const auto r = ncs::patchReport(set, numVertices);
      if (patchCsv.empty()) {
        std::cout << r.csv();
      } else {
        std::ofstream out(patchCsv);
        if (!out) throw ncs::IoError("cannot write " + patchCsv);
        out << r.csv();
      }
      std::cerr << r.summary();
    }
  } catch (const ncs::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
