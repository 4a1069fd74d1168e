#include "ncs/config.h"

#include "ncs/errors.h"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace ncs {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

struct Field {
  std::string where;
  std::string value;

  [[noreturn]] void bad(const std::string& expected) const {
    throw ConfigError(where + ": expected " + expected + ", got '" + value + "'");
  }

  template <class N>
  N number() const {
    N out{};
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) bad("a number");
    return out;
  }

  bool boolean() const {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    bad("true/false");
  }

  std::vector<int> intList() const {
    std::vector<int> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      Field f{where, trim(item)};
      out.push_back(f.number<int>());
    }
    return out;
  }
};

std::string joinInts(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

} // namespace

void RunConfig::validate() const {
  arch.validate();
  schedule.validate();
  if (!(rho > 0.0)) throw ConfigError("patches.rho must be positive");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("patches.eta must be in [0, 1]");
  if (batchSize < 1) throw ConfigError("train.batch_size must be >= 1");
  if (checkpointEvery < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (logEvery < 1) throw ConfigError("train.log_every must be >= 1");
}

RunConfig parseConfig(std::istream& in, const std::filesystem::path& baseDir, const std::string& name) {
  RunConfig c;
  auto path = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() || baseDir.empty() ? p : baseDir / p;
  };
  using Setter = std::function<void(const Field&)>;
  const std::map<std::string, Setter> setters = {
      {"mesh.path", [&](const Field& f) { c.meshPath = path(f.value); }},
      {"mesh.normalize", [&](const Field& f) { c.normalize = f.boolean(); }},
      {"arch.coarse_widths", [&](const Field& f) { c.arch.coarseWidths = f.intList(); }},
      {"arch.code_channels", [&](const Field& f) { c.arch.codeChannels = f.number<int>(); }},
      {"arch.code_height", [&](const Field& f) { c.arch.codeHeight = f.number<int>(); }},
      {"arch.code_width", [&](const Field& f) { c.arch.codeWidth = f.number<int>(); }},
      {"arch.cnn_channels", [&](const Field& f) { c.arch.cnnChannels = f.number<int>(); }},
      {"arch.cnn_blocks", [&](const Field& f) { c.arch.cnnBlocks = f.number<int>(); }},
      {"arch.fine_widths", [&](const Field& f) { c.arch.fineWidths = f.intList(); }},
      {"arch.mode", [&](const Field& f) { c.arch.mode = displacementModeFromString(f.value); }},
      {"patches.rho", [&](const Field& f) { c.rho = f.number<double>(); }},
      {"patches.eta", [&](const Field& f) { c.eta = f.number<double>(); }},
      {"patches.seed", [&](const Field& f) { c.patchSeed = f.number<std::uint64_t>(); }},
      {"patches.layout_from", [&](const Field& f) { c.layoutFrom = f.value.empty() ? std::filesystem::path() : path(f.value); }},
      {"train.warmup_iters", [&](const Field& f) { c.schedule.warmupIters = f.number<long>(); }},
      {"train.total_iters", [&](const Field& f) { c.schedule.totalIters = f.number<long>(); }},
      {"train.base_lr", [&](const Field& f) { c.schedule.baseLr = f.number<double>(); }},
      {"train.coarse_floor_lr", [&](const Field& f) { c.schedule.coarseFloorLr = f.number<double>(); }},
      {"train.batch_size", [&](const Field& f) { c.batchSize = f.number<int>(); }},
      {"train.seed", [&](const Field& f) { c.seed = f.number<std::uint64_t>(); }},
      {"train.checkpoint_every", [&](const Field& f) { c.checkpointEvery = f.number<long>(); }},
      {"train.log_every", [&](const Field& f) { c.logEvery = f.number<long>(); }},
      {"output.dir", [&](const Field& f) { c.outputDir = path(f.value); }},
      {"output.checkpoint", [&](const Field& f) { c.checkpointName = f.value; }},
      {"output.log", [&](const Field& f) { c.logName = f.value; }},
  };
  const std::set<std::string> sections = {"mesh", "arch", "patches", "train", "output"};

  std::string section;
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    const std::string where = name + ":" + std::to_string(lineNo);
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string key = section + "." + trim(line.substr(0, eq));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    it->second(Field{where + " (" + key + ")", trim(line.substr(eq + 1))});
  }
  c.validate();
  return c;
}

RunConfig loadConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parseConfig(in, path.parent_path(), path.string());
}

std::string formatConfig(const RunConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "[mesh]\npath = " << c.meshPath.string() << "\nnormalize = " << (c.normalize ? "true" : "false") << "\n\n";
  out << "[arch]\ncoarse_widths = " << joinInts(c.arch.coarseWidths) << "\ncode_channels = " << c.arch.codeChannels
      << "\ncode_height = " << c.arch.codeHeight << "\ncode_width = " << c.arch.codeWidth
      << "\ncnn_channels = " << c.arch.cnnChannels << "\ncnn_blocks = " << c.arch.cnnBlocks
      << "\nfine_widths = " << joinInts(c.arch.fineWidths) << "\nmode = " << toString(c.arch.mode) << "\n\n";
  out << "[patches]\nrho = " << c.rho << "\neta = " << c.eta << "\nseed = " << c.patchSeed
      << "\nlayout_from = " << c.layoutFrom.string() << "\n\n";
  out << "[train]\nwarmup_iters = " << c.schedule.warmupIters << "\ntotal_iters = " << c.schedule.totalIters
      << "\nbase_lr = " << c.schedule.baseLr << "\ncoarse_floor_lr = " << c.schedule.coarseFloorLr
      << "\nbatch_size = " << c.batchSize << "\nseed = " << c.seed << "\ncheckpoint_every = " << c.checkpointEvery
      << "\nlog_every = " << c.logEvery << "\n\n";
  out << "[output]\ndir = " << c.outputDir.string() << "\ncheckpoint = " << c.checkpointName << "\nlog = " << c.logName
      << "\n";
  return out.str();
}

} // namespace ncs
