#include "ncs/checkpoint.h"

#include "ncs/errors.h"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace ncs {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'N', 'C', 'S', 'C', 'K', 'P', 'T', '\0'};

class Writer {
public:
  std::vector<std::uint8_t> bytes;

  template <class T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  template <class T>
  void array(const std::vector<T>& v) {
    pod<std::uint64_t>(v.size());
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    bytes.insert(bytes.end(), p, p + sizeof(T) * v.size());
  }
  void string(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void vec3s(const std::vector<Vec3>& v) {
    pod<std::uint64_t>(v.size());
    for (const Vec3& p : v) {
      for (int k = 0; k < 3; ++k) pod<double>(p[k]);
    }
  }
  void vec2s(const std::vector<Vec2>& v) {
    pod<std::uint64_t>(v.size());
    for (const Vec2& p : v) {
      pod<double>(p[0]);
      pod<double>(p[1]);
    }
  }
  void faces(const std::vector<Face>& f) {
    pod<std::uint64_t>(f.size());
    for (const Face& t : f) {
      for (int k = 0; k < 3; ++k) pod<std::int32_t>(t[k]);
    }
  }
  void tensor(const ad::Tensor32& t) {
    array<std::int32_t>(std::vector<std::int32_t>(t.shape.begin(), t.shape.end()));
    array<float>(t.data);
  }
  void chart(const DiskChart& c) {
    array<std::int32_t>(std::vector<std::int32_t>(c.vertexIds().begin(), c.vertexIds().end()));
    array<std::int32_t>(std::vector<std::int32_t>(c.faceIds().begin(), c.faceIds().end()));
    faces(c.faces());
    vec3s(c.positions());
    vec2s(c.uv());
    array<std::int32_t>(std::vector<std::int32_t>(c.boundary().begin(), c.boundary().end()));
  }
};

class Reader {
public:
  Reader(const std::uint8_t* data, size_t size) : data_(data), size_(size) {}

  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <class T>
  std::vector<T> array() {
    const auto n = count(sizeof(T));
    std::vector<T> v(n);
    if (n) std::memcpy(v.data(), data_ + pos_, sizeof(T) * n);
    pos_ += sizeof(T) * n;
    return v;
  }
  std::vector<int> ints() {
    auto v = array<std::int32_t>();
    return {v.begin(), v.end()};
  }
  std::string string() {
    const auto n = count(1);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<Vec3> vec3s() {
    const auto n = count(24);
    std::vector<Vec3> v(n);
    for (auto& p : v) {
      for (int k = 0; k < 3; ++k) p[k] = pod<double>();
    }
    return v;
  }
  std::vector<Vec2> vec2s() {
    const auto n = count(16);
    std::vector<Vec2> v(n);
    for (auto& p : v) {
      p[0] = pod<double>();
      p[1] = pod<double>();
    }
    return v;
  }
  std::vector<Face> faces() {
    const auto n = count(12);
    std::vector<Face> f(n);
    for (auto& t : f) {
      for (int k = 0; k < 3; ++k) t[k] = pod<std::int32_t>();
    }
    return f;
  }
  ad::Tensor32 tensor() {
    ad::Tensor32 t;
    t.shape = ints();
    t.data = array<float>();
    if (ad::Tensor32::count(t.shape) != t.data.size()) throw IoError("checkpoint: tensor shape does not match its data");
    return t;
  }
  DiskChart chart() {
    auto vertexIds = ints();
    auto faceIds = ints();
    auto f = faces();
    auto positions = vec3s();
    auto uv = vec2s();
    auto boundary = ints();
    if (uv.empty() || uv.size() != positions.size() || f.size() != faceIds.size()) {
      throw IoError("checkpoint: inconsistent chart record");
    }
    return DiskChart::fromData(std::move(vertexIds), std::move(faceIds), std::move(f), std::move(positions),
                               std::move(uv), std::move(boundary));
  }
  bool done() const { return pos_ == size_; }

private:
  const std::uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;

  void need(size_t n) const {
    if (size_ - pos_ < n) throw IoError("checkpoint: truncated payload");
  }
  size_t count(size_t elementSize) {
    const auto n = pod<std::uint64_t>();
    if (n > (size_ - pos_) / elementSize) throw IoError("checkpoint: truncated payload");
    return static_cast<size_t>(n);
  }
};

std::uint32_t crc(const std::uint8_t* data, size_t size) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<size_t>(size, 1u << 30));
    c = crc32(c, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

} // namespace

std::vector<std::uint8_t> serializeCheckpoint(const Checkpoint& ck) {
  Writer w;
  w.string(formatConfig(ck.config));
  w.vec3s(ck.mesh.vertices);
  w.faces(ck.mesh.faces);
  w.chart(ck.global);

  const PatchSet& ps = ck.patches;
  w.pod<double>(ps.rho);
  w.pod<double>(ps.eta);
  w.pod<double>(ps.radius);
  w.pod<std::uint64_t>(ps.patches.size());
  for (const Patch& p : ps.patches) {
    w.pod<std::int32_t>(p.center);
    w.array<std::int32_t>(std::vector<std::int32_t>(p.vertices.begin(), p.vertices.end()));
    w.array<std::int32_t>(std::vector<std::int32_t>(p.faces.begin(), p.faces.end()));
    w.chart(p.chart);
  }

  const ModelParams& m = ck.state.params;
  w.pod<std::int32_t>(m.numPatches);
  w.pod<float>(m.detailScale);
  w.pod<std::uint64_t>(m.tensors.size());
  for (size_t i = 0; i < m.tensors.size(); ++i) {
    w.string(m.names[i]);
    w.tensor(m.tensors[i]);
  }
  w.tensor(m.pcaFrames);

  const ad::RmsProp& opt = ck.state.optimizer;
  w.pod<double>(opt.decay());
  w.pod<double>(opt.epsilon());
  w.pod<std::uint64_t>(opt.state().size());
  for (const auto& t : opt.state()) w.tensor(t);
  w.pod<std::int64_t>(ck.state.iteration);

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  Writer header;
  header.pod<std::uint32_t>(kCheckpointVersion);
  header.pod<std::uint64_t>(w.bytes.size());
  header.pod<std::uint32_t>(crc(w.bytes.data(), w.bytes.size()));
  out.insert(out.end(), header.bytes.begin(), header.bytes.end());
  out.insert(out.end(), w.bytes.begin(), w.bytes.end());
  return out;
}

Checkpoint deserializeCheckpoint(const std::vector<std::uint8_t>& bytes) {
  constexpr size_t kHeader = 8 + 4 + 8 + 4;
  if (bytes.size() < kHeader || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw IoError("checkpoint: missing magic header (not a checkpoint file)");
  }
  Reader head(bytes.data() + 8, kHeader - 8);
  const auto version = head.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported format version " + std::to_string(version) + " (this build reads version " +
                  std::to_string(kCheckpointVersion) + ")");
  }
  const auto size = head.pod<std::uint64_t>();
  const auto expected = head.pod<std::uint32_t>();
  if (bytes.size() - kHeader != size) throw IoError("checkpoint: truncated file");
  if (crc(bytes.data() + kHeader, size) != expected) throw IoError("checkpoint: checksum mismatch (corrupted file)");

  Reader r(bytes.data() + kHeader, size);
  Checkpoint ck;
  std::istringstream cfg(r.string());
  ck.config = parseConfig(cfg, {}, "<checkpoint config>");
  ck.mesh.vertices = r.vec3s();
  ck.mesh.faces = r.faces();
  ck.global = r.chart();

  PatchSet& ps = ck.patches;
  ps.rho = r.pod<double>();
  ps.eta = r.pod<double>();
  ps.radius = r.pod<double>();
  const auto np = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < np; ++i) {
    Patch p;
    p.center = r.pod<std::int32_t>();
    p.vertices = r.ints();
    p.faces = r.ints();
    p.chart = r.chart();
    ps.patches.push_back(std::move(p));
  }
  for (const Patch& p : ps.patches) {
    for (int f : p.faces) {
      if (f < 0 || f >= ck.mesh.numFaces()) throw IoError("checkpoint: patch face index out of range");
    }
    for (int v : p.vertices) {
      if (v < 0 || v >= ck.mesh.numVertices()) throw IoError("checkpoint: patch vertex index out of range");
    }
  }
  ps.rebuildCoverage(ck.mesh.numVertices(), ck.mesh.numFaces());

  ModelParams& m = ck.state.params;
  m.arch = ck.config.arch;
  m.numPatches = r.pod<std::int32_t>();
  m.detailScale = r.pod<float>();
  const auto nt = r.pod<std::uint64_t>();
  if (nt != static_cast<std::uint64_t>(m.layout().count)) throw IoError("checkpoint: tensor count does not match the architecture");
  for (std::uint64_t i = 0; i < nt; ++i) {
    m.names.push_back(r.string());
    m.tensors.push_back(r.tensor());
  }
  m.pcaFrames = r.tensor();

  const double decay = r.pod<double>();
  const double eps = r.pod<double>();
  ck.state.optimizer = ad::RmsProp(decay, eps);
  const auto ns = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < ns; ++i) ck.state.optimizer.state().push_back(r.tensor());
  ck.state.iteration = r.pod<std::int64_t>();
  if (!r.done()) throw IoError("checkpoint: trailing bytes after payload");
  return ck;
}

void saveCheckpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serializeCheckpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint loadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserializeCheckpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::uint64_t layoutHash(const DiskChart& global, const PatchSet& patches) {
  // Connectivity and 2D coordinates only: aligned shapes differ in their 3D positions.
  Writer w;
  auto add = [&](const DiskChart& c) {
    w.array<std::int32_t>(std::vector<std::int32_t>(c.vertexIds().begin(), c.vertexIds().end()));
    w.faces(c.faces());
    w.vec2s(c.uv());
  };
  add(global);
  for (const Patch& p : patches.patches) add(p.chart);
  std::uint64_t h = 1469598103934665603ull;
  for (std::uint8_t b : w.bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint32_t fileCrc32(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return crc(bytes.data(), bytes.size());
}

} // namespace ncs
