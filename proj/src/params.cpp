#include "neused/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "json.hpp"

namespace neused {

using nlohmann::json;

std::size_t ParamStore::add(const std::string& name, const std::vector<int>& shape) {
  if (index_.count(name)) throw ConfigError("duplicate parameter block: " + name);
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ConfigError("parameter block " + name + " has a non-positive dimension");
    n *= std::size_t(d);
  }
  TensorInfo info;
  info.name = name;
  info.shape = shape;
  info.offset = values_.size();
  info.size = n;
  index_[name] = blocks_.size();
  blocks_.push_back(info);
  values_.resize(values_.size() + n, 0.0);
  return info.offset;
}

const TensorInfo& ParamStore::info(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter block: " + name);
  return blocks_[it->second];
}

bool ParamStore::finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

void GradBuffer::merge(const GradBuffer& other) {
  if (other.size() != size()) throw ShapeError("gradient buffer size mismatch in merge");
  for (std::size_t i = 0; i < g_.size(); ++i) g_[i] += other.g_[i];
}

void GradBuffer::scale(double s) {
  for (double& v : g_) v *= s;
}

void AdamOptimizer::add_group(const ParamGroup& g) {
  if (g.end < g.begin || g.end > m_.size())
    throw ConfigError("optimizer group " + g.name + " range is out of bounds");
  for (const auto& existing : groups_)
    if (g.begin < existing.end && existing.begin < g.end)
      throw ConfigError("optimizer group " + g.name + " overlaps " + existing.name);
  groups_.push_back(g);
}

void AdamOptimizer::step(ParamStore& store, const GradBuffer& grad) {
  if (grad.size() != store.size()) throw ShapeError("gradient size does not match store");
  ++t_;
  for (const auto& g : groups_) {
    const double b1t = 1.0 - std::pow(g.cfg.beta1, t_);
    const double b2t = 1.0 - std::pow(g.cfg.beta2, t_);
    double* p = store.values().data();
    for (std::size_t i = g.begin; i < g.end; ++i) {
      const double gi = grad[i];
      m_[i] = g.cfg.beta1 * m_[i] + (1.0 - g.cfg.beta1) * gi;
      v_[i] = g.cfg.beta2 * v_[i] + (1.0 - g.cfg.beta2) * gi * gi;
      const double mhat = m_[i] / b1t;
      const double vhat = v_[i] / b2t;
      p[i] -= g.cfg.lr * mhat / (std::sqrt(vhat) + g.cfg.eps);
    }
  }
}

namespace {

constexpr const char* kMagic = "NEUSED1";

void write_f32_le(std::ofstream& out, const double* src, std::size_t n) {
  std::vector<unsigned char> buf(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    float f = float(src[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    buf[4 * i + 0] = (unsigned char)(bits & 0xff);
    buf[4 * i + 1] = (unsigned char)((bits >> 8) & 0xff);
    buf[4 * i + 2] = (unsigned char)((bits >> 16) & 0xff);
    buf[4 * i + 3] = (unsigned char)((bits >> 24) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

void read_f32_le(std::ifstream& in, double* dst, std::size_t n) {
  std::vector<unsigned char> buf(n * 4);
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (!in) throw CheckpointError("checkpoint payload is truncated");
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = std::uint32_t(buf[4 * i + 0]) | (std::uint32_t(buf[4 * i + 1]) << 8) |
                         (std::uint32_t(buf[4 * i + 2]) << 16) |
                         (std::uint32_t(buf[4 * i + 3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    dst[i] = double(f);
  }
}

json read_header(std::ifstream& in, const std::string& path) {
  std::string magic;
  std::size_t header_len = 0;
  in >> magic >> header_len;
  if (!in || magic != kMagic)
    throw CheckpointError("not a checkpoint file: " + path);
  in.get();  // the newline after the length
  std::string header(header_len, '\0');
  in.read(header.data(), std::streamsize(header_len));
  if (!in) throw CheckpointError("checkpoint header is truncated: " + path);
  try {
    return json::parse(header);
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const CheckpointMeta& meta) {
  json header;
  header["stage"] = meta.stage;
  header["extra"] = meta.extra;
  json blocks = json::array();
  for (const auto& b : store.blocks()) {
    json jb;
    jb["name"] = b.name;
    jb["shape"] = b.shape;
    jb["size"] = b.size;
    blocks.push_back(jb);
  }
  header["blocks"] = blocks;
  const std::string hs = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + tmp);
    out << kMagic << ' ' << hs.size() << '\n';
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& b : store.blocks()) write_f32_le(out, store.data(b.offset), b.size);
    if (!out) throw CheckpointError("checkpoint write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw CheckpointError("cannot move checkpoint into place: " + path);
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  json header = read_header(in, path);

  CheckpointMeta meta;
  try {
    meta.stage = header.at("stage").get<std::string>();
    if (header.contains("extra"))
      meta.extra = header["extra"].get<std::map<std::string, std::string>>();
    const auto& blocks = header.at("blocks");
    if (blocks.size() != store.blocks().size())
      throw CheckpointError("checkpoint block count does not match the scene");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& jb = blocks[i];
      const auto& sb = store.blocks()[i];
      if (jb.at("name").get<std::string>() != sb.name)
        throw CheckpointError("checkpoint block order mismatch at " + sb.name);
      if (jb.at("shape").get<std::vector<int>>() != sb.shape)
        throw CheckpointError("checkpoint block shape mismatch at " + sb.name);
      read_f32_le(in, store.data(sb.offset), sb.size);
    }
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint header is missing fields: " + std::string(e.what()));
  }
  return meta;
}

CheckpointMeta peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  json header = read_header(in, path);
  CheckpointMeta meta;
  try {
    meta.stage = header.at("stage").get<std::string>();
    if (header.contains("extra"))
      meta.extra = header["extra"].get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint header is missing fields: " + std::string(e.what()));
  }
  return meta;
}

int worker_count() {
  int n = 1;
#ifdef _OPENMP
  n = omp_get_max_threads();
#endif
  if (const char* env = std::getenv("NEUSED_THREADS")) {
    char* end = nullptr;
    long cap = std::strtol(env, &end, 10);
    if (end && *end == '\0' && cap > 0) n = std::min(n, int(std::min<long>(cap, 256)));
  }
  return std::max(1, n);
}

}  // namespace neused
