#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "neused/common.hpp"

namespace neused {

// One named block of parameters living inside a ParamStore.
struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Flat, contiguous parameter vector with named sub-blocks. All trainable
// state of a scene lives in one store so optimizers, checkpoints and
// gradient buffers can address parameters by offset ranges.
class ParamStore {
 public:
  // Registers a new block and returns its offset. Values start at zero.
  std::size_t add(const std::string& name, const std::vector<int>& shape);

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const TensorInfo& info(const std::string& name) const;
  const std::vector<TensorInfo>& blocks() const { return blocks_; }

  double* data(std::size_t offset) { return values_.data() + offset; }
  const double* data(std::size_t offset) const { return values_.data() + offset; }
  double* block(const std::string& name) { return data(info(name).offset); }
  const double* block(const std::string& name) const { return data(info(name).offset); }

  std::size_t size() const { return values_.size(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool finite() const;

 private:
  std::vector<double> values_;
  std::vector<TensorInfo> blocks_;
  std::map<std::string, std::size_t> index_;
};

// Gradient accumulator matching a ParamStore's layout. Thread-local buffers
// are merged in a fixed order so results do not depend on scheduling.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(std::size_t n) : g_(n, 0.0) {}
  void resize(std::size_t n) { g_.assign(n, 0.0); }
  void clear() { std::fill(g_.begin(), g_.end(), 0.0); }
  void add(std::size_t i, double v) { g_[i] += v; }
  void merge(const GradBuffer& other);
  void scale(double s);
  double* data() { return g_.data(); }
  const double* data() const { return g_.data(); }
  std::size_t size() const { return g_.size(); }
  double& operator[](std::size_t i) { return g_[i]; }
  double operator[](std::size_t i) const { return g_[i]; }

 private:
  std::vector<double> g_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// A trainable partition: a half-open offset range with its own Adam settings.
// Parameters outside every partition are frozen.
struct ParamGroup {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;
  AdamConfig cfg;
};

// Adam over selected offset ranges of a ParamStore. First/second moment
// state spans the whole store; only listed ranges ever move.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}
  void add_group(const ParamGroup& g);
  const std::vector<ParamGroup>& groups() const { return groups_; }
  void step(ParamStore& store, const GradBuffer& grad);
  int iterations() const { return t_; }

 private:
  std::vector<double> m_, v_;
  std::vector<ParamGroup> groups_;
  int t_ = 0;
};

// Checkpoints are a small JSON header (block table plus metadata) followed
// by raw little-endian float32 payloads, one per block, in header order.
struct CheckpointMeta {
  std::string stage;             // "reconstruct" or "edit"
  std::map<std::string, std::string> extra;
};

void save_checkpoint(const std::string& path, const ParamStore& store, const CheckpointMeta& meta);
CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store);
// Reads only the header; throws CheckpointError if it is malformed.
CheckpointMeta peek_checkpoint(const std::string& path);

}  // namespace neused
