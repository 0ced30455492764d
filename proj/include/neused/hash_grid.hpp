#pragma once

#include <atomic>
#include <string>
#include <vector>

#include "neused/common.hpp"
#include "neused/params.hpp"

namespace neused {

struct HashGridConfig {
  int levels = 8;
  int features = 2;
  int table_size = 1 << 14;  // power of two
  int base_resolution = 16;
  double growth = 1.5;
  double bound = 1.5;  // queries live in [-bound, bound]^3
};

// Multiresolution feature grid. Level l has resolution N_l = floor(N_min *
// growth^l); cells are trilinearly interpolated. Levels whose full corner
// lattice fits in the table are indexed densely (collision-free); finer
// levels fall back to a spatial hash. Output is the concatenation over
// levels; levels past `active_levels` contribute exact zeros and receive no
// gradient.
class HashGrid {
 public:
  HashGrid() = default;
  HashGrid(ParamStore& store, const std::string& name, const HashGridConfig& cfg);

  void init(ParamStore& store, Rng& rng, double scale = 1e-4) const;

  const HashGridConfig& config() const { return cfg_; }
  int out_dim() const { return cfg_.levels * cfg_.features; }
  int resolution(int level) const { return res_[level]; }
  std::size_t param_count() const { return total_; }
  std::size_t param_begin() const { return offset_; }
  std::size_t param_end() const { return offset_ + total_; }
  // Edge length of one cell at the finest active level (world units).
  double finest_cell_size(int active_levels) const;

  // Out-of-box queries are clamped; this counts them for debug reporting.
  static long clamped_queries();
  static void reset_clamped_queries();

  struct Cache {
    std::vector<std::size_t> idx;  // 8 corner offsets (absolute) per level
    std::vector<double> w;         // 8 trilinear weights per level
    std::vector<double> dw;       // d w / d x, 3 per corner per level
    int active = 0;
  };

  void encode(const ParamStore& store, const Vec3& x, int active_levels, double* out,
              Cache* cache = nullptr) const;
  void backward(const Cache& cache, const double* dout, GradBuffer& grad) const;
  // Directional derivative of the encoding along v, using a filled cache.
  void tangent(const ParamStore& store, const Cache& cache, const Vec3& v, double* tout) const;
  // Reverse pass through (out, tout) for tangent direction v.
  void tangent_backward(const Cache& cache, const Vec3& v, const double* dout,
                        const double* dtout, GradBuffer& grad) const;

 private:
  HashGridConfig cfg_;
  std::vector<int> res_;
  std::vector<std::size_t> level_off_;  // offset of each level's table (in features)
  std::vector<bool> dense_;
  std::size_t offset_ = 0;  // base offset in the store
  std::size_t total_ = 0;
};

}  // namespace neused
