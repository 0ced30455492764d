#include "neused/hash_grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace neused {

namespace {
std::atomic<long> g_clamped{0};

inline std::size_t spatial_hash(long cx, long cy, long cz, int table_size) {
  const std::uint64_t h = std::uint64_t(cx) * 1ull ^ std::uint64_t(cy) * 2654435761ull ^
                          std::uint64_t(cz) * 805459861ull;
  return std::size_t(h & std::uint64_t(table_size - 1));
}
}  // namespace

HashGrid::HashGrid(ParamStore& store, const std::string& name, const HashGridConfig& cfg)
    : cfg_(cfg) {
  if (cfg.levels < 1 || cfg.features < 1) throw ConfigError("hash grid " + name + ": bad sizes");
  if (cfg.table_size < 8 || (cfg.table_size & (cfg.table_size - 1)) != 0)
    throw ConfigError("hash grid " + name + ": table_size must be a power of two");
  if (cfg.base_resolution < 2) throw ConfigError("hash grid " + name + ": base_resolution < 2");
  if (cfg.growth <= 1.0) throw ConfigError("hash grid " + name + ": growth must exceed 1");
  if (cfg.bound <= 0.0) throw ConfigError("hash grid " + name + ": bound must be positive");
  for (int l = 0; l < cfg.levels; ++l) {
    const int n = int(std::floor(cfg.base_resolution * std::pow(cfg.growth, l)));
    res_.push_back(n);
    const long corners = long(n + 1) * (n + 1) * (n + 1);
    dense_.push_back(corners <= long(cfg.table_size));
    level_off_.push_back(std::size_t(l) * cfg.table_size * cfg.features);
  }
  offset_ = store.add(name + ".table", {cfg.levels, cfg.table_size, cfg.features});
  total_ = std::size_t(cfg.levels) * cfg.table_size * cfg.features;
}

void HashGrid::init(ParamStore& store, Rng& rng, double scale) const {
  double* p = store.data(offset_);
  for (std::size_t i = 0; i < total_; ++i) p[i] = uniform_draw(rng, -scale, scale);
}

double HashGrid::finest_cell_size(int active_levels) const {
  const int l = std::max(0, std::min(active_levels, cfg_.levels) - 1);
  return 2.0 * cfg_.bound / res_[l];
}

long HashGrid::clamped_queries() { return g_clamped.load(std::memory_order_relaxed); }
void HashGrid::reset_clamped_queries() { g_clamped.store(0, std::memory_order_relaxed); }

void HashGrid::encode(const ParamStore& store, const Vec3& x, int active_levels, double* out,
                      Cache* cache) const {
  const int L = cfg_.levels, F = cfg_.features;
  const int active = std::max(0, std::min(active_levels, L));
  double u[3], du[3];
  bool clamped = false;
  for (int a = 0; a < 3; ++a) {
    double t = (x[a] + cfg_.bound) / (2.0 * cfg_.bound);
    du[a] = 1.0 / (2.0 * cfg_.bound);
    if (t < 0.0) { t = 0.0; du[a] = 0.0; clamped = true; }
    if (t > 1.0) { t = 1.0; du[a] = 0.0; clamped = true; }
    u[a] = t;
  }
  if (clamped) g_clamped.fetch_add(1, std::memory_order_relaxed);

  if (cache) {
    cache->idx.assign(std::size_t(L) * 8, 0);
    cache->w.assign(std::size_t(L) * 8, 0.0);
    cache->dw.assign(std::size_t(L) * 8 * 3, 0.0);
    cache->active = active;
  }
  std::fill(out, out + std::size_t(L) * F, 0.0);

  const double* table = store.data(offset_);
  for (int l = 0; l < active; ++l) {
    const int n = res_[l];
    long c[3];
    double f[3], dfdx[3];
    for (int a = 0; a < 3; ++a) {
      const double pos = u[a] * n;
      c[a] = std::min(long(pos), long(n - 1));
      f[a] = pos - double(c[a]);
      dfdx[a] = du[a] * n;
    }
    const double* tl = table + level_off_[l];
    double* ol = out + std::size_t(l) * F;
    for (int corner = 0; corner < 8; ++corner) {
      const int ix = corner & 1, iy = (corner >> 1) & 1, iz = (corner >> 2) & 1;
      const double wx = ix ? f[0] : 1.0 - f[0];
      const double wy = iy ? f[1] : 1.0 - f[1];
      const double wz = iz ? f[2] : 1.0 - f[2];
      const double w = wx * wy * wz;
      const long gx = c[0] + ix, gy = c[1] + iy, gz = c[2] + iz;
      std::size_t idx;
      if (dense_[l])
        idx = std::size_t(gx + gy * (n + 1) + gz * std::size_t(n + 1) * (n + 1));
      else
        idx = spatial_hash(gx, gy, gz, cfg_.table_size);
      const double* entry = tl + idx * F;
      for (int k = 0; k < F; ++k) ol[k] += w * entry[k];
      if (cache) {
        const std::size_t ci = std::size_t(l) * 8 + corner;
        cache->idx[ci] = offset_ + level_off_[l] + idx * F;
        cache->w[ci] = w;
        const double sx = ix ? 1.0 : -1.0;
        const double sy = iy ? 1.0 : -1.0;
        const double sz = iz ? 1.0 : -1.0;
        cache->dw[ci * 3 + 0] = sx * wy * wz * dfdx[0];
        cache->dw[ci * 3 + 1] = wx * sy * wz * dfdx[1];
        cache->dw[ci * 3 + 2] = wx * wy * sz * dfdx[2];
      }
    }
  }
}

void HashGrid::backward(const Cache& cache, const double* dout, GradBuffer& grad) const {
  const int F = cfg_.features;
  for (int l = 0; l < cache.active; ++l) {
    const double* dl = dout + std::size_t(l) * F;
    for (int corner = 0; corner < 8; ++corner) {
      const std::size_t ci = std::size_t(l) * 8 + corner;
      const double w = cache.w[ci];
      const std::size_t base = cache.idx[ci];
      for (int k = 0; k < F; ++k) grad[base + std::size_t(k)] += w * dl[k];
    }
  }
}

void HashGrid::tangent(const ParamStore& store, const Cache& cache, const Vec3& v,
                       double* tout) const {
  const int L = cfg_.levels, F = cfg_.features;
  std::fill(tout, tout + std::size_t(L) * F, 0.0);
  const double* p = store.values().data();
  for (int l = 0; l < cache.active; ++l) {
    double* tl = tout + std::size_t(l) * F;
    for (int corner = 0; corner < 8; ++corner) {
      const std::size_t ci = std::size_t(l) * 8 + corner;
      const double dwv = cache.dw[ci * 3 + 0] * v[0] + cache.dw[ci * 3 + 1] * v[1] +
                         cache.dw[ci * 3 + 2] * v[2];
      const double* entry = p + cache.idx[ci];
      for (int k = 0; k < F; ++k) tl[k] += dwv * entry[k];
    }
  }
}

void HashGrid::tangent_backward(const Cache& cache, const Vec3& v, const double* dout,
                                const double* dtout, GradBuffer& grad) const {
  const int F = cfg_.features;
  for (int l = 0; l < cache.active; ++l) {
    const double* dl = dout ? dout + std::size_t(l) * F : nullptr;
    const double* dtl = dtout + std::size_t(l) * F;
    for (int corner = 0; corner < 8; ++corner) {
      const std::size_t ci = std::size_t(l) * 8 + corner;
      const double w = cache.w[ci];
      const double dwv = cache.dw[ci * 3 + 0] * v[0] + cache.dw[ci * 3 + 1] * v[1] +
                         cache.dw[ci * 3 + 2] * v[2];
      const std::size_t base = cache.idx[ci];
      for (int k = 0; k < F; ++k)
        grad[base + std::size_t(k)] += (dl ? w * dl[k] : 0.0) + dwv * dtl[k];
    }
  }
}

}  // namespace neused
