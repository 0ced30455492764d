#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neused/common.hpp"
#include "neused/hash_grid.hpp"
#include "neused/mlp.hpp"
#include "neused/params.hpp"

namespace neused {

// ---------------------------------------------------------------------------
// Generic SDF interface: closed-form test scenes and neural fields both
// implement it, so gradients, probes and mesh extraction share one code path.
// ---------------------------------------------------------------------------

class SdfField {
 public:
  virtual ~SdfField() = default;
  virtual double sdf(const Vec3& x) const = 0;
  virtual Vec3 sdf_gradient_analytic(const Vec3& x) const = 0;
};

class SphereScene final : public SdfField {
 public:
  SphereScene(const Vec3& center, double radius) : c_(center), r_(radius) {}
  double sdf(const Vec3& x) const override;
  Vec3 sdf_gradient_analytic(const Vec3& x) const override;

 private:
  Vec3 c_;
  double r_;
};

class BoxScene final : public SdfField {
 public:
  explicit BoxScene(const Vec3& half_extents) : b_(half_extents) {}
  double sdf(const Vec3& x) const override;
  Vec3 sdf_gradient_analytic(const Vec3& x) const override;

 private:
  Vec3 b_;
};

class TorusScene final : public SdfField {
 public:
  TorusScene(double major, double minor) : R_(major), r_(minor) {}
  double sdf(const Vec3& x) const override;
  Vec3 sdf_gradient_analytic(const Vec3& x) const override;

 private:
  double R_, r_;
};

enum class GradMode { analytic, numerical };

// Central differences per axis in numerical mode; exact gradient otherwise.
Vec3 sdf_gradient(const SdfField& field, const Vec3& x, GradMode mode, double h = 1e-3);

// ---------------------------------------------------------------------------
// Scene parameterization: background + source + target.
// ---------------------------------------------------------------------------

struct SceneConfig {
  HashGridConfig grid;     // source & target foreground grids
  HashGridConfig bg_grid;  // background grid over sphere-inverted coordinates
  int geo_hidden = 64;
  int geo_depth = 2;
  int color_hidden = 64;
  int color_depth = 2;
  int feat_dim = 15;
  double sphere_init_radius = 0.5;  // geometry starts as this sphere's SDF
  double sharpness_init = 20.0;
  int active_levels_init = 4;

  SceneConfig() {
    bg_grid.bound = 1.0;  // inverted points live in the unit ball
  }
};

enum class FieldSel { source, target };

// All learnable state of one scene, laid out in a single ParamStore in a
// fixed block order (background, source, target) so checkpoints and
// optimizer partitions are stable.
class FieldBundle {
 public:
  FieldBundle(ParamStore& store, const SceneConfig& cfg);
  void init(ParamStore& store, Rng& rng) const;

  const SceneConfig& config() const { return cfg_; }

  // Offset ranges (half-open) covering each trainable partition.
  struct Range {
    std::size_t begin, end;
  };
  std::vector<Range> background_ranges() const;
  std::vector<Range> source_ranges() const;  // foreground source + sharpness
  std::vector<Range> target_ranges() const;

  // Opacity slope of the sdf-to-alpha conversion. The target's learnable
  // log-sharpness is a zero-initialized offset on the source's, so the two
  // fields render identically until the edit moves the offset; gradients of
  // a target render stop at the offset and never reach the source scalar.
  double sharpness(const ParamStore& store, FieldSel which) const;
  std::size_t sharpness_offset(FieldSel which) const {
    return which == FieldSel::source ? src_rho_ : tgt_rho_;
  }

  HashGrid bg_grid, src_grid, tgt_grid;
  Mlp bg_geo, bg_color;
  Mlp src_geo, src_color;
  Mlp tgt_geo, tgt_color;

 private:
  SceneConfig cfg_;
  std::size_t src_rho_ = 0, tgt_rho_ = 0;
};

struct ParamReport {
  std::size_t identity_params = 0;  // background + source
  std::size_t edit_params = 0;      // target
  double ratio = 0.0;
};
ParamReport parameter_report(const FieldBundle& bundle);

// Progressive level schedule: linear ramp from l_init to l_max over the
// first half of training, then flat.
int progressive_schedule(int step, int total, int l_init, int l_max);

// (x/|x|, 1/|x|) for |x| >= 1: bounded coordinates for unbounded points.
Vec4 invert_sphere_point(const Vec3& x);

// ---------------------------------------------------------------------------
// Per-sample evaluation with optional reverse passes. One evaluator holds
// the caches for a single query point; renderers keep a pool per thread.
// ---------------------------------------------------------------------------

struct FgEvalRequest {
  FieldSel which = FieldSel::source;
  int active_levels = 8;
  bool want_grad = false;   // spatial SDF gradient (needed for color/normals)
  bool want_color = false;  // implies want_grad
  bool keep = false;        // retain caches for backward()
};

class FgSampleEval {
 public:
  void eval(const ParamStore& store, const FieldBundle& b, const Vec3& x, const Vec3& view_dir,
            const FgEvalRequest& req);
  // Upstream gradients for (sdf, spatial gradient, color); accumulates
  // parameter gradients for the evaluated field only (target evaluation
  // never writes into source or background parameters).
  void backward(const ParamStore& store, const FieldBundle& b, double d_sdf, const Vec3& d_grad,
                const Vec3& d_color, GradBuffer& grad) const;

  double sdf = 0.0;
  Vec3 grad_x = Vec3::Zero();  // spatial gradient (raw, unnormalized)
  Vec3 color = Vec3::Zero();
  Vec3 color_src = Vec3::Zero();  // source color (target evaluation only)

 private:
  FgEvalRequest req_;
  Vec3 x_, dir_;
  double xnorm_ = 0.0;
  // source chain
  HashGrid::Cache enc_s_;
  Mlp::Cache geo_s_, geo_s_jvp_[3], col_s_;
  std::vector<double> enc_s_out_, geo_s_out_, tan_s_[3], ty_s_[3], colin_s_;
  Vec3 grad_src_ = Vec3::Zero();
  // target chain
  HashGrid::Cache enc_t_;
  Mlp::Cache geo_t_, geo_t_jvp_[3], col_t_;
  std::vector<double> enc_t_out_, tin_, res_, tin_tan_[3], colin_t_;
  bool clamped_[3] = {false, false, false};
};

struct BgEvalRequest {
  bool want_color = true;
  bool keep = false;
};

class BgSampleEval {
 public:
  void eval(const ParamStore& store, const FieldBundle& b, const Vec3& x, const Vec3& view_dir,
            const BgEvalRequest& req);
  void backward(const ParamStore& store, const FieldBundle& b, double d_sigma, const Vec3& d_color,
                GradBuffer& grad) const;

  double sigma = 0.0;  // non-negative density
  Vec3 color = Vec3::Zero();

 private:
  BgEvalRequest req_;
  double sigma_raw_ = 0.0;
  HashGrid::Cache enc_;
  Mlp::Cache geo_, col_;
  std::vector<double> enc_in_, geo_out_, colin_;
};

// Eikonal penalty (|grad sdf| - 1)^2 at one point; returns the value and, if
// grad is non-null, accumulates d/dparams of it (scaled by weight).
double eikonal_at(const ParamStore& store, const FieldBundle& b, FieldSel which, const Vec3& x,
                  int active_levels, double weight, GradBuffer* grad);

// Read-only SDF views over the neural fields (mesh extraction, probes).
class SourceFieldView final : public SdfField {
 public:
  SourceFieldView(const ParamStore& store, const FieldBundle& b, int active_levels)
      : store_(&store), b_(&b), active_(active_levels) {}
  double sdf(const Vec3& x) const override;
  Vec3 sdf_gradient_analytic(const Vec3& x) const override;

 private:
  const ParamStore* store_;
  const FieldBundle* b_;
  int active_;
};

class TargetFieldView final : public SdfField {
 public:
  TargetFieldView(const ParamStore& store, const FieldBundle& b, int active_levels)
      : store_(&store), b_(&b), active_(active_levels) {}
  double sdf(const Vec3& x) const override;
  Vec3 sdf_gradient_analytic(const Vec3& x) const override;

 private:
  const ParamStore* store_;
  const FieldBundle* b_;
  int active_;
};

}  // namespace neused
