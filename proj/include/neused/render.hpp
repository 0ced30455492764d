#pragma once

#include <functional>
#include <vector>

#include "neused/common.hpp"
#include "neused/fields.hpp"
#include "neused/tensor.hpp"

namespace neused {

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Mat4 pose = Mat4::Identity();  // camera-to-world; camera looks along -z
};

struct Ray {
  Vec3 o = Vec3::Zero();
  Vec3 d = Vec3::UnitZ();
};

// Throws DatasetError unless the rotation part is orthonormal with det +1.
void validate_pose(const Mat4& pose);

// Ray through the center of pixel (px, py); px is the column index.
Ray generate_ray(const Camera& cam, int px, int py);

struct PhongMaterial {
  double ka = 0.1, kd = 0.7, ks = 0.2, p = 32.0;
};

// Scalar Phong shade, clamped to [0,1]: ambient + diffuse + specular with
// the reflection vector r = 2(n.l)n - l. Zero-length normals shade ambient.
double phong_shade_scalar(const Vec3& n, const Vec3& l, const Vec3& v, const PhongMaterial& m);
Vec3 phong_shade(const Vec3& n, const Vec3& l, const Vec3& v, const PhongMaterial& m);

// Opacity of one SDF interval under a logistic CDF of slope s.
double neus_alpha(double sdf_i, double sdf_ip1, double s);

struct VolumeResult {
  Vec3 rgb = Vec3::Zero();
  double mask = 0.0;
  double depth = 0.0;
  std::vector<double> weights;
};
// Front-to-back compositing of per-interval opacities and colors.
VolumeResult volume_render(const std::vector<double>& alphas, const std::vector<Vec3>& colors,
                           const std::vector<double>& ts);

// Affine foreground/background blend. Out-of-range masks are clamped and
// counted (debug aid).
Vec3 composite(const Vec3& fg, const Vec3& bg, double mask);
long composite_clamped_masks();
void reset_composite_clamped_masks();

struct RenderConfig {
  int fg_samples = 64;  // intervals; sdf is evaluated at fg_samples+1 points
  int bg_samples = 32;
  int active_levels = 8;
  bool want_phong = false;
  GradMode phong_normal_mode = GradMode::numerical;
  double phong_h = 0.0;  // 0 = half of the finest active grid cell
  double r_max = 1000.0;
  double jitter_fg = 0.0;  // in [0,1): stratified shift of the sample comb
  double jitter_bg = 0.0;
  PhongMaterial material;
};

struct RenderOutput {
  Vec3 rgb_fg = Vec3::Zero();  // opacity-normalized foreground color
  Vec3 rgb_bg = Vec3::Zero();
  Vec3 rgb = Vec3::Zero();  // mask*rgb_fg + (1-mask)*rgb_bg
  Vec3 normal = Vec3::Zero();
  Vec3 phong = Vec3::Zero();
  double mask = 0.0;
  double depth = 0.0;
  bool bg_degenerate = false;  // ray never reaches the background shell
};

// One ray's full render with everything retained for the reverse pass.
// Forward and backward must be called on the same instance; instances are
// reused across rays to amortize buffer allocation (one per worker thread).
class RayWorkspace {
 public:
  RenderOutput forward(const ParamStore& store, const FieldBundle& b, const Ray& ray,
                       FieldSel which, const RenderConfig& cfg, bool keep);
  // Upstream gradients on the composite color and the Phong channel.
  void backward(const ParamStore& store, const FieldBundle& b, const Vec3& d_rgb,
                const Vec3& d_phong, GradBuffer& grad) const;

 private:
  RenderConfig cfg_;
  FieldSel which_ = FieldSel::source;
  Ray ray_;
  bool keep_ = false;
  // foreground
  bool fg_hit_ = false;
  int n_fg_ = 0;
  std::vector<FgSampleEval> fg_;
  std::vector<double> t_, alpha_, w_, T_;
  double s_ = 0.0;
  Vec3 premult_ = Vec3::Zero();
  double mask_ = 0.0, depth_ = 0.0;
  // background
  int n_bg_ = 0;
  std::vector<BgSampleEval> bg_;
  std::vector<double> bg_delta_, bg_alpha_, bg_w_, bg_T_;
  Vec3 bg_premult_ = Vec3::Zero();
  bool bg_degenerate_ = false;
  // phong
  bool phong_valid_ = false;
  bool shade_interior_ = false;  // raw shade strictly inside (0,1)
  Vec3 n_raw_ = Vec3::Zero(), n_hat_ = Vec3::Zero();
  double phong_hh_ = 0.0;
  std::vector<FgSampleEval> stencil_;  // 6 evals (numerical) or 1 (analytic)
  RenderOutput out_;
};

// Forward-only single-pixel render (reporting, image output, probes).
RenderOutput render_pixel(const ParamStore& store, const FieldBundle& b, const Ray& ray,
                          FieldSel which, const RenderConfig& cfg);

// Whole-image renders; the parallel version distributes rows over OpenMP
// workers, the serial one is the reference implementation for testing.
// Images are [H, W, 3] tensors; phong/mask outputs are optional.
void render_image_serial(const ParamStore& store, const FieldBundle& b, const Camera& cam,
                         FieldSel which, const RenderConfig& cfg, Tensor& rgb, Tensor* phong,
                         Tensor* mask, Tensor* depth, Tensor* normal);
void render_image(const ParamStore& store, const FieldBundle& b, const Camera& cam, FieldSel which,
                  const RenderConfig& cfg, Tensor& rgb, Tensor* phong, Tensor* mask, Tensor* depth,
                  Tensor* normal);

// Closed-form scene pushed through the same quadrature: oracle datasets.
struct AnalyticSceneDesc {
  const SdfField* sdf = nullptr;
  std::function<Vec3(const Vec3&, const Vec3&)> color;  // (point, view dir) -> rgb
  Vec3 bg_color = Vec3(0.9, 0.9, 0.95);
  double sharpness = 150.0;
};
RenderOutput render_pixel_analytic(const AnalyticSceneDesc& scene, const Ray& ray,
                                   const RenderConfig& cfg);
void render_image_analytic(const AnalyticSceneDesc& scene, const Camera& cam,
                           const RenderConfig& cfg, Tensor& rgb, Tensor* phong);

}  // namespace neused
