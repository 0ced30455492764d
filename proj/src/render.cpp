#include "neused/render.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace neused {

namespace {

constexpr double kOpacityEps = 1e-8;    // denominator guard for normalization
constexpr double kPhongMaskMin = 1e-3;  // below this opacity shading is skipped

double softplus_stable(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// log sigmoid(u), stable for large |u|
double log_sigmoid(double u) { return -softplus_stable(-u); }

double sigmoid_stable(double u) {
  if (u >= 0.0) {
    const double e = std::exp(-u);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(u);
  return e / (1.0 + e);
}

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

std::atomic<long> g_composite_clamped{0};

// Ray/unit-sphere intersection. Returns false when the ray misses the ball
// or the ball lies entirely behind the origin; t0 is clamped to zero when
// the origin is inside.
bool unit_sphere_span(const Vec3& o, const Vec3& d, double& t0, double& t1) {
  const double b = o.dot(d);
  const double c = o.squaredNorm() - 1.0;
  const double disc = b * b - c;
  if (disc <= 0.0) return false;
  const double root = std::sqrt(disc);
  t0 = -b - root;
  t1 = -b + root;
  if (t1 <= 0.0) return false;
  t0 = std::max(t0, 0.0);
  return true;
}

// Shortest distance from the coordinate origin to any point on the forward
// half of the ray (the background shell starts no closer than this).
double ray_min_radius(const Vec3& o, const Vec3& d) {
  const double t_ca = -o.dot(d);
  if (t_ca <= 0.0) return o.norm();
  const double par = o.squaredNorm() - t_ca * t_ca;
  return std::sqrt(std::max(par, 0.0));
}

// Ray parameter at which the ray reaches radius r (r at least the closest
// approach distance).
double t_at_radius(const Vec3& o, const Vec3& d, double r) {
  const double b = o.dot(d);
  const double rad = b * b - o.squaredNorm() + r * r;
  return -b + std::sqrt(std::max(rad, 0.0));
}

// Raw (pre-clamp) Phong shade for a unit normal; headlight model uses l = v.
double phong_raw(const Vec3& n_hat, const Vec3& l, const Vec3& v, const PhongMaterial& m) {
  const Vec3 r = 2.0 * n_hat.dot(l) * n_hat - l;
  const double diffuse = std::max(n_hat.dot(l), 0.0);
  const double spec = std::max(r.dot(v), 0.0);
  return m.ka + m.kd * diffuse + m.ks * std::pow(spec, m.p);
}

}  // namespace

void validate_pose(const Mat4& pose) {
  const Mat3 r = pose.topLeftCorner<3, 3>();
  const Mat3 should_be_id = r.transpose() * r;
  if ((should_be_id - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
    throw DatasetError("camera pose rotation is not orthonormal");
  if (std::abs(r.determinant() - 1.0) > 1e-6)
    throw DatasetError("camera pose rotation must have determinant +1");
  if (!(pose.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).isZero(1e-12))
    throw DatasetError("camera pose bottom row must be (0,0,0,1)");
}

Ray generate_ray(const Camera& cam, int px, int py) {
  const double x = (px + 0.5 - cam.cx) / cam.fx;
  const double y = (py + 0.5 - cam.cy) / cam.fy;
  const Vec3 dir_cam(x, -y, -1.0);  // camera looks along -z, +y is up
  const Mat3 r = cam.pose.topLeftCorner<3, 3>();
  Ray ray;
  ray.o = cam.pose.topRightCorner<3, 1>();
  ray.d = (r * dir_cam).normalized();
  return ray;
}

double phong_shade_scalar(const Vec3& n, const Vec3& l, const Vec3& v, const PhongMaterial& m) {
  const double len = n.norm();
  if (len < 1e-9) return clamp01(m.ka);
  return clamp01(phong_raw(n / len, l, v, m));
}

Vec3 phong_shade(const Vec3& n, const Vec3& l, const Vec3& v, const PhongMaterial& m) {
  const double s = phong_shade_scalar(n, l, v, m);
  return Vec3(s, s, s);
}

double neus_alpha(double sdf_i, double sdf_ip1, double s) {
  if (s <= 0.0) throw ConfigError("neus_alpha: slope must be positive");
  const double r = std::exp(log_sigmoid(s * sdf_ip1) - log_sigmoid(s * sdf_i));
  return std::max(1.0 - r, 0.0);
}

VolumeResult volume_render(const std::vector<double>& alphas, const std::vector<Vec3>& colors,
                           const std::vector<double>& ts) {
  if (alphas.size() != colors.size() || alphas.size() != ts.size())
    throw ShapeError("volume_render: alphas/colors/ts length mismatch");
  VolumeResult res;
  res.weights.resize(alphas.size());
  double trans = 1.0;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    const double w = trans * alphas[i];
    res.weights[i] = w;
    res.rgb += w * colors[i];
    res.mask += w;
    res.depth += w * ts[i];
    trans *= 1.0 - alphas[i];
  }
  res.depth /= std::max(res.mask, kOpacityEps);
  return res;
}

Vec3 composite(const Vec3& fg, const Vec3& bg, double mask) {
  double m = mask;
  if (m < 0.0 || m > 1.0) {
    g_composite_clamped.fetch_add(1, std::memory_order_relaxed);
    m = clamp01(m);
  }
  return m * fg + (1.0 - m) * bg;
}

long composite_clamped_masks() { return g_composite_clamped.load(std::memory_order_relaxed); }
void reset_composite_clamped_masks() { g_composite_clamped.store(0, std::memory_order_relaxed); }

RenderOutput RayWorkspace::forward(const ParamStore& store, const FieldBundle& b, const Ray& ray,
                                   FieldSel which, const RenderConfig& cfg, bool keep) {
  cfg_ = cfg;
  which_ = which;
  ray_.o = ray.o;
  ray_.d = ray.d.normalized();
  keep_ = keep;
  out_ = RenderOutput{};

  const Vec3& o = ray_.o;
  const Vec3& d = ray_.d;

  // ---- foreground: uniform comb across the unit-ball chord -----------------
  double t0 = 0.0, t1 = 0.0;
  fg_hit_ = unit_sphere_span(o, d, t0, t1);
  s_ = b.sharpness(store, which);
  premult_.setZero();
  mask_ = 0.0;
  depth_ = 0.0;
  n_fg_ = 0;

  if (fg_hit_) {
    const int n = cfg.fg_samples;
    n_fg_ = n;
    if (static_cast<int>(fg_.size()) < n + 1) fg_.resize(n + 1);
    t_.resize(n + 1);
    alpha_.resize(n);
    w_.resize(n);
    T_.resize(n);

    const double span = t1 - t0;
    for (int k = 0; k <= n; ++k) t_[k] = t0 + span * (k + cfg.jitter_fg) / (n + 1);

    FgEvalRequest req;
    req.which = which;
    req.active_levels = cfg.active_levels;
    req.keep = keep;
    for (int k = 0; k <= n; ++k) {
      req.want_color = k < n;
      req.want_grad = k < n;
      fg_[k].eval(store, b, o + t_[k] * d, d, req);
    }

    double trans = 1.0;
    for (int i = 0; i < n; ++i) {
      alpha_[i] = neus_alpha(fg_[i].sdf, fg_[i + 1].sdf, s_);
      T_[i] = trans;
      w_[i] = trans * alpha_[i];
      premult_ += w_[i] * fg_[i].color;
      mask_ += w_[i];
      depth_ += w_[i] * 0.5 * (t_[i] + t_[i + 1]);
      trans *= 1.0 - alpha_[i];
    }
    depth_ /= std::max(mask_, kOpacityEps);
  }

  // ---- background: samples spaced evenly in inverse radius -----------------
  const double r_start = fg_hit_ ? 1.0 : ray_min_radius(o, d);
  const double s_start = 1.0 / std::max(r_start, 1.0);
  const double s_end = 1.0 / cfg.r_max;
  bg_degenerate_ = !(s_start > s_end);
  bg_premult_.setZero();
  n_bg_ = 0;

  if (!bg_degenerate_) {
    const int nb = cfg.bg_samples;
    n_bg_ = nb;
    if (static_cast<int>(bg_.size()) < nb) bg_.resize(nb);
    bg_delta_.resize(nb);
    bg_alpha_.resize(nb);
    bg_w_.resize(nb);
    bg_T_.resize(nb);

    const double off = (cfg.jitter_bg > 0.0 && cfg.jitter_bg < 1.0) ? cfg.jitter_bg : 0.5;
    BgEvalRequest breq;
    breq.want_color = true;
    breq.keep = keep;

    double t_prev = t_at_radius(o, d, 1.0 / s_start);
    double trans = 1.0;
    for (int j = 0; j < nb; ++j) {
      const double s_hi = s_start + (s_end - s_start) * (j + 1) / nb;
      const double t_next = t_at_radius(o, d, 1.0 / s_hi);
      bg_delta_[j] = t_next - t_prev;
      const double s_mid = s_start + (s_end - s_start) * (j + off) / nb;
      const double t_mid = t_at_radius(o, d, 1.0 / s_mid);
      bg_[j].eval(store, b, o + t_mid * d, d, breq);
      bg_alpha_[j] = 1.0 - std::exp(-bg_[j].sigma * bg_delta_[j]);
      bg_T_[j] = trans;
      bg_w_[j] = trans * bg_alpha_[j];
      bg_premult_ += bg_w_[j] * bg_[j].color;
      trans *= 1.0 - bg_alpha_[j];
      t_prev = t_next;
    }
  }

  // ---- compose --------------------------------------------------------------
  out_.rgb_fg = premult_ / std::max(mask_, kOpacityEps);
  out_.rgb_bg = bg_premult_;
  out_.rgb = mask_ * out_.rgb_fg + (1.0 - mask_) * out_.rgb_bg;
  out_.mask = mask_;
  out_.depth = depth_;
  out_.bg_degenerate = bg_degenerate_;

  // ---- Phong channel over the expected surface point ------------------------
  phong_valid_ = false;
  shade_interior_ = false;
  if (cfg.want_phong) {
    out_.phong = Vec3(cfg.material.ka, cfg.material.ka, cfg.material.ka);
    if (fg_hit_ && mask_ >= kPhongMaskMin) {
      const Vec3 xs = o + depth_ * d;  // held fixed in the reverse pass
      const HashGrid& grid = (which == FieldSel::source) ? b.src_grid : b.tgt_grid;
      phong_hh_ = cfg.phong_h > 0.0 ? cfg.phong_h
                                    : 0.5 * grid.finest_cell_size(cfg.active_levels);
      if (cfg.phong_normal_mode == GradMode::numerical) {
        if (stencil_.size() < 6) stencil_.resize(6);
        FgEvalRequest req;
        req.which = which;
        req.active_levels = cfg.active_levels;
        req.keep = keep;
        for (int a = 0; a < 3; ++a) {
          Vec3 e = Vec3::Zero();
          e[a] = phong_hh_;
          stencil_[2 * a].eval(store, b, xs + e, d, req);
          stencil_[2 * a + 1].eval(store, b, xs - e, d, req);
          n_raw_[a] = (stencil_[2 * a].sdf - stencil_[2 * a + 1].sdf) / (2.0 * phong_hh_);
        }
      } else {
        if (stencil_.size() < 1) stencil_.resize(1);
        FgEvalRequest req;
        req.which = which;
        req.active_levels = cfg.active_levels;
        req.want_grad = true;
        req.keep = keep;
        stencil_[0].eval(store, b, xs, d, req);
        n_raw_ = stencil_[0].grad_x;
      }
      const double len = n_raw_.norm();
      if (len >= 1e-9) {
        phong_valid_ = true;
        n_hat_ = n_raw_ / len;
        const Vec3 l = -d;
        const double raw = phong_raw(n_hat_, l, l, cfg.material);
        const double shade = clamp01(raw);
        shade_interior_ = raw > 0.0 && raw < 1.0;
        out_.phong = Vec3(shade, shade, shade);
        out_.normal = n_hat_;
      }
    }
  }
  return out_;
}

void RayWorkspace::backward(const ParamStore& store, const FieldBundle& b, const Vec3& d_rgb,
                            const Vec3& d_phong, GradBuffer& grad) const {
  const Vec3& d = ray_.d;

  // ---- Phong chain (surface point held fixed) -------------------------------
  if (phong_valid_ && shade_interior_ && d_phong.cwiseAbs().sum() != 0.0) {
    const double d_shade = d_phong.sum();
    const Vec3 l = -d;
    const double u1 = n_hat_.dot(l);
    const double sd = 2.0 * u1 * u1 - 1.0;  // r.v with l = v
    Vec3 d_nhat = Vec3::Zero();
    if (u1 > 0.0) d_nhat += cfg_.material.kd * l;
    if (sd > 0.0)
      d_nhat += cfg_.material.ks * cfg_.material.p * std::pow(sd, cfg_.material.p - 1.0) *
                (4.0 * u1) * l;
    d_nhat *= d_shade;
    const double len = n_raw_.norm();
    const Vec3 d_nraw = (d_nhat - n_hat_ * n_hat_.dot(d_nhat)) / len;
    if (cfg_.phong_normal_mode == GradMode::numerical) {
      for (int a = 0; a < 3; ++a) {
        const double g = d_nraw[a] / (2.0 * phong_hh_);
        stencil_[2 * a].backward(store, b, g, Vec3::Zero(), Vec3::Zero(), grad);
        stencil_[2 * a + 1].backward(store, b, -g, Vec3::Zero(), Vec3::Zero(), grad);
      }
    } else {
      stencil_[0].backward(store, b, 0.0, d_nraw, Vec3::Zero(), grad);
    }
  }

  // ---- composite: rgb = M * (P / max(M,eps)) + (1 - M) * B -------------------
  Vec3 dP, dB;
  double dM;
  if (mask_ > kOpacityEps) {
    dP = d_rgb;
    dM = -bg_premult_.dot(d_rgb);
    dB = (1.0 - mask_) * d_rgb;
  } else {
    dP = (mask_ / kOpacityEps) * d_rgb;
    dM = premult_.dot(d_rgb) / kOpacityEps - bg_premult_.dot(d_rgb);
    dB = (1.0 - mask_) * d_rgb;
  }

  // ---- foreground chain ------------------------------------------------------
  if (fg_hit_ && n_fg_ > 0) {
    const int n = n_fg_;
    // dL/dw_i and a reverse scan for dL/dalpha_i without dividing by (1-a).
    std::vector<double> d_alpha(n, 0.0);
    double G = 0.0;  // sum_{j>i} A_j alpha_j prod_{i<k<j}(1-alpha_k)
    for (int i = n - 1; i >= 0; --i) {
      const double A = fg_[i].color.dot(dP) + dM;
      d_alpha[i] = T_[i] * (A - G);
      G = A * alpha_[i] + (1.0 - alpha_[i]) * G;
    }

    std::vector<double> d_sdf(n + 1, 0.0);
    double d_rho = 0.0;
    for (int i = 0; i < n; ++i) {
      if (alpha_[i] <= 0.0 || d_alpha[i] == 0.0) continue;
      const double r = 1.0 - alpha_[i];
      const double sig_i = sigmoid_stable(-s_ * fg_[i].sdf);
      const double sig_ip1 = sigmoid_stable(-s_ * fg_[i + 1].sdf);
      d_sdf[i] += d_alpha[i] * r * s_ * sig_i;
      d_sdf[i + 1] -= d_alpha[i] * r * s_ * sig_ip1;
      // alpha = 1 - r(s); dr/ds = r * (sdf_{i+1} sig_{i+1} - sdf_i sig_i); s = exp(rho)
      d_rho -= d_alpha[i] * r * (fg_[i + 1].sdf * sig_ip1 - fg_[i].sdf * sig_i) * s_;
    }

    for (int k = 0; k <= n; ++k) {
      const Vec3 dc = (k < n) ? Vec3(w_[k] * dP) : Vec3(Vec3::Zero());
      if (d_sdf[k] == 0.0 && dc.isZero(0.0)) continue;
      fg_[k].backward(store, b, d_sdf[k], Vec3::Zero(), dc, grad);
    }
    grad.add(b.sharpness_offset(which_), d_rho);
  }

  // ---- background chain -------------------------------------------------------
  if (!bg_degenerate_ && n_bg_ > 0) {
    const int n = n_bg_;
    std::vector<double> d_alpha(n, 0.0);
    double G = 0.0;
    for (int j = n - 1; j >= 0; --j) {
      const double A = bg_[j].color.dot(dB);
      d_alpha[j] = bg_T_[j] * (A - G);
      G = A * bg_alpha_[j] + (1.0 - bg_alpha_[j]) * G;
    }
    for (int j = 0; j < n; ++j) {
      const double d_sigma = d_alpha[j] * bg_delta_[j] * (1.0 - bg_alpha_[j]);
      const Vec3 dc = bg_w_[j] * dB;
      if (d_sigma == 0.0 && dc.isZero(0.0)) continue;
      bg_[j].backward(store, b, d_sigma, dc, grad);
    }
  }
}

RenderOutput render_pixel(const ParamStore& store, const FieldBundle& b, const Ray& ray,
                          FieldSel which, const RenderConfig& cfg) {
  thread_local RayWorkspace ws;
  return ws.forward(store, b, ray, which, cfg, /*keep=*/false);
}

namespace {

void store_pixel(const RenderOutput& out, int py, int px, int w, Tensor& rgb, Tensor* phong,
                 Tensor* mask, Tensor* depth, Tensor* normal) {
  const std::size_t p3 = (static_cast<std::size_t>(py) * w + px) * 3;
  const std::size_t p1 = static_cast<std::size_t>(py) * w + px;
  for (int c = 0; c < 3; ++c) rgb[p3 + c] = out.rgb[c];
  if (phong)
    for (int c = 0; c < 3; ++c) (*phong)[p3 + c] = out.phong[c];
  if (mask) (*mask)[p1] = out.mask;
  if (depth) (*depth)[p1] = out.depth;
  if (normal)
    for (int c = 0; c < 3; ++c) (*normal)[p3 + c] = out.normal[c];
}

void size_outputs(const Camera& cam, Tensor& rgb, Tensor* phong, Tensor* mask, Tensor* depth,
                  Tensor* normal) {
  rgb = Tensor({cam.height, cam.width, 3});
  if (phong) *phong = Tensor({cam.height, cam.width, 3});
  if (mask) *mask = Tensor({cam.height, cam.width});
  if (depth) *depth = Tensor({cam.height, cam.width});
  if (normal) *normal = Tensor({cam.height, cam.width, 3});
}

}  // namespace

void render_image_serial(const ParamStore& store, const FieldBundle& b, const Camera& cam,
                         FieldSel which, const RenderConfig& cfg, Tensor& rgb, Tensor* phong,
                         Tensor* mask, Tensor* depth, Tensor* normal) {
  size_outputs(cam, rgb, phong, mask, depth, normal);
  RayWorkspace ws;
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      const RenderOutput out =
          ws.forward(store, b, generate_ray(cam, px, py), which, cfg, /*keep=*/false);
      store_pixel(out, py, px, cam.width, rgb, phong, mask, depth, normal);
    }
}

void render_image(const ParamStore& store, const FieldBundle& b, const Camera& cam, FieldSel which,
                  const RenderConfig& cfg, Tensor& rgb, Tensor* phong, Tensor* mask, Tensor* depth,
                  Tensor* normal) {
  size_outputs(cam, rgb, phong, mask, depth, normal);
#pragma omp parallel num_threads(worker_count())
  {
    RayWorkspace ws;
#pragma omp for schedule(static)
    for (int py = 0; py < cam.height; ++py)
      for (int px = 0; px < cam.width; ++px) {
        const RenderOutput out =
            ws.forward(store, b, generate_ray(cam, px, py), which, cfg, /*keep=*/false);
        store_pixel(out, py, px, cam.width, rgb, phong, mask, depth, normal);
      }
  }
}

RenderOutput render_pixel_analytic(const AnalyticSceneDesc& scene, const Ray& ray,
                                   const RenderConfig& cfg) {
  RenderOutput out;
  const Vec3 o = ray.o;
  const Vec3 d = ray.d.normalized();
  out.rgb_bg = scene.bg_color;

  double t0 = 0.0, t1 = 0.0;
  if (unit_sphere_span(o, d, t0, t1)) {
    const int n = cfg.fg_samples;
    std::vector<double> ts(n + 1), sdf(n + 1);
    const double span = t1 - t0;
    for (int k = 0; k <= n; ++k) {
      ts[k] = t0 + span * (k + cfg.jitter_fg) / (n + 1);
      sdf[k] = scene.sdf->sdf(o + ts[k] * d);
    }
    double trans = 1.0;
    for (int i = 0; i < n; ++i) {
      const double a = neus_alpha(sdf[i], sdf[i + 1], scene.sharpness);
      const double w = trans * a;
      out.rgb_fg += w * scene.color(o + ts[i] * d, d);
      out.mask += w;
      out.depth += w * 0.5 * (ts[i] + ts[i + 1]);
      trans *= 1.0 - a;
    }
    out.depth /= std::max(out.mask, kOpacityEps);
    out.rgb_fg /= std::max(out.mask, kOpacityEps);
  }
  out.rgb = out.mask * out.rgb_fg + (1.0 - out.mask) * out.rgb_bg;

  if (cfg.want_phong) {
    out.phong = Vec3(cfg.material.ka, cfg.material.ka, cfg.material.ka);
    if (out.mask >= kPhongMaskMin) {
      const Vec3 xs = o + out.depth * d;
      const Vec3 n = scene.sdf->sdf_gradient_analytic(xs);
      const Vec3 l = -d;
      out.phong = phong_shade(n, l, l, cfg.material);
      if (n.norm() > 1e-9) out.normal = n.normalized();
    }
  }
  return out;
}

void render_image_analytic(const AnalyticSceneDesc& scene, const Camera& cam,
                           const RenderConfig& cfg, Tensor& rgb, Tensor* phong) {
  rgb = Tensor({cam.height, cam.width, 3});
  if (phong) *phong = Tensor({cam.height, cam.width, 3});
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      const RenderOutput out = render_pixel_analytic(scene, generate_ray(cam, px, py), cfg);
      store_pixel(out, py, px, cam.width, rgb, phong, nullptr, nullptr, nullptr);
    }
}

}  // namespace neused
