#include "neused/fields.hpp"

#include <algorithm>
#include <cmath>

namespace neused {

// --------------------------- analytic scenes -------------------------------

double SphereScene::sdf(const Vec3& x) const { return (x - c_).norm() - r_; }

Vec3 SphereScene::sdf_gradient_analytic(const Vec3& x) const {
  const Vec3 d = x - c_;
  const double n = d.norm();
  if (n < 1e-300) return Vec3::Zero();
  return d / n;
}

double BoxScene::sdf(const Vec3& x) const {
  const Vec3 q = x.cwiseAbs() - b_;
  const Vec3 m = q.cwiseMax(0.0);
  const double outside = m.norm();
  const double inside = std::min(q.maxCoeff(), 0.0);
  return outside + inside;
}

Vec3 BoxScene::sdf_gradient_analytic(const Vec3& x) const {
  const Vec3 q = x.cwiseAbs() - b_;
  const Vec3 m = q.cwiseMax(0.0);
  const double outside = m.norm();
  Vec3 g = Vec3::Zero();
  if (outside > 0.0) {
    for (int a = 0; a < 3; ++a) g[a] = (x[a] < 0 ? -1.0 : 1.0) * m[a] / outside;
    return g;
  }
  int axis = 0;
  q.maxCoeff(&axis);
  g[axis] = x[axis] < 0 ? -1.0 : 1.0;
  return g;
}

double TorusScene::sdf(const Vec3& x) const {
  const double rho = std::hypot(x[0], x[1]);
  return std::hypot(rho - R_, x[2]) - r_;
}

Vec3 TorusScene::sdf_gradient_analytic(const Vec3& x) const {
  const double rho = std::hypot(x[0], x[1]);
  const double a = rho - R_;
  const double m = std::hypot(a, x[2]);
  if (m < 1e-300 || rho < 1e-300) return Vec3::Zero();
  return Vec3(a * x[0] / (rho * m), a * x[1] / (rho * m), x[2] / m);
}

Vec3 sdf_gradient(const SdfField& field, const Vec3& x, GradMode mode, double h) {
  if (mode == GradMode::analytic) return field.sdf_gradient_analytic(x);
  if (h <= 0.0) throw ConfigError("numerical sdf gradient requires h > 0");
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 hi = x, lo = x;
    hi[a] += h;
    lo[a] -= h;
    g[a] = (field.sdf(hi) - field.sdf(lo)) / (2.0 * h);
  }
  return g;
}

// ----------------------------- field bundle --------------------------------

FieldBundle::FieldBundle(ParamStore& store, const SceneConfig& cfg) : cfg_(cfg) {
  if (cfg.feat_dim < 1) throw ConfigError("feat_dim must be positive");
  if (cfg.sharpness_init <= 0) throw ConfigError("sharpness_init must be positive");
  std::vector<int> geo_h(cfg.geo_depth, cfg.geo_hidden);
  std::vector<int> col_h(cfg.color_depth, cfg.color_hidden);

  bg_grid = HashGrid(store, "background.grid", cfg.bg_grid);
  bg_geo = Mlp(store, "background.geo", bg_grid.out_dim() + 1, geo_h, 1 + cfg.feat_dim,
               Act::softplus, Act::identity);
  bg_color = Mlp(store, "background.color", cfg.feat_dim + 6, col_h, 3, Act::softplus,
                 Act::sigmoid);

  src_grid = HashGrid(store, "source.grid", cfg.grid);
  src_geo = Mlp(store, "source.geo", src_grid.out_dim(), geo_h, 1 + cfg.feat_dim, Act::softplus,
                Act::identity);
  src_color = Mlp(store, "source.color", cfg.feat_dim + 6, col_h, 3, Act::softplus, Act::sigmoid);
  src_rho_ = store.add("source.rho", {1});

  tgt_grid = HashGrid(store, "target.grid", cfg.grid);
  tgt_geo = Mlp(store, "target.geo", 1 + cfg.feat_dim + tgt_grid.out_dim(), geo_h,
                1 + cfg.feat_dim, Act::softplus, Act::identity);
  tgt_color = Mlp(store, "target.color", cfg.feat_dim + 9, col_h, 3, Act::softplus,
                  Act::identity);
  tgt_rho_ = store.add("target.rho", {1});
}

void FieldBundle::init(ParamStore& store, Rng& rng) const {
  bg_grid.init(store, rng);
  bg_geo.init(store, rng);
  bg_color.init(store, rng);
  src_grid.init(store, rng);
  // Tiny final layer: geometry starts within float noise of the offset
  // sphere, which keeps early opacity fields sane.
  src_geo.init(store, rng, 1e-3);
  src_color.init(store, rng);
  *store.data(src_rho_) = std::log(cfg_.sharpness_init);
  tgt_grid.init(store, rng);
  tgt_geo.init(store, rng, 1.0, /*zero_final=*/true);
  tgt_color.init(store, rng, 1.0, /*zero_final=*/true);
  // Like the residual heads above, the target sharpness is an offset on the
  // source log-sharpness, so the target keeps matching the source exactly no
  // matter how far stage 1 moves it.
  *store.data(tgt_rho_) = 0.0;
}

std::vector<FieldBundle::Range> FieldBundle::background_ranges() const {
  return {{bg_grid.param_begin(), bg_color.param_end()}};
}
std::vector<FieldBundle::Range> FieldBundle::source_ranges() const {
  return {{src_grid.param_begin(), src_rho_ + 1}};
}
std::vector<FieldBundle::Range> FieldBundle::target_ranges() const {
  return {{tgt_grid.param_begin(), tgt_rho_ + 1}};
}

double FieldBundle::sharpness(const ParamStore& store, FieldSel which) const {
  double rho = *store.data(src_rho_);
  if (which == FieldSel::target) rho += *store.data(tgt_rho_);
  return std::exp(rho);
}

ParamReport parameter_report(const FieldBundle& b) {
  ParamReport r;
  r.identity_params = b.bg_grid.param_count() + b.bg_geo.param_count() + b.bg_color.param_count() +
                      b.src_grid.param_count() + b.src_geo.param_count() +
                      b.src_color.param_count() + 1;
  r.edit_params = b.tgt_grid.param_count() + b.tgt_geo.param_count() + b.tgt_color.param_count() +
                  1;
  r.ratio = double(r.identity_params) / double(r.edit_params);
  return r;
}

int progressive_schedule(int step, int total, int l_init, int l_max) {
  if (step < 0 || total < 0 || step > total) throw ConfigError("progressive_schedule: bad step");
  if (l_init > l_max) throw ConfigError("progressive_schedule: l_init > l_max");
  const int half = total / 2;
  if (step <= 0) return l_init;
  if (half <= 0 || step >= half) return l_max;
  return l_init + int((double(l_max - l_init) * step) / half);
}

Vec4 invert_sphere_point(const Vec3& x) {
  const double n = x.norm();
  if (n < 1.0 - 1e-9) throw NumericsError("invert_sphere_point: |x| < 1");
  const double inv = std::min(1.0, 1.0 / n);
  return Vec4(x[0] / n, x[1] / n, x[2] / n, inv);
}

// ------------------------- foreground sample eval --------------------------

namespace {
thread_local std::vector<double> tw_y, tw_dy, tw_dx, tw_dtx, tw_enc, tw_tin;
}

void FgSampleEval::eval(const ParamStore& store, const FieldBundle& b, const Vec3& x,
                        const Vec3& view_dir, const FgEvalRequest& req) {
  req_ = req;
  if (req_.want_color) req_.want_grad = true;
  x_ = x;
  dir_ = view_dir;
  const SceneConfig& cfg = b.config();
  const int Df = cfg.feat_dim;
  const int LFs = b.src_grid.out_dim();
  xnorm_ = x.norm();
  const bool cache = req_.keep || req_.want_grad;

  enc_s_out_.resize(std::size_t(LFs));
  b.src_grid.encode(store, x, req_.active_levels, enc_s_out_.data(), cache ? &enc_s_ : nullptr);
  geo_s_out_.resize(std::size_t(1 + Df));
  b.src_geo.forward(store, enc_s_out_.data(), geo_s_out_.data(), cache ? &geo_s_ : nullptr);
  const double sdf_s = geo_s_out_[0] + (xnorm_ - cfg.sphere_init_radius);

  grad_src_ = Vec3::Zero();
  if (req_.want_grad) {
    tw_y.resize(std::size_t(1 + Df));
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = 1.0;
      tan_s_[a].resize(std::size_t(LFs));
      b.src_grid.tangent(store, enc_s_, e, tan_s_[a].data());
      ty_s_[a].resize(std::size_t(1 + Df));
      b.src_geo.jvp(store, enc_s_out_.data(), tan_s_[a].data(), tw_y.data(), ty_s_[a].data(),
                    geo_s_jvp_[a]);
      grad_src_[a] = ty_s_[a][0] + (xnorm_ > 1e-12 ? x[a] / xnorm_ : 0.0);
    }
  }

  if (req_.which == FieldSel::source) {
    sdf = sdf_s;
    grad_x = grad_src_;
    if (req_.want_color) {
      colin_s_.resize(std::size_t(Df + 6));
      std::copy(geo_s_out_.begin() + 1, geo_s_out_.end(), colin_s_.begin());
      for (int a = 0; a < 3; ++a) colin_s_[std::size_t(Df + a)] = view_dir[a];
      for (int a = 0; a < 3; ++a) colin_s_[std::size_t(Df + 3 + a)] = grad_src_[a];
      b.src_color.forward(store, colin_s_.data(), color.data(), cache ? &col_s_ : nullptr);
      color_src = color;
    }
    return;
  }

  // Target: residual on top of the frozen source evaluation.
  const int LFt = b.tgt_grid.out_dim();
  enc_t_out_.resize(std::size_t(LFt));
  b.tgt_grid.encode(store, x, req_.active_levels, enc_t_out_.data(), cache ? &enc_t_ : nullptr);
  tin_.resize(std::size_t(1 + Df + LFt));
  tin_[0] = sdf_s;
  std::copy(geo_s_out_.begin() + 1, geo_s_out_.end(), tin_.begin() + 1);
  std::copy(enc_t_out_.begin(), enc_t_out_.end(), tin_.begin() + 1 + Df);
  res_.resize(std::size_t(1 + Df));
  b.tgt_geo.forward(store, tin_.data(), res_.data(), cache ? &geo_t_ : nullptr);
  sdf = sdf_s + res_[0];

  if (req_.want_grad) {
    tw_y.resize(std::size_t(1 + Df));
    tw_dy.resize(std::size_t(1 + Df));
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = 1.0;
      tin_tan_[a].resize(tin_.size());
      tin_tan_[a][0] = grad_src_[a];
      for (int k = 0; k < Df; ++k) tin_tan_[a][std::size_t(1 + k)] = ty_s_[a][std::size_t(1 + k)];
      tw_enc.resize(std::size_t(LFt));
      b.tgt_grid.tangent(store, enc_t_, e, tw_enc.data());
      std::copy(tw_enc.begin(), tw_enc.end(), tin_tan_[a].begin() + 1 + Df);
      b.tgt_geo.jvp(store, tin_.data(), tin_tan_[a].data(), tw_y.data(), tw_dy.data(),
                    geo_t_jvp_[a]);
      grad_x[a] = grad_src_[a] + tw_dy[0];
    }
  }

  if (req_.want_color) {
    colin_s_.resize(std::size_t(Df + 6));
    std::copy(geo_s_out_.begin() + 1, geo_s_out_.end(), colin_s_.begin());
    for (int a = 0; a < 3; ++a) colin_s_[std::size_t(Df + a)] = view_dir[a];
    for (int a = 0; a < 3; ++a) colin_s_[std::size_t(Df + 3 + a)] = grad_src_[a];
    b.src_color.forward(store, colin_s_.data(), color_src.data(), nullptr);

    colin_t_.resize(std::size_t(Df + 9));
    for (int k = 0; k < Df; ++k) colin_t_[std::size_t(k)] = geo_s_out_[std::size_t(1 + k)] +
                                                            res_[std::size_t(1 + k)];
    for (int a = 0; a < 3; ++a) colin_t_[std::size_t(Df + a)] = view_dir[a];
    for (int a = 0; a < 3; ++a) colin_t_[std::size_t(Df + 3 + a)] = grad_x[a];
    for (int a = 0; a < 3; ++a) colin_t_[std::size_t(Df + 6 + a)] = color_src[a];
    Vec3 res_c;
    b.tgt_color.forward(store, colin_t_.data(), res_c.data(), cache ? &col_t_ : nullptr);
    for (int c = 0; c < 3; ++c) {
      const double raw = color_src[c] + res_c[c];
      color[c] = std::clamp(raw, 0.0, 1.0);
      clamped_[c] = (raw <= 0.0 || raw >= 1.0);
    }
  }
}

void FgSampleEval::backward(const ParamStore& store, const FieldBundle& b, double d_sdf,
                            const Vec3& d_grad, const Vec3& d_color, GradBuffer& grad) const {
  const SceneConfig& cfg = b.config();
  const int Df = cfg.feat_dim;

  if (req_.which == FieldSel::source) {
    const int LFs = b.src_grid.out_dim();
    std::vector<double> d_feat(std::size_t(Df), 0.0);
    Vec3 d_gradtot = d_grad;
    if (req_.want_color) {
      tw_dx.resize(std::size_t(Df + 6));
      b.src_color.backward(store, col_s_, d_color.data(), grad, tw_dx.data());
      for (int k = 0; k < Df; ++k) d_feat[std::size_t(k)] += tw_dx[std::size_t(k)];
      for (int a = 0; a < 3; ++a) d_gradtot[a] += tw_dx[std::size_t(Df + 3 + a)];
    }
    std::vector<double> d_enc(std::size_t(LFs), 0.0);
    if (req_.want_grad) {
      tw_dy.assign(std::size_t(1 + Df), 0.0);
      tw_dx.resize(std::size_t(LFs));
      tw_dtx.resize(std::size_t(LFs));
      for (int a = 0; a < 3; ++a) {
        if (d_gradtot[a] == 0.0) continue;
        Vec3 e = Vec3::Zero();
        e[a] = 1.0;
        tw_dy[0] = d_gradtot[a];
        b.src_geo.jvp_backward(store, geo_s_jvp_[a], nullptr, tw_dy.data(), grad, tw_dx.data(),
                               tw_dtx.data());
        for (int k = 0; k < LFs; ++k) d_enc[std::size_t(k)] += tw_dx[std::size_t(k)];
        b.src_grid.tangent_backward(enc_s_, e, nullptr, tw_dtx.data(), grad);
        tw_dy[0] = 0.0;
      }
    }
    std::vector<double> dy(std::size_t(1 + Df));
    dy[0] = d_sdf;
    std::copy(d_feat.begin(), d_feat.end(), dy.begin() + 1);
    tw_dx.resize(std::size_t(LFs));
    b.src_geo.backward(store, geo_s_, dy.data(), grad, tw_dx.data());
    for (int k = 0; k < LFs; ++k) d_enc[std::size_t(k)] += tw_dx[std::size_t(k)];
    b.src_grid.backward(enc_s_, d_enc.data(), grad);
    return;
  }

  // Target: traverse only target-owned parameters.
  const int LFt = b.tgt_grid.out_dim();
  std::vector<double> d_feat_t(std::size_t(Df), 0.0);
  Vec3 d_gradtot = d_grad;
  if (req_.want_color) {
    Vec3 d_pre;
    for (int c = 0; c < 3; ++c) d_pre[c] = clamped_[c] ? 0.0 : d_color[c];
    tw_dx.resize(std::size_t(Df + 9));
    b.tgt_color.backward(store, col_t_, d_pre.data(), grad, tw_dx.data());
    for (int k = 0; k < Df; ++k) d_feat_t[std::size_t(k)] += tw_dx[std::size_t(k)];
    for (int a = 0; a < 3; ++a) d_gradtot[a] += tw_dx[std::size_t(Df + 3 + a)];
    // the source-color and view-direction slots carry no trainable path here
  }
  std::vector<double> d_tin(tin_.size(), 0.0);
  if (req_.want_grad) {
    tw_dy.assign(std::size_t(1 + Df), 0.0);
    tw_dx.resize(tin_.size());
    tw_dtx.resize(tin_.size());
    for (int a = 0; a < 3; ++a) {
      if (d_gradtot[a] == 0.0) continue;
      Vec3 e = Vec3::Zero();
      e[a] = 1.0;
      tw_dy[0] = d_gradtot[a];
      b.tgt_geo.jvp_backward(store, geo_t_jvp_[a], nullptr, tw_dy.data(), grad, tw_dx.data(),
                             tw_dtx.data());
      for (std::size_t k = 0; k < tin_.size(); ++k) d_tin[k] += tw_dx[k];
      b.tgt_grid.tangent_backward(enc_t_, e, nullptr, tw_dtx.data() + 1 + Df, grad);
      tw_dy[0] = 0.0;
    }
  }
  std::vector<double> dy(std::size_t(1 + Df));
  dy[0] = d_sdf;  // residual head: d res0 = d sdf_tgt
  std::copy(d_feat_t.begin(), d_feat_t.end(), dy.begin() + 1);
  tw_dx.resize(tin_.size());
  b.tgt_geo.backward(store, geo_t_, dy.data(), grad, tw_dx.data());
  for (std::size_t k = 0; k < tin_.size(); ++k) d_tin[k] += tw_dx[k];
  b.tgt_grid.backward(enc_t_, d_tin.data() + 1 + Df, grad);
}

// ------------------------- background sample eval --------------------------

void BgSampleEval::eval(const ParamStore& store, const FieldBundle& b, const Vec3& x,
                        const Vec3& view_dir, const BgEvalRequest& req) {
  req_ = req;
  const SceneConfig& cfg = b.config();
  const int Df = cfg.feat_dim;
  const int LF = b.bg_grid.out_dim();
  const Vec4 p = invert_sphere_point(x);
  const Vec3 q(p[0] * p[3], p[1] * p[3], p[2] * p[3]);

  enc_in_.resize(std::size_t(LF + 1));
  b.bg_grid.encode(store, q, cfg.bg_grid.levels, enc_in_.data(), req_.keep ? &enc_ : nullptr);
  enc_in_[std::size_t(LF)] = p[3];
  geo_out_.resize(std::size_t(1 + Df));
  b.bg_geo.forward(store, enc_in_.data(), geo_out_.data(), req_.keep ? &geo_ : nullptr);
  sigma_raw_ = geo_out_[0];
  sigma = act_eval(Act::softplus, sigma_raw_);

  if (req_.want_color) {
    colin_.resize(std::size_t(Df + 6));
    std::copy(geo_out_.begin() + 1, geo_out_.end(), colin_.begin());
    for (int a = 0; a < 3; ++a) colin_[std::size_t(Df + a)] = view_dir[a];
    for (int a = 0; a < 3; ++a) colin_[std::size_t(Df + 3 + a)] = 0.0;
    b.bg_color.forward(store, colin_.data(), color.data(), req_.keep ? &col_ : nullptr);
  }
}

void BgSampleEval::backward(const ParamStore& store, const FieldBundle& b, double d_sigma,
                            const Vec3& d_color, GradBuffer& grad) const {
  const SceneConfig& cfg = b.config();
  const int Df = cfg.feat_dim;
  const int LF = b.bg_grid.out_dim();
  std::vector<double> dy(std::size_t(1 + Df), 0.0);
  dy[0] = d_sigma * act_d1(Act::softplus, sigma_raw_);
  if (req_.want_color) {
    tw_dx.resize(std::size_t(Df + 6));
    b.bg_color.backward(store, col_, d_color.data(), grad, tw_dx.data());
    for (int k = 0; k < Df; ++k) dy[std::size_t(1 + k)] += tw_dx[std::size_t(k)];
  }
  tw_dx.resize(std::size_t(LF + 1));
  b.bg_geo.backward(store, geo_, dy.data(), grad, tw_dx.data());
  b.bg_grid.backward(enc_, tw_dx.data(), grad);
}

// ------------------------------ eikonal ------------------------------------

namespace {
thread_local FgSampleEval tl_fg_eval;
}

double eikonal_at(const ParamStore& store, const FieldBundle& b, FieldSel which, const Vec3& x,
                  int active_levels, double weight, GradBuffer* grad) {
  FgEvalRequest req;
  req.which = which;
  req.active_levels = active_levels;
  req.want_grad = true;
  req.keep = (grad != nullptr);
  tl_fg_eval.eval(store, b, x, Vec3::Zero(), req);
  const Vec3 g = tl_fg_eval.grad_x;
  const double n = std::max(g.norm(), 1e-12);
  const double L = (n - 1.0) * (n - 1.0);
  if (grad) {
    const Vec3 dg = (2.0 * (n - 1.0) / n) * g * weight;
    tl_fg_eval.backward(store, b, 0.0, dg, Vec3::Zero(), *grad);
  }
  return L;
}

// ------------------------------ field views --------------------------------

double SourceFieldView::sdf(const Vec3& x) const {
  FgEvalRequest req;
  req.which = FieldSel::source;
  req.active_levels = active_;
  tl_fg_eval.eval(*store_, *b_, x, Vec3::Zero(), req);
  return tl_fg_eval.sdf;
}

Vec3 SourceFieldView::sdf_gradient_analytic(const Vec3& x) const {
  FgEvalRequest req;
  req.which = FieldSel::source;
  req.active_levels = active_;
  req.want_grad = true;
  tl_fg_eval.eval(*store_, *b_, x, Vec3::Zero(), req);
  return tl_fg_eval.grad_x;
}

double TargetFieldView::sdf(const Vec3& x) const {
  FgEvalRequest req;
  req.which = FieldSel::target;
  req.active_levels = active_;
  tl_fg_eval.eval(*store_, *b_, x, Vec3::Zero(), req);
  return tl_fg_eval.sdf;
}

Vec3 TargetFieldView::sdf_gradient_analytic(const Vec3& x) const {
  FgEvalRequest req;
  req.which = FieldSel::target;
  req.active_levels = active_;
  req.want_grad = true;
  tl_fg_eval.eval(*store_, *b_, x, Vec3::Zero(), req);
  return tl_fg_eval.grad_x;
}

}  // namespace neused
