#include "neused/train.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "neused/remote_denoiser.hpp"
#include "neused/toml.hpp"

namespace neused {

namespace {

int thread_id() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

int uniform_index(Rng& rng, int n) {
  std::uniform_int_distribution<int> d(0, n - 1);
  return d(rng);
}

}  // namespace

double eikonal_loss(const SdfField& field, const std::vector<Vec3>& points, GradMode mode) {
  if (points.empty()) return 0.0;
  double acc = 0.0;
  for (const Vec3& x : points) {
    const double n = sdf_gradient(field, x, mode).norm();
    acc += (n - 1.0) * (n - 1.0);
  }
  return acc / static_cast<double>(points.size());
}

double eikonal_loss(const ParamStore& store, const FieldBundle& b, FieldSel which,
                    const std::vector<Vec3>& points, int active_levels, double weight,
                    GradBuffer* grad) {
  if (points.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(points.size());
  double acc = 0.0;
  for (const Vec3& x : points)
    acc += eikonal_at(store, b, which, x, active_levels, weight * inv_n, grad);
  return acc * inv_n;
}

std::vector<Vec3> sample_eikonal_points(const ParamStore& store, const FieldBundle& b,
                                        FieldSel which, int active_levels, int count, Rng& rng) {
  const double bound = b.config().grid.bound;
  std::vector<Vec3> pts;
  pts.reserve(count);
  const int n_near = count / 2;
  const SourceFieldView src_view(store, b, active_levels);
  const TargetFieldView tgt_view(store, b, active_levels);
  const SdfField& view =
      which == FieldSel::source ? static_cast<const SdfField&>(src_view) : tgt_view;
  for (int i = 0; i < count; ++i) {
    Vec3 x(uniform_draw(rng, -bound, bound), uniform_draw(rng, -bound, bound),
           uniform_draw(rng, -bound, bound));
    if (i < n_near) {
      // One projection step toward the zero set, then a small jitter.
      const double d = view.sdf(x);
      Vec3 g = view.sdf_gradient_analytic(x);
      const double gn = g.norm();
      if (gn > 1e-9) {
        x -= d * (g / gn);
        for (int a = 0; a < 3; ++a) x[a] += 0.02 * normal_draw(rng);
        x = x.cwiseMax(-bound).cwiseMin(bound);
      }
    }
    pts.push_back(x);
  }
  return pts;
}

int sample_timestep(Rng& rng, const DiffusionSchedule& sched, double t_min_frac,
                    double t_max_frac) {
  if (!(t_min_frac > 0.0 && t_min_frac < t_max_frac && t_max_frac < 1.0))
    throw ConfigError("sample_timestep: need 0 < t_min_frac < t_max_frac < 1");
  const int T = sched.num_steps;
  const int lo = std::max(1, static_cast<int>(t_min_frac * T));
  const int hi = std::min(T, static_cast<int>(t_max_frac * T));
  if (lo >= hi) throw ConfigError("sample_timestep: empty timestep range");
  std::uniform_int_distribution<int> d(lo, hi - 1);
  return d(rng);
}

Conditioning perturb_prompt(const Conditioning& cond, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ConfigError("perturb_prompt: sigma must be >= 0");
  Conditioning out = cond;
  if (sigma == 0.0) return out;
  for (auto& x : out.embedding) x += sigma * normal_draw(rng);
  return out;
}

// --------------------------------- stage 1 ----------------------------------

Stage1Stats stage1_fit(ParamStore& store, FieldBundle& bundle, const CalibratedDataset& dataset,
                       const Stage1Config& cfg, const StepCallback& on_step) {
  if (dataset.images.empty()) throw DatasetError("stage1_fit: empty dataset");
  if (cfg.rays_per_batch < 1) throw ConfigError("stage1_fit: rays_per_batch must be positive");
  if (!(cfg.lambda_eik > 0.0)) throw ConfigError("stage1_fit: lambda_eik must be positive");

  const int levels = bundle.config().grid.levels;
  Rng rng(cfg.seed);

  AdamOptimizer opt(store.size());
  AdamConfig adam;
  adam.lr = cfg.learning_rate;
  int gi = 0;
  for (const auto& r : bundle.background_ranges())
    opt.add_group({"identity" + std::to_string(gi++), r.begin, r.end, adam});
  for (const auto& r : bundle.source_ranges())
    opt.add_group({"identity" + std::to_string(gi++), r.begin, r.end, adam});

  const int nw = worker_count();
  std::vector<GradBuffer> tgrads(nw, GradBuffer(store.size()));
  GradBuffer grad(store.size());

  struct RayJob {
    int view, px, py;
  };
  std::vector<RayJob> jobs(cfg.rays_per_batch);
  std::vector<double> ray_loss(cfg.rays_per_batch);

  Stage1Stats stats;
  for (int it = 0; it < cfg.iterations; ++it) {
    RenderConfig rc;
    rc.fg_samples = cfg.fg_samples;
    rc.bg_samples = cfg.bg_samples;
    rc.active_levels = progressive_schedule(it, cfg.iterations, cfg.initial_levels, levels);
    rc.jitter_fg = uniform_draw(rng);
    rc.jitter_bg = uniform_draw(rng);

    for (auto& j : jobs) {
      j.view = uniform_index(rng, static_cast<int>(dataset.size()));
      j.px = uniform_index(rng, dataset.cameras[j.view].width);
      j.py = uniform_index(rng, dataset.cameras[j.view].height);
    }

    for (auto& g : tgrads) g.clear();
    const double inv_batch = 1.0 / cfg.rays_per_batch;
#pragma omp parallel num_threads(nw)
    {
      RayWorkspace ws;
      const int tid = thread_id();
#pragma omp for schedule(static)
      for (int r = 0; r < cfg.rays_per_batch; ++r) {
        const RayJob& j = jobs[r];
        const Camera& cam = dataset.cameras[j.view];
        const Ray ray = generate_ray(cam, j.px, j.py);
        const RenderOutput out =
            ws.forward(store, bundle, ray, FieldSel::source, rc, /*keep=*/true);
        const Tensor& gt = dataset.images[j.view];
        Vec3 target;
        const std::size_t base = (static_cast<std::size_t>(j.py) * cam.width + j.px) * 3;
        for (int c = 0; c < 3; ++c) target[c] = gt[base + c];
        const Vec3 diff = out.rgb - target;
        ray_loss[r] = diff.squaredNorm();
        ws.backward(store, bundle, 2.0 * inv_batch * diff, Vec3::Zero(), tgrads[tid]);
      }
    }

    double photo = 0.0;
    for (double l : ray_loss) photo += l;
    photo *= inv_batch;

    grad.clear();
    for (const auto& g : tgrads) grad.merge(g);

    const auto eik_pts = sample_eikonal_points(store, bundle, FieldSel::source, rc.active_levels,
                                               cfg.eikonal_points, rng);
    const double eik = eikonal_loss(store, bundle, FieldSel::source, eik_pts, rc.active_levels,
                                    cfg.lambda_eik, &grad);

    const double loss = photo + cfg.lambda_eik * eik;
    if (!std::isfinite(loss))
      throw NumericsError("stage1_fit: non-finite loss at iteration " + std::to_string(it) +
                          " (photometric=" + std::to_string(photo) +
                          ", eikonal=" + std::to_string(eik) + ")");

    opt.step(store, grad);
    if (!store.finite())
      throw NumericsError("stage1_fit: parameters diverged at iteration " + std::to_string(it));

    stats.final_loss = loss;
    stats.iterations_run = it + 1;
    if (on_step) on_step(it, loss);
  }
  return stats;
}

// --------------------------------- stage 2 ----------------------------------

namespace {

void add_edit_groups(AdamOptimizer& opt, const FieldBundle& b, const EditConfig& cfg,
                     bool background_mode) {
  AdamConfig hash_cfg, mlp_cfg;
  hash_cfg.lr = cfg.lr_hash;
  mlp_cfg.lr = cfg.lr_mlp;
  if (background_mode) {
    opt.add_group({"bg_grid", b.bg_grid.param_begin(), b.bg_grid.param_end(), hash_cfg});
    opt.add_group({"bg_geo", b.bg_geo.param_begin(), b.bg_geo.param_end(), mlp_cfg});
    opt.add_group({"bg_color", b.bg_color.param_begin(), b.bg_color.param_end(), mlp_cfg});
  } else {
    opt.add_group({"tgt_grid", b.tgt_grid.param_begin(), b.tgt_grid.param_end(), hash_cfg});
    opt.add_group({"tgt_geo", b.tgt_geo.param_begin(), b.tgt_geo.param_end(), mlp_cfg});
    opt.add_group({"tgt_color", b.tgt_color.param_begin(), b.tgt_color.param_end(), mlp_cfg});
    const std::size_t rho = b.sharpness_offset(FieldSel::target);
    opt.add_group({"tgt_rho", rho, rho + 1, mlp_cfg});
  }
}

}  // namespace

EditStats stage2_edit(ParamStore& store, FieldBundle& bundle, const std::vector<Camera>& cameras,
                      const EditConfig& cfg, const Denoiser& den, const DiffusionSchedule& sched,
                      const EditCallback& on_step) {
  if (cameras.empty()) throw ConfigError("stage2_edit: empty camera pool");
  if (cfg.patch < 4) throw ConfigError("stage2_edit: patch must be at least 4");
  if (cfg.mode != "foreground" && cfg.mode != "background")
    throw ConfigError("stage2_edit: mode must be foreground or background");
  if (!(cfg.t_min_frac > 0.0 && cfg.t_min_frac < cfg.t_max_frac && cfg.t_max_frac < 1.0))
    throw ConfigError("stage2_edit: need 0 < t_min_frac < t_max_frac < 1");
  if (cfg.weights.lambda_pds < 0.0 || cfg.weights.lambda_pe < 0.0)
    throw ConfigError("stage2_edit: loss weights must be >= 0");
  const bool background_mode = cfg.mode == "background";

  Rng rng(cfg.seed);
  const Conditioning y_tgt = Conditioning::from_prompt(cfg.prompt, cfg.embedding_dim);
  Conditioning y_src = cfg.source_prompt.empty()
                           ? Conditioning::null_prompt(cfg.embedding_dim)
                           : Conditioning::from_prompt(cfg.source_prompt, cfg.embedding_dim);
  if (cfg.prompt_noise_sigma > 0.0 && !cfg.perturb_each_step)
    y_src = perturb_prompt(y_src, cfg.prompt_noise_sigma, rng);

  int n_cams = static_cast<int>(cameras.size());
  if (cfg.camera_pool > 0) n_cams = std::min(n_cams, cfg.camera_pool);
  std::vector<Camera> pool(n_cams);
  for (int i = 0; i < n_cams; ++i) pool[i] = resize_camera(cameras[i], cfg.patch, cfg.patch);

  RenderConfig rc;
  rc.fg_samples = cfg.fg_samples;
  rc.bg_samples = cfg.bg_samples;
  rc.active_levels = bundle.config().grid.levels;
  // The Phong pass only matters when its latent term carries weight.
  const bool want_pe = cfg.weights.lambda_pe > 0.0;
  rc.want_phong = want_pe;

  // Pre-edit source renders anchor the identity term for the whole run.
  std::vector<Tensor> src_rgb(n_cams);
  {
    RenderConfig src_rc = rc;
    src_rc.want_phong = false;
    for (int i = 0; i < n_cams; ++i)
      render_image(store, bundle, pool[i], FieldSel::source, src_rc, src_rgb[i], nullptr, nullptr,
                   nullptr, nullptr);
  }

  AdamOptimizer opt(store.size());
  add_edit_groups(opt, bundle, cfg, background_mode);

  const int nw = worker_count();
  std::vector<GradBuffer> tgrads(nw, GradBuffer(store.size()));
  GradBuffer grad(store.size());

  EditStats stats;
  for (int step = 0; step < cfg.iterations; ++step) {
    const int cam_i = uniform_index(rng, n_cams);
    rc.jitter_fg = uniform_draw(rng);
    rc.jitter_bg = uniform_draw(rng);
    Conditioning y_step = y_src;
    if (cfg.prompt_noise_sigma > 0.0 && cfg.perturb_each_step)
      y_step = perturb_prompt(y_src, cfg.prompt_noise_sigma, rng);
    const int t = sample_timestep(rng, sched, cfg.t_min_frac, cfg.t_max_frac);

    // Pass 1: forward-only target render of the patch.
    Tensor x0_tgt, phong_tgt;
    render_image(store, bundle, pool[cam_i], FieldSel::target, rc, x0_tgt,
                 want_pe ? &phong_tgt : nullptr, nullptr, nullptr, nullptr);
    if (!want_pe) phong_tgt = src_rgb[cam_i];  // placeholder; its latent term has zero weight

    const DistillStep dstep = DistillStep::draw(src_rgb[cam_i], x0_tgt, phong_tgt, y_step, y_tgt,
                                                cfg.guidance_scale, t, rng);
    PepdsGradients pg;
    int attempt = 0;
    for (;;) {
      try {
        pg = pepds_gradient(dstep, den, sched, cfg.weights);
        break;
      } catch (const TransportError&) {
        if (++attempt > cfg.max_retries) throw;
      }
    }
    if (!std::isfinite(pg.l_pepds))
      throw NumericsError("stage2_edit: non-finite loss at step " + std::to_string(step));

    // Pass 2: re-render each ray with caches and push the per-pixel
    // gradients back through the renderer.
    for (auto& g : tgrads) g.clear();
    const Camera cam = pool[cam_i];
#pragma omp parallel num_threads(nw)
    {
      RayWorkspace ws;
      const int tid = thread_id();
#pragma omp for schedule(static)
      for (int py = 0; py < cam.height; ++py)
        for (int px = 0; px < cam.width; ++px) {
          const Ray ray = generate_ray(cam, px, py);
          ws.forward(store, bundle, ray, FieldSel::target, rc, /*keep=*/true);
          const std::size_t base = (static_cast<std::size_t>(py) * cam.width + px) * 3;
          Vec3 d_rgb, d_phong;
          for (int c = 0; c < 3; ++c) {
            d_rgb[c] = pg.g_img[base + c];
            d_phong[c] = pg.g_phong[base + c];
          }
          ws.backward(store, bundle, d_rgb, d_phong, tgrads[tid]);
        }
    }
    grad.clear();
    for (const auto& g : tgrads) grad.merge(g);

    opt.step(store, grad);
    if (!store.finite())
      throw NumericsError("stage2_edit: parameters diverged at step " + std::to_string(step));

    stats.iterations_run = step + 1;
    stats.final_l_pds = pg.l_pds;
    stats.final_l_pe = pg.l_pe;
    stats.final_l_pepds = pg.l_pepds;
    if (!cfg.loss_log.empty())
      append_loss_trace(cfg.loss_log, step, pg.t, pg.l_pds, pg.l_pe, pg.l_pepds);
    if (on_step) on_step(step, pg, x0_tgt);
  }
  return stats;
}

// -------------------------------- evaluation --------------------------------

MetricsReport evaluate(const ParamStore& store, const FieldBundle& bundle,
                       const std::vector<Camera>& path, const RenderConfig& cfg) {
  MetricsReport report;
  if (path.empty()) return report;

  double sq_err = 0.0, mask_sum = 0.0, consistency = 0.0;
  std::size_t n_values = 0, n_rays = 0;
  Tensor prev_tgt;
  int pairs = 0;
  for (std::size_t i = 0; i < path.size(); ++i) {
    Tensor src, tgt, mask;
    render_image(store, bundle, path[i], FieldSel::source, cfg, src, nullptr, nullptr, nullptr,
                 nullptr);
    render_image(store, bundle, path[i], FieldSel::target, cfg, tgt, nullptr, &mask, nullptr,
                 nullptr);
    for (std::size_t k = 0; k < src.size(); ++k) {
      const double d = tgt[k] - src[k];
      sq_err += d * d;
    }
    n_values += src.size();
    for (std::size_t k = 0; k < mask.size(); ++k) mask_sum += mask[k];
    n_rays += mask.size();
    if (i > 0) {
      double frame_acc = 0.0;
      const std::size_t n_px = tgt.size() / 3;
      for (std::size_t p = 0; p < n_px; ++p) {
        double px_sq = 0.0;
        for (int c = 0; c < 3; ++c) {
          const double d = tgt[p * 3 + c] - prev_tgt[p * 3 + c];
          px_sq += d * d;
        }
        frame_acc += std::sqrt(px_sq);
      }
      consistency += frame_acc / static_cast<double>(n_px);
      ++pairs;
    }
    prev_tgt = std::move(tgt);
  }

  const double mse_all = sq_err / static_cast<double>(n_values);
  report.psnr_vs_source =
      mse_all <= 0.0 ? std::numeric_limits<double>::infinity() : -10.0 * std::log10(mse_all);
  report.frame_consistency = pairs > 0 ? consistency / pairs : 0.0;
  report.mask_coverage = mask_sum / static_cast<double>(n_rays);
  return report;
}

// ----------------------------- oracle dataset -------------------------------

CalibratedDataset make_sphere_dataset(int n_views, int image_size, double camera_distance,
                                      int fg_samples, double sharpness) {
  if (n_views < 1 || image_size < 8) throw ConfigError("make_sphere_dataset: bad dimensions");
  if (camera_distance <= 1.0)
    throw ConfigError("make_sphere_dataset: cameras must sit outside the unit ball");

  const SphereScene sphere(Vec3::Zero(), 0.5);
  AnalyticSceneDesc scene;
  scene.sdf = &sphere;
  scene.color = [](const Vec3& x, const Vec3&) {
    Vec3 c = Vec3(0.7, 0.4, 0.3) + 0.2 * x;
    return Vec3(std::clamp(c.x(), 0.0, 1.0), std::clamp(c.y(), 0.0, 1.0),
                std::clamp(c.z(), 0.0, 1.0));
  };
  scene.bg_color = Vec3(0.9, 0.9, 0.95);
  scene.sharpness = sharpness;

  RenderConfig rc;
  rc.fg_samples = fg_samples;

  // Project the sphere to roughly 80% of the image width.
  const double tan_half = 0.5 / std::sqrt(camera_distance * camera_distance - 0.25);
  const double fx = 0.4 * image_size / tan_half;

  CalibratedDataset ds;
  const double elevation = 30.0 * M_PI / 180.0;
  for (int k = 0; k < n_views; ++k) {
    const double az = 2.0 * M_PI * k / n_views;
    const Vec3 pos = camera_distance * Vec3(std::cos(az) * std::cos(elevation),
                                            std::sin(az) * std::cos(elevation),
                                            std::sin(elevation));
    Camera cam;
    cam.width = cam.height = image_size;
    cam.fx = cam.fy = fx;
    cam.cx = cam.cy = 0.5 * image_size;
    cam.pose = look_at_origin(pos);
    Tensor rgb;
    render_image_analytic(scene, cam, rc, rgb, nullptr);
    ds.images.push_back(std::move(rgb));
    ds.cameras.push_back(cam);
  }
  return ds;
}

// ------------------------------ configuration -------------------------------

namespace {

[[noreturn]] void unknown_key(const std::string& table, const std::string& key) {
  throw ConfigError("config: unknown key [" + table + "] " + key);
}

Vec3 vec3_of(const TomlValue& v) {
  const auto& a = v.as_array();
  if (a.size() != 3)
    throw ConfigError("config line " + std::to_string(v.line) + ": expected 3 numbers");
  return Vec3(a[0], a[1], a[2]);
}

void apply_stage1(const TomlTable& t, Stage1Config& c) {
  for (const auto& [key, v] : t) {
    if (key == "iterations") c.iterations = static_cast<int>(v.as_int());
    else if (key == "rays_per_batch") c.rays_per_batch = static_cast<int>(v.as_int());
    else if (key == "learning_rate") c.learning_rate = v.as_real();
    else if (key == "lambda_eik") c.lambda_eik = v.as_real();
    else if (key == "eikonal_points") c.eikonal_points = static_cast<int>(v.as_int());
    else if (key == "fg_samples") c.fg_samples = static_cast<int>(v.as_int());
    else if (key == "bg_samples") c.bg_samples = static_cast<int>(v.as_int());
    else if (key == "initial_levels") c.initial_levels = static_cast<int>(v.as_int());
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(v.as_int());
    else unknown_key("stage1", key);
  }
  if (c.iterations < 0) throw ConfigError("config: [stage1] iterations must be >= 0");
  if (!(c.lambda_eik > 0.0)) throw ConfigError("config: [stage1] lambda_eik must be > 0");
}

void apply_edit(const TomlTable& t, EditConfig& c) {
  for (const auto& [key, v] : t) {
    if (key == "prompt") c.prompt = v.as_string();
    else if (key == "source_prompt") c.source_prompt = v.as_string();
    else if (key == "guidance_scale") c.guidance_scale = v.as_real();
    else if (key == "lambda_pds") c.weights.lambda_pds = v.as_real();
    else if (key == "lambda_pe") c.weights.lambda_pe = v.as_real();
    else if (key == "t_min_frac") c.t_min_frac = v.as_real();
    else if (key == "t_max_frac") c.t_max_frac = v.as_real();
    else if (key == "iterations") c.iterations = static_cast<int>(v.as_int());
    else if (key == "patch") c.patch = static_cast<int>(v.as_int());
    else if (key == "camera_pool") c.camera_pool = static_cast<int>(v.as_int());
    else if (key == "prompt_noise_sigma") c.prompt_noise_sigma = v.as_real();
    else if (key == "perturb_each_step") c.perturb_each_step = v.as_bool();
    else if (key == "mode") c.mode = v.as_string();
    else if (key == "lr_hash") c.lr_hash = v.as_real();
    else if (key == "lr_mlp") c.lr_mlp = v.as_real();
    else if (key == "fg_samples") c.fg_samples = static_cast<int>(v.as_int());
    else if (key == "bg_samples") c.bg_samples = static_cast<int>(v.as_int());
    else if (key == "max_retries") c.max_retries = static_cast<int>(v.as_int());
    else if (key == "embedding_dim") c.embedding_dim = static_cast<int>(v.as_int());
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(v.as_int());
    else if (key == "loss_log") c.loss_log = v.as_string();
    else unknown_key("edit", key);
  }
  if (!(c.t_min_frac > 0.0 && c.t_min_frac < c.t_max_frac && c.t_max_frac < 1.0))
    throw ConfigError("config: [edit] needs 0 < t_min_frac < t_max_frac < 1");
  if (c.guidance_scale < 0.0) throw ConfigError("config: [edit] guidance_scale must be >= 0");
  if (c.weights.lambda_pds < 0.0 || c.weights.lambda_pe < 0.0)
    throw ConfigError("config: [edit] loss weights must be >= 0");
  if (c.prompt_noise_sigma < 0.0)
    throw ConfigError("config: [edit] prompt_noise_sigma must be >= 0");
  if (c.mode != "foreground" && c.mode != "background")
    throw ConfigError("config: [edit] mode must be foreground or background");
}

void apply_denoiser(const TomlTable& t, DenoiserSpec& c) {
  for (const auto& [key, v] : t) {
    if (key == "kind") c.kind = v.as_string();
    else if (key == "variance") c.variance = v.as_real();
    else if (key == "mean") c.mean = vec3_of(v);
    else if (key == "cond_mean") c.cond_mean = vec3_of(v);
    else if (key == "endpoint") c.endpoint = v.as_string();
    else if (key == "timeout_seconds") c.timeout_seconds = v.as_real();
    else if (key == "timesteps") c.timesteps = static_cast<int>(v.as_int());
    else if (key == "beta_start") c.beta_start = v.as_real();
    else if (key == "beta_end") c.beta_end = v.as_real();
    else unknown_key("denoiser", key);
  }
  if (c.kind != "analytic" && c.kind != "two_mode" && c.kind != "remote")
    throw ConfigError("config: [denoiser] kind must be analytic, two_mode, or remote");
  if (c.kind == "remote" && c.endpoint.empty())
    throw ConfigError("config: [denoiser] remote kind requires an endpoint");
  if (c.variance < 0.0) throw ConfigError("config: [denoiser] variance must be >= 0");
}

void apply_dataset(const TomlTable& t, DatasetSpec& c) {
  for (const auto& [key, v] : t) {
    if (key == "path") c.path = v.as_string();
    else if (key == "format") c.format = v.as_string();
    else if (key == "holdout") c.holdout = static_cast<int>(v.as_int());
    else unknown_key("dataset", key);
  }
  if (c.format != "blender_transforms" && c.format != "pose_txt")
    throw ConfigError("config: [dataset] format must be blender_transforms or pose_txt");
  if (c.holdout < -1) throw ConfigError("config: [dataset] holdout must be >= -1");
}

}  // namespace

EngineConfig load_engine_config(const std::string& path) {
  const TomlDoc doc = parse_toml_file(path);
  EngineConfig cfg;
  for (const auto& [table, entries] : doc.tables) {
    if (table == "stage1") apply_stage1(entries, cfg.stage1);
    else if (table == "edit") apply_edit(entries, cfg.edit);
    else if (table == "denoiser") apply_denoiser(entries, cfg.denoiser);
    else if (table == "dataset") apply_dataset(entries, cfg.dataset);
    else throw ConfigError("config: unknown table [" + table + "]");
  }
  return cfg;
}

DiffusionSchedule make_schedule(const DenoiserSpec& spec) {
  return build_schedule(spec.timesteps, spec.beta_start, spec.beta_end);
}

std::unique_ptr<Denoiser> make_denoiser(const DenoiserSpec& spec, const std::vector<int>& shape,
                                        const DiffusionSchedule& sched) {
  const auto flat = [&shape](const Vec3& color) {
    Tensor t(shape);
    const std::size_t n = t.size();
    if (n % 3 != 0) throw ShapeError("make_denoiser: image shape must have 3 channels");
    for (std::size_t i = 0; i < n; ++i) t[i] = color[i % 3];
    return t;
  };
  if (spec.kind == "analytic")
    return std::make_unique<AnalyticGaussianDenoiser>(flat(spec.mean), spec.variance, sched);
  if (spec.kind == "two_mode")
    return std::make_unique<TwoModeGaussianDenoiser>(flat(spec.mean), flat(spec.cond_mean),
                                                     spec.variance, sched);
  if (spec.kind == "remote")
    return std::make_unique<RemoteDenoiser>(spec.endpoint, spec.timeout_seconds);
  throw ConfigError("make_denoiser: unknown kind " + spec.kind);
}

Camera resize_camera(const Camera& cam, int width, int height) {
  if (width < 1 || height < 1) throw ConfigError("resize_camera: bad size");
  Camera out = cam;
  const double sx = static_cast<double>(width) / cam.width;
  const double sy = static_cast<double>(height) / cam.height;
  out.fx = cam.fx * sx;
  out.fy = cam.fy * sy;
  out.cx = cam.cx * sx;
  out.cy = cam.cy * sy;
  out.width = width;
  out.height = height;
  return out;
}

}  // namespace neused
