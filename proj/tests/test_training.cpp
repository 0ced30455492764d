// Training loop tests: the eikonal penalty, timestep sampling statistics,
// prompt perturbation, partition isolation of both fitting stages,
// determinism, the evaluation metrics, the synthetic sphere dataset, and the
// run-configuration loader.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "neused/train.hpp"
#include "test_support.hpp"

using namespace neused;
using neused::testing::TempDir;
using neused::testing::small_scene;

namespace {

// A plane whose distance field has slope two everywhere: unit-gradient
// violation of exactly (2-1)^2 = 1.
class DoublePlane final : public SdfField {
 public:
  double sdf(const Vec3& x) const override { return 2.0 * (x.dot(n_) - 0.1); }
  Vec3 sdf_gradient_analytic(const Vec3&) const override { return 2.0 * n_; }

 private:
  Vec3 n_ = Vec3(1.0, 2.0, -2.0).normalized() * 1.0;
};

struct BundleFixture {
  ParamStore store;
  FieldBundle bundle;
  explicit BundleFixture(unsigned seed = 7) : bundle(store, small_scene()) {
    Rng rng(seed);
    bundle.init(store, rng);
  }
};

std::vector<double> slice(const ParamStore& store, const FieldBundle::Range& r) {
  return std::vector<double>(store.values().begin() + r.begin, store.values().begin() + r.end);
}

bool ranges_equal(const ParamStore& store, const std::vector<FieldBundle::Range>& ranges,
                  const std::vector<double>& snapshot) {
  for (const auto& r : ranges)
    for (std::size_t i = r.begin; i < r.end; ++i)
      if (store.values()[i] != snapshot[i]) return false;
  return true;
}

bool any_changed(const ParamStore& store, const std::vector<FieldBundle::Range>& ranges,
                 const std::vector<double>& snapshot) {
  for (const auto& r : ranges)
    for (std::size_t i = r.begin; i < r.end; ++i)
      if (store.values()[i] != snapshot[i]) return true;
  return false;
}

EditConfig tiny_edit_config() {
  EditConfig cfg;
  cfg.prompt = "a red sphere";
  cfg.guidance_scale = 2.0;
  cfg.weights.lambda_pds = 1.0;
  cfg.weights.lambda_pe = 0.2;
  cfg.iterations = 2;
  cfg.patch = 8;
  cfg.fg_samples = 6;
  cfg.bg_samples = 4;
  cfg.embedding_dim = 8;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("training: eikonal penalty on closed-form fields") {
  Rng rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 24; ++i)
    pts.emplace_back(uniform_draw(rng, -1.0, 1.0), uniform_draw(rng, -1.0, 1.0),
                     uniform_draw(rng, -1.0, 1.0));

  // A true distance field scores zero in both gradient modes.
  const SphereScene sphere(Vec3(0.1, -0.2, 0.3), 0.7);
  CHECK(eikonal_loss(sphere, pts, GradMode::analytic) < 1e-12);
  CHECK(eikonal_loss(sphere, pts, GradMode::numerical) < 1e-9);

  // A doubled distance field scores exactly one.
  const DoublePlane steep;
  CHECK(eikonal_loss(steep, pts, GradMode::analytic) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(eikonal_loss(steep, pts, GradMode::numerical) == doctest::Approx(1.0).epsilon(1e-8));

  CHECK(eikonal_loss(sphere, {}, GradMode::analytic) == 0.0);

  // Neural version: the reported value does not depend on whether gradients
  // are requested, and source-mode gradients stay inside the source ranges.
  BundleFixture fx;
  std::vector<Vec3> probe(pts.begin(), pts.begin() + 8);
  const double plain = eikonal_loss(fx.store, fx.bundle, FieldSel::source, probe, 4, 0.7, nullptr);
  GradBuffer grad(fx.store.size());
  const double with_grad =
      eikonal_loss(fx.store, fx.bundle, FieldSel::source, probe, 4, 0.7, &grad);
  CHECK(plain == with_grad);
  CHECK(std::isfinite(plain));
  for (const auto& r : fx.bundle.background_ranges())
    for (std::size_t i = r.begin; i < r.end; ++i) CHECK(grad[i] == 0.0);
  for (const auto& r : fx.bundle.target_ranges())
    for (std::size_t i = r.begin; i < r.end; ++i) CHECK(grad[i] == 0.0);
  double source_mass = 0.0;
  for (const auto& r : fx.bundle.source_ranges())
    for (std::size_t i = r.begin; i < r.end; ++i) source_mass += std::abs(grad[i]);
  CHECK(source_mass > 0.0);

  // Probe-point sampling stays inside the modeled box.
  Rng prng(11);
  const auto sampled = sample_eikonal_points(fx.store, fx.bundle, FieldSel::source, 4, 40, prng);
  REQUIRE(sampled.size() == 40);
  const double bound = fx.bundle.config().grid.bound;
  for (const auto& p : sampled) {
    CHECK(p.cwiseAbs().maxCoeff() <= bound + 1e-12);
  }
}

TEST_CASE("training: timestep sampling is uniform over the configured window") {
  const auto sched = build_schedule(1000, 1e-4, 0.02);
  Rng rng(2024);
  const int lo = 20, hi = 980;  // [0.02*T, 0.98*T)
  const int n_bins = 20;
  const int n_draws = 10000;
  std::vector<int> bins(n_bins, 0);
  for (int i = 0; i < n_draws; ++i) {
    const int t = sample_timestep(rng, sched, 0.02, 0.98);
    REQUIRE(t >= lo);
    REQUIRE(t < hi);
    ++bins[(t - lo) * n_bins / (hi - lo)];
  }
  // Pearson statistic against the uniform expectation; 19 degrees of freedom
  // at the 1% level.
  const double expected = double(n_draws) / n_bins;
  double chi2 = 0.0;
  for (int c : bins) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 36.191);

  // The lower edge clamps to one: the first reverse step is deterministic
  // and carries no latent.
  const auto short_sched = build_schedule(10, 1e-4, 0.02);
  Rng rng2(5);
  std::vector<bool> seen(10, false);
  for (int i = 0; i < 2000; ++i) {
    const int t = sample_timestep(rng2, short_sched, 0.001, 0.999);
    REQUIRE(t >= 1);
    REQUIRE(t <= 8);
    seen[t] = true;
  }
  for (int t = 1; t <= 8; ++t) CHECK(seen[t]);

  CHECK_THROWS_AS(sample_timestep(rng, sched, 0.9, 0.1), ConfigError);
  CHECK_THROWS_AS(sample_timestep(rng, sched, 0.5, 1.2), ConfigError);
  CHECK_THROWS_AS(sample_timestep(rng, short_sched, 0.31, 0.35), ConfigError);
}

TEST_CASE("training: prompt perturbation") {
  const Conditioning base = Conditioning::from_prompt("brushed steel", 64);

  Rng rng(9);
  const Conditioning same = perturb_prompt(base, 0.0, rng);
  CHECK(same.embedding == base.embedding);
  CHECK(same.null_flag == base.null_flag);

  Rng a(123), b(123), c(321);
  const Conditioning pa = perturb_prompt(base, 0.25, a);
  const Conditioning pb = perturb_prompt(base, 0.25, b);
  const Conditioning pc = perturb_prompt(base, 0.25, c);
  CHECK(pa.embedding == pb.embedding);
  CHECK(pa.embedding != pc.embedding);
  CHECK_FALSE(pa.null_flag);

  // The null prompt keeps its flag even when its embedding is jittered.
  const Conditioning null_p = Conditioning::null_prompt(16);
  Rng d(7);
  CHECK(perturb_prompt(null_p, 0.5, d).null_flag);

  // Moment check on a wide embedding.
  const Conditioning wide = Conditioning::from_prompt("wide", 10000);
  Rng e(99);
  const Conditioning jit = perturb_prompt(wide, 0.3, e);
  double mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < jit.embedding.size(); ++i) {
    const double dlt = jit.embedding[i] - wide.embedding[i];
    mean += dlt;
    sq += dlt * dlt;
  }
  mean /= jit.embedding.size();
  const double stddev = std::sqrt(sq / jit.embedding.size() - mean * mean);
  CHECK(std::abs(mean) < 0.01);
  CHECK(stddev == doctest::Approx(0.3).epsilon(0.05));

  Rng f(1);
  CHECK_THROWS_AS(perturb_prompt(base, -0.1, f), ConfigError);
}

TEST_CASE("training: reconstruction stage touches only identity parameters") {
  BundleFixture fx;
  const auto dataset = make_sphere_dataset(2, 16, 4.0, 16, 100.0);
  const std::vector<double> before = fx.store.values();

  Stage1Config cfg;
  cfg.iterations = 0;
  const auto none = stage1_fit(fx.store, fx.bundle, dataset, cfg);
  CHECK(none.iterations_run == 0);
  CHECK(fx.store.values() == before);

  cfg.iterations = 3;
  cfg.rays_per_batch = 32;
  cfg.fg_samples = 8;
  cfg.bg_samples = 4;
  cfg.eikonal_points = 8;
  std::vector<double> losses;
  const auto stats =
      stage1_fit(fx.store, fx.bundle, dataset, cfg, [&](int, double l) { losses.push_back(l); });
  CHECK(stats.iterations_run == 3);
  CHECK(losses.size() == 3);
  for (double l : losses) CHECK(std::isfinite(l));
  CHECK(stats.final_loss == losses.back());

  // The edit partition is never touched; the identity partitions move.
  CHECK(ranges_equal(fx.store, fx.bundle.target_ranges(), before));
  CHECK(any_changed(fx.store, fx.bundle.source_ranges(), before));
  CHECK(any_changed(fx.store, fx.bundle.background_ranges(), before));

  CalibratedDataset empty;
  CHECK_THROWS_AS(stage1_fit(fx.store, fx.bundle, empty, cfg), DatasetError);
  Stage1Config bad_rays = cfg;
  bad_rays.rays_per_batch = 0;
  CHECK_THROWS_AS(stage1_fit(fx.store, fx.bundle, dataset, bad_rays), ConfigError);
  Stage1Config bad_eik = cfg;
  bad_eik.lambda_eik = 0.0;
  CHECK_THROWS_AS(stage1_fit(fx.store, fx.bundle, dataset, bad_eik), ConfigError);

  // A poisoned parameter aborts with a numerics diagnostic instead of
  // silently fitting garbage.
  fx.store.block("source.geo.W0")[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(stage1_fit(fx.store, fx.bundle, dataset, cfg), NumericsError);
}

TEST_CASE("training: short reconstruction run reduces the loss") {
  BundleFixture fx(21);
  const auto dataset = make_sphere_dataset(3, 16, 4.0, 24, 100.0);
  Stage1Config cfg;
  cfg.iterations = 40;
  cfg.rays_per_batch = 64;
  cfg.learning_rate = 5e-3;
  cfg.fg_samples = 12;
  cfg.bg_samples = 6;
  cfg.eikonal_points = 8;
  cfg.initial_levels = 2;
  std::vector<double> losses;
  stage1_fit(fx.store, fx.bundle, dataset, cfg, [&](int, double l) { losses.push_back(l); });
  REQUIRE(losses.size() == 40);
  const double head = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10.0;
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  CHECK(tail < head);
  CHECK(std::isfinite(tail));
}

TEST_CASE("training: edit stage partition isolation, trace, and callback") {
  BundleFixture fx(13);
  const auto dataset = make_sphere_dataset(2, 16, 4.0, 16, 100.0);
  const auto sched = build_schedule(100, 1e-4, 0.05);
  DenoiserSpec spec;
  spec.kind = "analytic";
  spec.variance = 0.5;
  const auto den = make_denoiser(spec, {8, 8, 3}, sched);

  TempDir dir;
  EditConfig cfg = tiny_edit_config();
  cfg.loss_log = dir.file("trace.jsonl");

  const std::vector<double> before = fx.store.values();
  int calls = 0;
  std::vector<int> logged_shape;
  const auto stats = stage2_edit(fx.store, fx.bundle, dataset.cameras, cfg, *den, sched,
                                 [&](int step, const PepdsGradients& g, const Tensor& x0) {
                                   CHECK(step == calls);
                                   ++calls;
                                   logged_shape = x0.shape;
                                   CHECK(g.g_img.shape == x0.shape);
                                   CHECK(std::isfinite(g.l_pepds));
                                 });
  CHECK(stats.iterations_run == 2);
  CHECK(calls == 2);
  CHECK(logged_shape == std::vector<int>({8, 8, 3}));
  CHECK(std::isfinite(stats.final_l_pds));
  CHECK(std::isfinite(stats.final_l_pe));

  // Foreground mode edits the target partition only.
  CHECK(ranges_equal(fx.store, fx.bundle.source_ranges(), before));
  CHECK(ranges_equal(fx.store, fx.bundle.background_ranges(), before));
  CHECK(any_changed(fx.store, fx.bundle.target_ranges(), before));

  // Two trace lines were appended.
  std::ifstream in(cfg.loss_log);
  int lines = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++lines;
  CHECK(lines == 2);

  CHECK_THROWS_AS(stage2_edit(fx.store, fx.bundle, {}, cfg, *den, sched), ConfigError);
  EditConfig bad_patch = cfg;
  bad_patch.patch = 2;
  CHECK_THROWS_AS(stage2_edit(fx.store, fx.bundle, dataset.cameras, bad_patch, *den, sched),
                  ConfigError);
  EditConfig bad_mode = cfg;
  bad_mode.mode = "sideways";
  CHECK_THROWS_AS(stage2_edit(fx.store, fx.bundle, dataset.cameras, bad_mode, *den, sched),
                  ConfigError);
  EditConfig bad_t = cfg;
  bad_t.t_min_frac = 0.8;
  bad_t.t_max_frac = 0.2;
  CHECK_THROWS_AS(stage2_edit(fx.store, fx.bundle, dataset.cameras, bad_t, *den, sched),
                  ConfigError);
}

TEST_CASE("training: background edit mode preserves the foreground render") {
  BundleFixture fx(17);
  const auto dataset = make_sphere_dataset(2, 16, 4.0, 16, 100.0);
  const auto sched = build_schedule(100, 1e-4, 0.05);
  DenoiserSpec spec;
  spec.variance = 0.5;
  const auto den = make_denoiser(spec, {8, 8, 3}, sched);

  EditConfig cfg = tiny_edit_config();
  cfg.mode = "background";

  RenderConfig rc;
  rc.fg_samples = 8;
  rc.bg_samples = 4;
  Ray probe;
  probe.o = Vec3(0.0, 0.0, 2.5);
  probe.d = Vec3(0.0, 0.0, -1.0);
  const auto fg_before = render_pixel(fx.store, fx.bundle, probe, FieldSel::target, rc);

  const std::vector<double> before = fx.store.values();
  stage2_edit(fx.store, fx.bundle, dataset.cameras, cfg, *den, sched);

  CHECK(ranges_equal(fx.store, fx.bundle.source_ranges(), before));
  CHECK(ranges_equal(fx.store, fx.bundle.target_ranges(), before));
  CHECK(any_changed(fx.store, fx.bundle.background_ranges(), before));

  // The foreground channel of a target render is bitwise stable; only the
  // shell behind it moved.
  const auto fg_after = render_pixel(fx.store, fx.bundle, probe, FieldSel::target, rc);
  CHECK(fg_after.rgb_fg == fg_before.rgb_fg);
  CHECK(fg_after.mask == fg_before.mask);
  CHECK(fg_after.depth == fg_before.depth);
}

TEST_CASE("training: edit runs are deterministic for a fixed seed") {
  BundleFixture fx(19);
  const auto dataset = make_sphere_dataset(2, 16, 4.0, 16, 100.0);
  const auto sched = build_schedule(100, 1e-4, 0.05);
  DenoiserSpec spec;
  spec.kind = "two_mode";
  spec.variance = 1e-4;
  const auto den = make_denoiser(spec, {8, 8, 3}, sched);

  EditConfig cfg = tiny_edit_config();
  cfg.iterations = 3;

  const std::vector<double> snapshot = fx.store.values();
  stage2_edit(fx.store, fx.bundle, dataset.cameras, cfg, *den, sched);
  const std::vector<double> run_a = fx.store.values();

  fx.store.values() = snapshot;
  stage2_edit(fx.store, fx.bundle, dataset.cameras, cfg, *den, sched);
  CHECK(fx.store.values() == run_a);

  // A poisoned target parameter aborts with a numerics diagnostic.
  fx.store.values() = snapshot;
  fx.store.block("target.geo.W0")[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(stage2_edit(fx.store, fx.bundle, dataset.cameras, cfg, *den, sched),
                  NumericsError);
}

TEST_CASE("training: evaluation metrics") {
  BundleFixture fx(23);
  const auto dataset = make_sphere_dataset(2, 16, 4.0, 16, 100.0);
  RenderConfig rc;
  rc.fg_samples = 8;
  rc.bg_samples = 4;

  // At initialization the edit is a no-op, so the identity score is perfect
  // and a duplicated camera gives perfectly stable consecutive frames.
  const std::vector<Camera> twice{dataset.cameras[0], dataset.cameras[0]};
  const auto clean = evaluate(fx.store, fx.bundle, twice, rc);
  CHECK(std::isinf(clean.psnr_vs_source));
  CHECK(clean.psnr_vs_source > 0);
  CHECK(clean.frame_consistency == 0.0);
  CHECK(clean.mask_coverage >= 0.0);
  CHECK(clean.mask_coverage <= 1.0);

  // A single camera has no consecutive pairs.
  const auto solo = evaluate(fx.store, fx.bundle, {dataset.cameras[0]}, rc);
  CHECK(solo.frame_consistency == 0.0);

  // Perturbing the target partition makes the identity score finite.
  for (const auto& r : fx.bundle.target_ranges())
    for (std::size_t i = r.begin; i < r.end; ++i) fx.store.values()[i] += 0.05;
  const auto moved = evaluate(fx.store, fx.bundle, twice, rc);
  CHECK(std::isfinite(moved.psnr_vs_source));

  // An empty path reports zeros.
  const auto blank = evaluate(fx.store, fx.bundle, {}, rc);
  CHECK(blank.psnr_vs_source == 0.0);
}

TEST_CASE("training: synthetic sphere dataset") {
  const auto ds = make_sphere_dataset(4, 16, 4.0, 24, 120.0);
  REQUIRE(ds.size() == 4);
  REQUIRE(ds.images.size() == 4);
  REQUIRE(ds.cameras.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(ds.images[i].shape == std::vector<int>({16, 16, 3}));
    for (double v : ds.images[i].v) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0 + 1e-12);
    }
    validate_pose(ds.cameras[i].pose);
    CHECK(ds.cameras[i].pose.topRightCorner<3, 1>().norm() == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(ds.cameras[i].width == 16);
  }
  // Different azimuths give different views.
  CHECK(ds.images[0].v != ds.images[1].v);
  // The oracle is deterministic.
  const auto again = make_sphere_dataset(4, 16, 4.0, 24, 120.0);
  CHECK(again.images[2].v == ds.images[2].v);

  CHECK_THROWS_AS(make_sphere_dataset(0, 16), ConfigError);
  CHECK_THROWS_AS(make_sphere_dataset(4, 4), ConfigError);
  CHECK_THROWS_AS(make_sphere_dataset(4, 16, 0.8), ConfigError);
}

TEST_CASE("training: run configuration loading") {
  TempDir dir;
  const std::string path = dir.file("run.toml");
  {
    std::ofstream out(path);
    out << "# engine run configuration\n"
        << "[stage1]\n"
        << "iterations = 1200\n"
        << "rays_per_batch = 256\n"
        << "learning_rate = 5e-3\n"
        << "lambda_eik = 0.2\n"
        << "eikonal_points = 16\n"
        << "fg_samples = 24\n"
        << "bg_samples = 12\n"
        << "initial_levels = 2\n"
        << "seed = 42\n"
        << "\n"
        << "[edit]\n"
        << "prompt = \"a red sphere\"\n"
        << "source_prompt = \"a sphere\"\n"
        << "guidance_scale = 7.5\n"
        << "lambda_pds = 1.0\n"
        << "lambda_pe = 0.25\n"
        << "t_min_frac = 0.1\n"
        << "t_max_frac = 0.9\n"
        << "iterations = 150\n"
        << "patch = 32\n"
        << "camera_pool = 3\n"
        << "prompt_noise_sigma = 0.02\n"
        << "perturb_each_step = true\n"
        << "mode = \"foreground\"\n"
        << "lr_hash = 0.02\n"
        << "lr_mlp = 0.002\n"
        << "fg_samples = 20\n"
        << "bg_samples = 10\n"
        << "max_retries = 5\n"
        << "embedding_dim = 32\n"
        << "seed = 7\n"
        << "loss_log = \"trace.jsonl\"\n"
        << "\n"
        << "[denoiser]\n"
        << "kind = \"two_mode\"\n"
        << "variance = 0.0001\n"
        << "mean = [0.5, 0.5, 0.5]\n"
        << "cond_mean = [1.0, 0.0, 0.0]\n"
        << "timesteps = 500\n"
        << "beta_start = 0.0002\n"
        << "beta_end = 0.03\n"
        << "\n"
        << "[dataset]\n"
        << "path = \"scenes/sphere\"\n"
        << "format = \"blender_transforms\"\n"
        << "holdout = 3\n";
  }
  const EngineConfig cfg = load_engine_config(path);
  CHECK(cfg.stage1.iterations == 1200);
  CHECK(cfg.stage1.rays_per_batch == 256);
  CHECK(cfg.stage1.learning_rate == doctest::Approx(5e-3));
  CHECK(cfg.stage1.lambda_eik == doctest::Approx(0.2));
  CHECK(cfg.stage1.eikonal_points == 16);
  CHECK(cfg.stage1.fg_samples == 24);
  CHECK(cfg.stage1.initial_levels == 2);
  CHECK(cfg.stage1.seed == 42);
  CHECK(cfg.edit.prompt == "a red sphere");
  CHECK(cfg.edit.source_prompt == "a sphere");
  CHECK(cfg.edit.guidance_scale == doctest::Approx(7.5));
  CHECK(cfg.edit.weights.lambda_pds == doctest::Approx(1.0));
  CHECK(cfg.edit.weights.lambda_pe == doctest::Approx(0.25));
  CHECK(cfg.edit.t_min_frac == doctest::Approx(0.1));
  CHECK(cfg.edit.iterations == 150);
  CHECK(cfg.edit.patch == 32);
  CHECK(cfg.edit.camera_pool == 3);
  CHECK(cfg.edit.prompt_noise_sigma == doctest::Approx(0.02));
  CHECK(cfg.edit.perturb_each_step);
  CHECK(cfg.edit.mode == "foreground");
  CHECK(cfg.edit.lr_hash == doctest::Approx(0.02));
  CHECK(cfg.edit.lr_mlp == doctest::Approx(0.002));
  CHECK(cfg.edit.max_retries == 5);
  CHECK(cfg.edit.embedding_dim == 32);
  CHECK(cfg.edit.seed == 7);
  CHECK(cfg.edit.loss_log == "trace.jsonl");
  CHECK(cfg.denoiser.kind == "two_mode");
  CHECK(cfg.denoiser.variance == doctest::Approx(1e-4));
  CHECK(cfg.denoiser.mean.isApprox(Vec3(0.5, 0.5, 0.5)));
  CHECK(cfg.denoiser.cond_mean.isApprox(Vec3(1.0, 0.0, 0.0)));
  CHECK(cfg.denoiser.timesteps == 500);
  CHECK(cfg.denoiser.beta_start == doctest::Approx(2e-4));
  CHECK(cfg.denoiser.beta_end == doctest::Approx(0.03));
  CHECK(cfg.dataset.path == "scenes/sphere");
  CHECK(cfg.dataset.holdout == 3);

  // Unknown keys, unknown tables, and out-of-range values are rejected.
  auto write_and_load = [&dir](const std::string& body) {
    TempDir inner;
    const std::string p = inner.file("bad.toml");
    std::ofstream out(p);
    out << body;
    out.close();
    return load_engine_config(p);
  };
  CHECK_THROWS_AS(write_and_load("[stage1]\nwarp_speed = 9\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[warp]\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[edit]\nt_min_frac = 0.9\nt_max_frac = 0.1\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[edit]\nmode = \"sideways\"\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[denoiser]\nkind = \"magic\"\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[denoiser]\nkind = \"remote\"\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[denoiser]\nvariance = -1.0\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[dataset]\nformat = \"csv\"\n"), ConfigError);
  CHECK_THROWS_AS(write_and_load("[dataset]\nholdout = -2\n"), ConfigError);
  CHECK_THROWS_AS(load_engine_config(dir.file("missing.toml")), ConfigError);
}

TEST_CASE("training: schedule and denoiser factories") {
  DenoiserSpec spec;
  spec.timesteps = 200;
  spec.beta_start = 1e-3;
  spec.beta_end = 0.04;
  const auto sched = make_schedule(spec);
  CHECK(sched.num_steps == 200);
  CHECK(int(sched.alpha_bars.size()) == 200);
  CHECK(sched.betas.front() == doctest::Approx(1e-3));
  CHECK(sched.betas.back() == doctest::Approx(0.04));

  const std::vector<int> shape{2, 2, 3};
  Tensor x(shape, 0.6);

  // The analytic factory matches a hand-built denoiser bit for bit.
  spec.kind = "analytic";
  spec.variance = 0.3;
  spec.mean = Vec3(0.4, 0.5, 0.6);
  const auto built = make_denoiser(spec, shape, sched);
  Tensor mean_img(shape);
  for (std::size_t i = 0; i < mean_img.size(); ++i) mean_img[i] = spec.mean[i % 3];
  const AnalyticGaussianDenoiser direct(mean_img, 0.3, sched);
  const Conditioning y = Conditioning::from_prompt("x", 4);
  CHECK(built->epsilon(x, 50, y).v == direct.epsilon(x, 50, y).v);

  // The two-mode factory switches on the conditioning flag.
  spec.kind = "two_mode";
  spec.cond_mean = Vec3(1.0, 0.0, 0.0);
  const auto two = make_denoiser(spec, shape, sched);
  const Tensor eu = two->epsilon(x, 50, Conditioning::null_prompt(4));
  const Tensor ec = two->epsilon(x, 50, y);
  CHECK(eu.v != ec.v);

  // Remote endpoints are validated at construction.
  spec.kind = "remote";
  spec.endpoint = "not-a-host-port";
  CHECK_THROWS_AS(make_denoiser(spec, shape, sched), ConfigError);

  // Image shapes must carry three channels.
  spec.kind = "analytic";
  CHECK_THROWS_AS(make_denoiser(spec, {2, 2}, sched), ShapeError);
}

TEST_CASE("training: camera resizing preserves the field of view") {
  Camera cam;
  cam.width = 64;
  cam.height = 48;
  cam.fx = 50.0;
  cam.fy = 40.0;
  cam.cx = 32.0;
  cam.cy = 24.0;

  const Camera half = resize_camera(cam, 32, 24);
  CHECK(half.fx == doctest::Approx(25.0));
  CHECK(half.fy == doctest::Approx(20.0));
  CHECK(half.cx == doctest::Approx(16.0));
  CHECK(half.cy == doctest::Approx(12.0));
  CHECK(half.width == 32);
  CHECK(half.height == 24);
  CHECK(std::atan(0.5 * half.width / half.fx) ==
        doctest::Approx(std::atan(0.5 * cam.width / cam.fx)).epsilon(1e-14));

  const Camera twice = resize_camera(cam, 128, 96);
  CHECK(twice.fx == doctest::Approx(100.0));
  CHECK(std::atan(0.5 * twice.height / twice.fy) ==
        doctest::Approx(std::atan(0.5 * cam.height / cam.fy)).epsilon(1e-14));

  CHECK_THROWS_AS(resize_camera(cam, 0, 24), ConfigError);
}
