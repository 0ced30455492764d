// Distillation gradient tests: score and delta variants against closed
// forms, the shared-noise posterior latents, the loss mix, the Jacobian-free
// gradient identities, and the JSON-lines loss trace.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "neused/distill.hpp"
#include "test_support.hpp"

// Pulled in after the engine headers (the HTTP/JSON vendor headers and Eigen
// disagree about some macros when reordered).
#include "json.hpp"

using namespace neused;
using neused::testing::TempDir;

namespace {

Tensor filled(const std::vector<int>& shape, std::initializer_list<double> vals) {
  Tensor t(shape);
  std::size_t i = 0;
  for (double v : vals) t.v[i++] = v;
  return t;
}

Tensor constant(const std::vector<int>& shape, double v) { return Tensor(shape, v); }

// Returns a fixed tensor regardless of input; conditioning picks which one.
class FixedDenoiser final : public Denoiser {
 public:
  FixedDenoiser(Tensor uncond, Tensor cond) : u_(std::move(uncond)), c_(std::move(cond)) {}
  Tensor epsilon(const Tensor& x_t, int, const Conditioning& cond) const override {
    Tensor out = cond.null_flag ? u_ : c_;
    if (!out.same_shape(x_t)) out = Tensor(x_t.shape, out.v[0]);
    return out;
  }

 private:
  Tensor u_, c_;
};

// Echoes a preset noise tensor: a "perfect" denoiser for one known draw.
class EchoDenoiser final : public Denoiser {
 public:
  explicit EchoDenoiser(Tensor eps) : eps_(std::move(eps)) {}
  Tensor epsilon(const Tensor&, int, const Conditioning&) const override { return eps_; }

 private:
  Tensor eps_;
};

DistillStep make_step(const Tensor& x0_src, const Tensor& x0_tgt, const Tensor& phong,
                      Conditioning y_src, Conditioning y_tgt, double guidance, int t,
                      unsigned seed) {
  Rng rng(seed);
  return DistillStep::draw(x0_src, x0_tgt, phong, std::move(y_src), std::move(y_tgt), guidance, t,
                           rng);
}

}  // namespace

TEST_CASE("distill: step draw consumes exactly two noise tensors") {
  const std::vector<int> shape{2, 3};
  const Tensor x0 = constant(shape, 0.5);
  Rng rng(42);
  const DistillStep step = DistillStep::draw(x0, x0, x0, Conditioning::null_prompt(8),
                                             Conditioning::from_prompt("red", 8), 7.0, 12, rng);
  Rng replay(42);
  const Tensor first = Tensor::gaussian(shape, replay);
  const Tensor second = Tensor::gaussian(shape, replay);
  CHECK(step.eps_t.v == first.v);
  CHECK(step.eps_tm1.v == second.v);
  CHECK(step.t == 12);
  CHECK(step.guidance_scale == 7.0);
  CHECK(step.y_src.null_flag);
  CHECK_FALSE(step.y_tgt.null_flag);
}

TEST_CASE("distill: score gradient vanishes for a perfect noise predictor") {
  const auto sched = build_schedule(100, 1e-4, 0.05);
  const std::vector<int> shape{4, 4, 3};
  const Tensor x0 = constant(shape, 0.3);
  const auto step = make_step(x0, x0, x0, Conditioning::null_prompt(8),
                              Conditioning::from_prompt("red", 8), 350.0, 40, 1);

  // The denoiser that always answers with the true noise leaves no residual,
  // even through classifier-free guidance at a huge scale.
  const EchoDenoiser perfect(step.eps_t);
  const Tensor g = sds_gradient(step, perfect, sched, LossWeights{});
  for (double v : g.v) CHECK(v == 0.0);

  // A zero timestep weight silences any denoiser.
  LossWeights silent;
  silent.timestep_weight = [](int, const DiffusionSchedule&) { return 0.0; };
  const FixedDenoiser biased(constant(shape, 2.0), constant(shape, -1.0));
  const Tensor gz = sds_gradient(step, biased, sched, silent);
  for (double v : gz.v) CHECK(v == 0.0);
}

TEST_CASE("distill: score gradient closed form with constant predictions") {
  const auto sched = build_schedule(50, 1e-3, 0.02);
  const std::vector<int> shape{3};
  const int t = 20;
  const double s = 4.0;
  const Tensor x0 = filled(shape, {0.1, 0.5, 0.9});
  const auto step = make_step(x0, x0, x0, Conditioning::null_prompt(8),
                              Conditioning::from_prompt("blue", 4), s, t, 9);

  const double u = 0.7, c = -0.2;
  const FixedDenoiser den(constant(shape, u), constant(shape, c));
  LossWeights w1;
  w1.timestep_weight = [](int, const DiffusionSchedule&) { return 1.0; };
  const Tensor g = sds_gradient(step, den, sched, w1);
  // Guidance blends the two constants before the noise draw is subtracted.
  const double eps_hat = u + s * (c - u);
  for (std::size_t i = 0; i < g.size(); ++i)
    CHECK(g.v[i] == doctest::Approx(eps_hat - step.eps_t.v[i]).epsilon(1e-14));

  // The default timestep weight is the noise variance share at t.
  const Tensor gw = sds_gradient(step, den, sched, LossWeights{});
  const double w = 1.0 - sched.alpha_bars[t];
  for (std::size_t i = 0; i < g.size(); ++i)
    CHECK(gw.v[i] == doctest::Approx(w * g.v[i]).epsilon(1e-13));
}

TEST_CASE("distill: delta gradient is zero for identical pairs and antisymmetric") {
  const auto sched = build_schedule(80, 1e-4, 0.03);
  const std::vector<int> shape{2, 2};
  const Tensor x0 = filled(shape, {0.2, 0.4, 0.6, 0.8});
  const Conditioning y = Conditioning::from_prompt("a cat", 8);

  // Same image, same prompt: both branches are computed identically.
  const auto same = make_step(x0, x0, x0, y, y, 5.0, 30, 3);
  Rng nrng(17);
  const AnalyticGaussianDenoiser den(Tensor(shape, 0.5), 0.8, sched);
  const Tensor gz = dds_gradient(same, den, sched, LossWeights{});
  for (double v : gz.v) CHECK(v == 0.0);

  // Swapping the roles flips the sign exactly (the step keeps one eps_t).
  const Tensor x0b = filled(shape, {0.9, 0.1, 0.3, 0.7});
  const Conditioning yb = Conditioning::from_prompt("a dog", 8);
  auto fwd = make_step(x0, x0b, x0b, y, yb, 2.0, 25, 4);
  DistillStep rev = fwd;
  std::swap(rev.x0_src, rev.x0_tgt);
  std::swap(rev.y_src, rev.y_tgt);
  const Tensor gf = dds_gradient(fwd, den, sched, LossWeights{});
  const Tensor gr = dds_gradient(rev, den, sched, LossWeights{});
  for (std::size_t i = 0; i < gf.size(); ++i)
    CHECK(gf.v[i] == doctest::Approx(-gr.v[i]).epsilon(1e-13));
}

TEST_CASE("distill: delta gradient closed form for point-mass modes") {
  // With vanishing posterior variance the analytic denoiser's posterior mean
  // collapses to the mode mean, so the guided residual difference reduces to
  // w(t) * sqrt(abar)/sqrt(1-abar) * ((x0_tgt - x0_src) + s (m_u - m_c)).
  const auto sched = build_schedule(60, 1e-3, 0.04);
  const std::vector<int> shape{3};
  const int t = 22;
  const double s = 3.0;
  const double m_u = 0.5, m_c = 0.9;
  const Tensor x0_src = filled(shape, {0.1, 0.2, 0.3});
  const Tensor x0_tgt = filled(shape, {0.35, 0.15, 0.55});
  const auto step = make_step(x0_src, x0_tgt, x0_tgt, Conditioning::null_prompt(8),
                              Conditioning::from_prompt("red", 4), s, t, 6);

  const TwoModeGaussianDenoiser den(constant(shape, m_u), constant(shape, m_c), 1e-18, sched);
  LossWeights w1;
  w1.timestep_weight = [](int, const DiffusionSchedule&) { return 1.0; };
  const Tensor g = dds_gradient(step, den, sched, w1);

  const double abar = sched.alpha_bars[t];
  const double k = std::sqrt(abar) / std::sqrt(1.0 - abar);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double expect = k * ((x0_tgt.v[i] - x0_src.v[i]) + s * (m_u - m_c));
    CHECK(g.v[i] == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("distill: posterior latents share noise and separate the phong channel") {
  const auto sched = build_schedule(100, 1e-4, 0.05);
  const std::vector<int> shape{2, 3};
  const Tensor x0 = filled(shape, {0.2, 0.3, 0.4, 0.5, 0.6, 0.7});
  const Conditioning y = Conditioning::from_prompt("a red sphere", 16);
  const AnalyticGaussianDenoiser den(Tensor(shape, 0.4), 0.5, sched);

  // Identical images under identical prompts produce identical latents.
  auto step = make_step(x0, x0, x0, y, y, 7.5, 44, 21);
  const PdsLatents eq = pds_pair(step, den, sched);
  CHECK(eq.z_src.v == eq.z_tgt.v);
  CHECK(eq.z_src.v == eq.z_phong.v);
  CHECK(pds_loss(eq.z_src, eq.z_tgt) == 0.0);

  // Changing only the shaded image moves only the phong latent.
  DistillStep bent = step;
  bent.phong_tgt.v[3] += 0.25;
  const PdsLatents moved = pds_pair(bent, den, sched);
  CHECK(moved.z_src.v == eq.z_src.v);
  CHECK(moved.z_tgt.v == eq.z_tgt.v);
  CHECK(moved.z_phong.v != eq.z_phong.v);

  // Changing only the target image moves only the target latent.
  DistillStep edited = step;
  edited.x0_tgt.v[0] -= 0.15;
  const PdsLatents shifted = pds_pair(edited, den, sched);
  CHECK(shifted.z_src.v == eq.z_src.v);
  CHECK(shifted.z_phong.v == eq.z_phong.v);
  CHECK(shifted.z_tgt.v != eq.z_tgt.v);

  // A mismatched shape anywhere in the triplet is rejected.
  DistillStep bad = step;
  bad.phong_tgt = Tensor({3, 2});
  CHECK_THROWS_AS(pds_pair(bad, den, sched), ShapeError);
}

TEST_CASE("distill: loss mix reproduces the scalar worked example") {
  const Tensor z_src = filled({1}, {0.3});
  const Tensor z_tgt = filled({1}, {0.5});
  const Tensor z_phong = filled({1}, {0.1});
  CHECK(pds_loss(z_src, z_tgt) == doctest::Approx(0.04).epsilon(1e-14));
  CHECK(pe_loss(z_src, z_phong) == doctest::Approx(0.04).epsilon(1e-14));
  LossWeights w;
  w.lambda_pds = 1.0;
  w.lambda_pe = 0.2;
  CHECK(pepds_loss(z_src, z_tgt, z_phong, w) == doctest::Approx(0.048).epsilon(1e-14));

  // Sum (not mean) over elements.
  const Tensor a = filled({2}, {0.0, 0.0});
  const Tensor b = filled({2}, {0.3, -0.4});
  CHECK(pds_loss(a, b) == doctest::Approx(0.25).epsilon(1e-14));

  CHECK_THROWS_AS(pds_loss(filled({2}, {0, 0}), filled({3}, {0, 0, 0})), ShapeError);
}

TEST_CASE("distill: combined gradients follow the documented identities") {
  const auto sched = build_schedule(100, 1e-4, 0.05);
  const std::vector<int> shape{2, 2, 3};
  Rng img_rng(5);
  Tensor x0_src = Tensor::gaussian(shape, img_rng);
  for (auto& v : x0_src.v) v = 0.5 + 0.1 * v;
  Tensor x0_tgt = x0_src;
  x0_tgt.v[2] += 0.2;
  Tensor phong = x0_src;
  phong.v[7] -= 0.3;

  const Conditioning y_src = Conditioning::null_prompt(8);
  const Conditioning y_tgt = Conditioning::from_prompt("metal", 8);
  const AnalyticGaussianDenoiser den(Tensor(shape, 0.45), 0.7, sched);
  const auto step = make_step(x0_src, x0_tgt, phong, y_src, y_tgt, 10.0, 37, 77);

  LossWeights w;
  w.lambda_pds = 1.25;
  w.lambda_pe = 0.4;
  const PepdsGradients out = pepds_gradient(step, den, sched, w);
  const PdsLatents lat = pds_pair(step, den, sched);
  const double wt = 1.0 - sched.alpha_bars[step.t];

  REQUIRE(out.g_img.shape == shape);
  REQUIRE(out.g_phong.shape == shape);
  CHECK(out.t == 37);
  for (std::size_t i = 0; i < out.g_img.size(); ++i) {
    CHECK(out.g_img.v[i] ==
          doctest::Approx(w.lambda_pds * wt * (lat.z_tgt.v[i] - lat.z_src.v[i])).epsilon(1e-13));
    CHECK(out.g_phong.v[i] ==
          doctest::Approx(w.lambda_pe * wt * (lat.z_phong.v[i] - lat.z_src.v[i])).epsilon(1e-13));
  }
  CHECK(out.l_pds == doctest::Approx(pds_loss(lat.z_src, lat.z_tgt)).epsilon(1e-13));
  CHECK(out.l_pe == doctest::Approx(pe_loss(lat.z_src, lat.z_phong)).epsilon(1e-13));
  CHECK(out.l_pepds ==
        doctest::Approx(w.lambda_pds * out.l_pds + w.lambda_pe * out.l_pe).epsilon(1e-13));

  // The timestep weight scales gradients but never the reported losses.
  LossWeights heavy = w;
  heavy.timestep_weight = [](int, const DiffusionSchedule&) { return 1000.0; };
  const PepdsGradients big = pepds_gradient(step, den, sched, heavy);
  CHECK(big.l_pds == out.l_pds);
  CHECK(big.l_pe == out.l_pe);
  for (std::size_t i = 0; i < big.g_img.size(); ++i)
    CHECK(big.g_img.v[i] == doctest::Approx(1000.0 / wt * out.g_img.v[i]).epsilon(1e-11));

  // Turning the shading term off zeroes its gradient channel exactly.
  LossWeights no_pe = w;
  no_pe.lambda_pe = 0.0;
  const PepdsGradients flat = pepds_gradient(step, den, sched, no_pe);
  for (double v : flat.g_phong.v) CHECK(v == 0.0);
  CHECK(flat.l_pe == doctest::Approx(out.l_pe).epsilon(1e-13));  // still reported

  // At the fixed point every channel is exactly zero.
  const auto fixed = make_step(x0_src, x0_src, x0_src, y_tgt, y_tgt, 10.0, 37, 78);
  const PepdsGradients none = pepds_gradient(fixed, den, sched, w);
  CHECK(none.l_pds == 0.0);
  CHECK(none.l_pe == 0.0);
  for (double v : none.g_img.v) CHECK(v == 0.0);
  for (double v : none.g_phong.v) CHECK(v == 0.0);

  // Same seed, same step, same outputs, bit for bit.
  const auto again = make_step(x0_src, x0_tgt, phong, y_src, y_tgt, 10.0, 37, 77);
  const PepdsGradients rerun = pepds_gradient(again, den, sched, w);
  CHECK(rerun.g_img.v == out.g_img.v);
  CHECK(rerun.g_phong.v == out.g_phong.v);
}

TEST_CASE("distill: loss trace appends JSON lines") {
  TempDir dir;
  const std::string path = dir.file("trace.jsonl");
  append_loss_trace(path, 0, 512, 0.25, 0.0625, 0.2625);
  append_loss_trace(path, 10, 31, 0.5, 0.25, 0.55);

  std::ifstream in(path);
  REQUIRE(bool(in));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(line);
  REQUIRE(lines.size() == 2);

  const auto first = nlohmann::json::parse(lines[0]);
  CHECK(first.at("step").get<int>() == 0);
  CHECK(first.at("t").get<int>() == 512);
  CHECK(first.at("L_PDS").get<double>() == doctest::Approx(0.25));
  CHECK(first.at("L_PE").get<double>() == doctest::Approx(0.0625));
  CHECK(first.at("L_PEPDS").get<double>() == doctest::Approx(0.2625));
  const auto second = nlohmann::json::parse(lines[1]);
  CHECK(second.at("step").get<int>() == 10);
  CHECK(second.at("t").get<int>() == 31);

  CHECK_THROWS_AS(append_loss_trace(dir.file("no/such/dir/trace.jsonl"), 0, 1, 0, 0, 0),
                  ConfigError);
}
