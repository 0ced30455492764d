#include "neused/diffusion.hpp"

#include <cmath>

namespace neused {

DiffusionSchedule build_schedule(int num_steps, double beta_start, double beta_end) {
  if (num_steps < 2) throw ConfigError("build_schedule: need at least 2 timesteps");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("build_schedule: require 0 < beta_start <= beta_end < 1");

  DiffusionSchedule s;
  s.num_steps = num_steps;
  s.betas.resize(num_steps);
  s.alphas.resize(num_steps);
  s.alpha_bars.resize(num_steps);
  s.sigmas.resize(num_steps);

  double bar = 1.0;
  for (int t = 0; t < num_steps; ++t) {
    const double frac = num_steps == 1 ? 0.0 : static_cast<double>(t) / (num_steps - 1);
    s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[t] = 1.0 - s.betas[t];
    bar *= s.alphas[t];
    s.alpha_bars[t] = bar;
    if (t == 0) {
      s.sigmas[t] = 0.0;  // deterministic first step
    } else {
      const double num = 1.0 - s.alpha_bars[t - 1];
      const double den = 1.0 - s.alpha_bars[t];
      s.sigmas[t] = std::sqrt(num / den * (1.0 - s.alphas[t]));
    }
  }
  return s;
}

static void check_t(int t, const DiffusionSchedule& sched, const char* what) {
  if (t < 0 || t >= sched.num_steps) throw ConfigError(std::string(what) + ": timestep out of range");
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
  check_t(t, sched, "forward_noise");
  require_same_shape(x0, eps, "forward_noise");
  const double a = std::sqrt(sched.alpha_bars[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
  Tensor out = Tensor::like(x0);
  for (std::size_t i = 0; i < x0.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
  return out;
}

Tensor posterior_mean(const Tensor& x_t, int t, const Conditioning& cond, const Denoiser& den,
                      const DiffusionSchedule& sched) {
  check_t(t, sched, "posterior_mean");
  Tensor eps_hat = den.epsilon(x_t, t, cond);
  require_same_shape(x_t, eps_hat, "posterior_mean: denoiser output");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alphas[t]);
  const double coeff = (1.0 - sched.alphas[t]) / std::sqrt(1.0 - sched.alpha_bars[t]);
  Tensor out = Tensor::like(x_t);
  for (std::size_t i = 0; i < x_t.size(); ++i)
    out.v[i] = inv_sqrt_alpha * (x_t.v[i] - coeff * eps_hat.v[i]);
  return out;
}

Tensor reverse_step(const Tensor& x_t, int t, const Conditioning& cond, const Denoiser& den,
                    const Tensor& z, const DiffusionSchedule& sched) {
  require_same_shape(x_t, z, "reverse_step");
  Tensor mu = posterior_mean(x_t, t, cond, den, sched);
  const double sigma = sched.sigmas[t];
  for (std::size_t i = 0; i < mu.size(); ++i) mu.v[i] += sigma * z.v[i];
  return mu;
}

StochasticLatent extract_latent(const Tensor& x0, int t, const Conditioning& cond,
                                const Denoiser& den, const Tensor& eps_t, const Tensor& eps_tm1,
                                const DiffusionSchedule& sched, LatentRole role) {
  check_t(t, sched, "extract_latent");
  if (sched.sigmas[t] <= 0.0)
    throw NumericsError("extract_latent: sigma_t = 0, degenerate timestep");
  require_same_shape(x0, eps_t, "extract_latent");
  require_same_shape(x0, eps_tm1, "extract_latent");

  Tensor x_t = forward_noise(x0, t, eps_t, sched);
  Tensor x_tm1 = forward_noise(x0, t - 1, eps_tm1, sched);
  Tensor mu = posterior_mean(x_t, t, cond, den, sched);

  StochasticLatent lat;
  lat.t = t;
  lat.role = role;
  lat.z = Tensor::like(x0);
  const double inv_sigma = 1.0 / sched.sigmas[t];
  for (std::size_t i = 0; i < x0.size(); ++i) lat.z.v[i] = (x_tm1.v[i] - mu.v[i]) * inv_sigma;
  return lat;
}

Tensor cfg_epsilon(const Tensor& x_t, int t, const Conditioning& cond, const Denoiser& den,
                   double guidance_scale) {
  if (guidance_scale < 0.0) throw ConfigError("cfg_epsilon: guidance scale must be >= 0");
  const Conditioning null_cond = Conditioning::null_prompt(static_cast<int>(cond.embedding.size()));
  Tensor eps_uncond = den.epsilon(x_t, t, null_cond);
  require_same_shape(x_t, eps_uncond, "cfg_epsilon: unconditional output");
  if (cond.null_flag) return eps_uncond;
  Tensor eps_cond = den.epsilon(x_t, t, cond);
  require_same_shape(x_t, eps_cond, "cfg_epsilon: conditional output");
  Tensor out = Tensor::like(x_t);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.v[i] = eps_uncond.v[i] + guidance_scale * (eps_cond.v[i] - eps_uncond.v[i]);
  return out;
}

Conditioning Conditioning::from_prompt(const std::string& prompt, int dim) {
  Conditioning c;
  c.text = prompt;
  c.null_flag = prompt.empty();
  c.embedding.assign(dim, 0.0);
  if (!c.null_flag) {
    Rng rng(fnv1a(prompt));
    for (auto& x : c.embedding) x = normal_draw(rng);
  }
  return c;
}

AnalyticGaussianDenoiser::AnalyticGaussianDenoiser(Tensor mean, double variance,
                                                   const DiffusionSchedule& sched)
    : mean_(std::move(mean)), variance_(variance), sched_(&sched) {
  if (variance_ < 0.0) throw ConfigError("analytic denoiser: variance must be >= 0");
}

Tensor AnalyticGaussianDenoiser::epsilon(const Tensor& x_t, int t, const Conditioning&) const {
  check_t(t, *sched_, "analytic denoiser");
  require_same_shape(x_t, mean_, "analytic denoiser: sample vs mean");
  const double abar = sched_->alpha_bars[t];
  const double sa = std::sqrt(abar);
  const double sb = std::sqrt(1.0 - abar);
  // E[x0 | x_t] for a Gaussian prior; epsilon_hat inverts the forward map at it.
  const double denom = abar * variance_ + (1.0 - abar);
  Tensor out = Tensor::like(x_t);
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double post = (sa * variance_ * x_t.v[i] + (1.0 - abar) * mean_.v[i]) / denom;
    out.v[i] = (x_t.v[i] - sa * post) / sb;
  }
  return out;
}

TwoModeGaussianDenoiser::TwoModeGaussianDenoiser(Tensor uncond_mean, Tensor cond_mean,
                                                 double variance, const DiffusionSchedule& sched)
    : uncond_(std::move(uncond_mean), variance, sched),
      cond_(std::move(cond_mean), variance, sched) {}

Tensor TwoModeGaussianDenoiser::epsilon(const Tensor& x_t, int t, const Conditioning& cond) const {
  return cond.null_flag ? uncond_.epsilon(x_t, t, cond) : cond_.epsilon(x_t, t, cond);
}

}  // namespace neused
