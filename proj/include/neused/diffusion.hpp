#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "neused/tensor.hpp"

namespace neused {

/// Per-timestep noise coefficients of a DDPM with a linear beta ramp.
/// alpha_bars[t] is the inclusive product of alphas up to t; sigma[0] = 0 by
/// convention (deterministic final step).
struct DiffusionSchedule {
  int num_steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> sigmas;
};

DiffusionSchedule build_schedule(int num_steps, double beta_start, double beta_end);

/// Prompt conditioning. null_flag marks the empty prompt; its embedding is the
/// canonical zero vector. `text` rides along for the remote wire format.
struct Conditioning {
  std::vector<double> embedding;
  bool null_flag = true;
  std::string text;

  static Conditioning null_prompt(int dim) {
    Conditioning c;
    c.embedding.assign(dim, 0.0);
    c.null_flag = true;
    return c;
  }

  /// Deterministic synthetic embedding derived from the prompt text.
  static Conditioning from_prompt(const std::string& prompt, int dim);
};

/// Noise predictor contract: pure function of (x_t, t, conditioning), output
/// shaped like the input.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor epsilon(const Tensor& x_t, int t, const Conditioning& cond) const = 0;
};

enum class LatentRole { source, target, phong };

struct StochasticLatent {
  Tensor z;
  int t = 0;
  LatentRole role = LatentRole::source;
};

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched);

Tensor posterior_mean(const Tensor& x_t, int t, const Conditioning& cond, const Denoiser& den,
                      const DiffusionSchedule& sched);

Tensor reverse_step(const Tensor& x_t, int t, const Conditioning& cond, const Denoiser& den,
                    const Tensor& z, const DiffusionSchedule& sched);

StochasticLatent extract_latent(const Tensor& x0, int t, const Conditioning& cond,
                                const Denoiser& den, const Tensor& eps_t, const Tensor& eps_tm1,
                                const DiffusionSchedule& sched, LatentRole role);

/// Classifier-free guidance: eps(null) + s * (eps(cond) - eps(null)).
Tensor cfg_epsilon(const Tensor& x_t, int t, const Conditioning& cond, const Denoiser& den,
                   double guidance_scale);

/// Denoiser decorator applying classifier-free guidance to every call.
class CfgDenoiser final : public Denoiser {
 public:
  CfgDenoiser(std::shared_ptr<const Denoiser> inner, double guidance_scale)
      : inner_(std::move(inner)), scale_(guidance_scale) {}
  Tensor epsilon(const Tensor& x_t, int t, const Conditioning& cond) const override {
    return cfg_epsilon(x_t, t, cond, *inner_, scale_);
  }

 private:
  std::shared_ptr<const Denoiser> inner_;
  double scale_;
};

/// Bayes-optimal noise predictor for x0 ~ N(mean, variance * I), independent
/// of conditioning. The closed form is validated against a Monte-Carlo
/// posterior-mean oracle in the test suite.
class AnalyticGaussianDenoiser final : public Denoiser {
 public:
  AnalyticGaussianDenoiser(Tensor mean, double variance, const DiffusionSchedule& sched);
  Tensor epsilon(const Tensor& x_t, int t, const Conditioning& cond) const override;

  const Tensor& mean() const { return mean_; }
  double variance() const { return variance_; }

 private:
  Tensor mean_;
  double variance_;
  const DiffusionSchedule* sched_;
};

/// Two-mode variant: the null prompt denoises toward one Gaussian mode, any
/// other prompt toward the second. Drives the guided-editing tests.
class TwoModeGaussianDenoiser final : public Denoiser {
 public:
  TwoModeGaussianDenoiser(Tensor uncond_mean, Tensor cond_mean, double variance,
                          const DiffusionSchedule& sched);
  Tensor epsilon(const Tensor& x_t, int t, const Conditioning& cond) const override;

  const Tensor& uncond_mean() const { return uncond_.mean(); }
  const Tensor& cond_mean() const { return cond_.mean(); }

 private:
  AnalyticGaussianDenoiser uncond_;
  AnalyticGaussianDenoiser cond_;
};

}  // namespace neused
