#pragma once

#include <functional>
#include <string>

#include "neused/diffusion.hpp"
#include "neused/tensor.hpp"

namespace neused {

/// Loss mix and per-timestep weighting for the distillation gradients. The
/// timestep weight scales gradients only, never the reported losses.
struct LossWeights {
  double lambda_pds = 1.0;
  double lambda_pe = 0.2;
  /// Optional override; empty means 1 - alpha_bar_t.
  std::function<double(int, const DiffusionSchedule&)> timestep_weight;

  double weight(int t, const DiffusionSchedule& sched) const {
    if (timestep_weight) return timestep_weight(t, sched);
    return 1.0 - sched.alpha_bars[t];
  }
};

/// One distillation step: a timestep, the noise draws shared by every latent
/// extraction in the step, the three images, and the prompt pair.
struct DistillStep {
  int t = 1;
  Tensor eps_t, eps_tm1;
  Tensor x0_src, x0_tgt, phong_tgt;
  Conditioning y_src, y_tgt;
  double guidance_scale = 350.0;

  /// Draws the shared (eps_t, eps_tm1) pair for the given images.
  static DistillStep draw(Tensor x0_src, Tensor x0_tgt, Tensor phong_tgt, Conditioning y_src,
                          Conditioning y_tgt, double guidance_scale, int t, Rng& rng);
};

/// Score-distillation gradient: w(t) * (eps_hat(x_t^tgt, y_tgt) - eps_t),
/// to be pushed through d x0_tgt / d theta by the caller.
Tensor sds_gradient(const DistillStep& step, const Denoiser& den, const DiffusionSchedule& sched,
                    const LossWeights& weights);

/// Delta-denoising gradient: w(t) * (eps_hat(x_t^tgt, y_tgt) -
/// eps_hat(x_t^src, y_src)), with one eps_t noising both images.
Tensor dds_gradient(const DistillStep& step, const Denoiser& den, const DiffusionSchedule& sched,
                    const LossWeights& weights);

struct PdsLatents {
  Tensor z_src;    // from x0_src with y_src
  Tensor z_tgt;    // from x0_tgt with y_tgt
  Tensor z_phong;  // from phong_tgt with y_tgt
};

/// The three stochastic latents of one step, sharing (t, eps_t, eps_tm1);
/// classifier-free guidance at step.guidance_scale is applied inside every
/// noise prediction.
PdsLatents pds_pair(const DistillStep& step, const Denoiser& den, const DiffusionSchedule& sched);

double pds_loss(const Tensor& z_src, const Tensor& z_tgt);
double pe_loss(const Tensor& z_src, const Tensor& z_phong);
double pepds_loss(const Tensor& z_src, const Tensor& z_tgt, const Tensor& z_phong,
                  const LossWeights& weights);

struct PepdsGradients {
  Tensor g_img;    // shape of x0_tgt; push through d x0_tgt / d theta
  Tensor g_phong;  // shape of phong_tgt; push through d phong_tgt / d theta
  double l_pds = 0.0, l_pe = 0.0, l_pepds = 0.0;
  int t = 0;
};

/// Jacobian-free gradients: g_img = lambda_pds * w(t) * (z_tgt - z_src),
/// g_phong = lambda_pe * w(t) * (z_phong - z_src). The denoiser and z_src
/// are constants with respect to the scene parameters.
PepdsGradients pepds_gradient(const DistillStep& step, const Denoiser& den,
                              const DiffusionSchedule& sched, const LossWeights& weights);

/// Appends one {"step","t","L_PDS","L_PE","L_PEPDS"} line to a JSON-lines
/// trace file.
void append_loss_trace(const std::string& path, int step, int t, double l_pds, double l_pe,
                       double l_pepds);

}  // namespace neused
