#include "neused/distill.hpp"

#include <fstream>

#include "json.hpp"

namespace neused {

namespace {

// Non-owning guidance wrapper so every noise prediction in this module runs
// through classifier-free guidance at the step's scale.
class GuidedView final : public Denoiser {
 public:
  GuidedView(const Denoiser& inner, double scale) : inner_(&inner), scale_(scale) {}
  Tensor epsilon(const Tensor& x_t, int t, const Conditioning& cond) const override {
    return cfg_epsilon(x_t, t, cond, *inner_, scale_);
  }

 private:
  const Denoiser* inner_;
  double scale_;
};

void check_step(const DistillStep& step) {
  require_same_shape(step.x0_src, step.x0_tgt, "distill step: source vs target");
  require_same_shape(step.x0_src, step.phong_tgt, "distill step: source vs phong");
  require_same_shape(step.x0_src, step.eps_t, "distill step: eps_t");
  require_same_shape(step.x0_src, step.eps_tm1, "distill step: eps_tm1");
}

}  // namespace

DistillStep DistillStep::draw(Tensor x0_src, Tensor x0_tgt, Tensor phong_tgt, Conditioning y_src,
                              Conditioning y_tgt, double guidance_scale, int t, Rng& rng) {
  DistillStep s;
  s.t = t;
  s.eps_t = Tensor::gaussian(x0_src.shape, rng);
  s.eps_tm1 = Tensor::gaussian(x0_src.shape, rng);
  s.x0_src = std::move(x0_src);
  s.x0_tgt = std::move(x0_tgt);
  s.phong_tgt = std::move(phong_tgt);
  s.y_src = std::move(y_src);
  s.y_tgt = std::move(y_tgt);
  s.guidance_scale = guidance_scale;
  return s;
}

Tensor sds_gradient(const DistillStep& step, const Denoiser& den, const DiffusionSchedule& sched,
                    const LossWeights& weights) {
  check_step(step);
  const GuidedView guided(den, step.guidance_scale);
  const Tensor x_t = forward_noise(step.x0_tgt, step.t, step.eps_t, sched);
  const Tensor eps_hat = guided.epsilon(x_t, step.t, step.y_tgt);
  const double w = weights.weight(step.t, sched);
  Tensor g = Tensor::like(step.x0_tgt);
  for (std::size_t i = 0; i < g.size(); ++i) g.v[i] = w * (eps_hat.v[i] - step.eps_t.v[i]);
  return g;
}

Tensor dds_gradient(const DistillStep& step, const Denoiser& den, const DiffusionSchedule& sched,
                    const LossWeights& weights) {
  check_step(step);
  const GuidedView guided(den, step.guidance_scale);
  const Tensor xt_tgt = forward_noise(step.x0_tgt, step.t, step.eps_t, sched);
  const Tensor xt_src = forward_noise(step.x0_src, step.t, step.eps_t, sched);
  const Tensor eps_tgt = guided.epsilon(xt_tgt, step.t, step.y_tgt);
  const Tensor eps_src = guided.epsilon(xt_src, step.t, step.y_src);
  const double w = weights.weight(step.t, sched);
  Tensor g = Tensor::like(step.x0_tgt);
  for (std::size_t i = 0; i < g.size(); ++i) g.v[i] = w * (eps_tgt.v[i] - eps_src.v[i]);
  return g;
}

PdsLatents pds_pair(const DistillStep& step, const Denoiser& den, const DiffusionSchedule& sched) {
  check_step(step);
  const GuidedView guided(den, step.guidance_scale);
  PdsLatents out;
  out.z_src = extract_latent(step.x0_src, step.t, step.y_src, guided, step.eps_t, step.eps_tm1,
                             sched, LatentRole::source)
                  .z;
  out.z_tgt = extract_latent(step.x0_tgt, step.t, step.y_tgt, guided, step.eps_t, step.eps_tm1,
                             sched, LatentRole::target)
                  .z;
  out.z_phong = extract_latent(step.phong_tgt, step.t, step.y_tgt, guided, step.eps_t,
                               step.eps_tm1, sched, LatentRole::phong)
                    .z;
  return out;
}

double pds_loss(const Tensor& z_src, const Tensor& z_tgt) { return squared_l2(z_tgt, z_src); }

double pe_loss(const Tensor& z_src, const Tensor& z_phong) { return squared_l2(z_phong, z_src); }

double pepds_loss(const Tensor& z_src, const Tensor& z_tgt, const Tensor& z_phong,
                  const LossWeights& weights) {
  return weights.lambda_pds * pds_loss(z_src, z_tgt) + weights.lambda_pe * pe_loss(z_src, z_phong);
}

PepdsGradients pepds_gradient(const DistillStep& step, const Denoiser& den,
                              const DiffusionSchedule& sched, const LossWeights& weights) {
  const PdsLatents lat = pds_pair(step, den, sched);
  const double w = weights.weight(step.t, sched);
  PepdsGradients out;
  out.t = step.t;
  out.l_pds = pds_loss(lat.z_src, lat.z_tgt);
  out.l_pe = pe_loss(lat.z_src, lat.z_phong);
  out.l_pepds = weights.lambda_pds * out.l_pds + weights.lambda_pe * out.l_pe;
  out.g_img = Tensor::like(step.x0_tgt);
  out.g_phong = Tensor::like(step.phong_tgt);
  const double c_img = weights.lambda_pds * w;
  const double c_phong = weights.lambda_pe * w;
  for (std::size_t i = 0; i < out.g_img.size(); ++i) {
    out.g_img.v[i] = c_img * (lat.z_tgt.v[i] - lat.z_src.v[i]);
    out.g_phong.v[i] = c_phong * (lat.z_phong.v[i] - lat.z_src.v[i]);
  }
  return out;
}

void append_loss_trace(const std::string& path, int step, int t, double l_pds, double l_pe,
                       double l_pepds) {
  nlohmann::json line;
  line["step"] = step;
  line["t"] = t;
  line["L_PDS"] = l_pds;
  line["L_PE"] = l_pe;
  line["L_PEPDS"] = l_pepds;
  std::ofstream out(path, std::ios::app);
  if (!out) throw ConfigError("append_loss_trace: cannot open " + path);
  out << line.dump() << "\n";
}

}  // namespace neused
