#pragma once

#include <memory>
#include <mutex>
#include <string>

#include "neused/diffusion.hpp"

namespace neused {

/// HTTP client for an external noise-prediction service.
/// POST /v1/denoise with a JSON body carrying the noisy sample, timestep and
/// prompt; the response must echo the shape and return the predicted noise.
/// Calls may come from multiple threads; requests are serialized per client.
class RemoteDenoiser final : public Denoiser {
 public:
  explicit RemoteDenoiser(std::string endpoint, double timeout_seconds = 10.0);
  ~RemoteDenoiser() override;

  Tensor epsilon(const Tensor& x_t, int t, const Conditioning& cond) const override;

  const std::string& endpoint() const { return endpoint_; }

 private:
  std::string endpoint_;
  std::string host_;
  int port_ = 80;
  double timeout_seconds_;
  mutable std::mutex mutex_;
};

}  // namespace neused
