#pragma once

#include <string>
#include <vector>

#include "neused/common.hpp"
#include "neused/params.hpp"

namespace neused {

enum class Act { identity, softplus, sigmoid };

double act_eval(Act a, double z);
double act_d1(Act a, double z);
double act_d2(Act a, double z);

// Fully connected network over a ParamStore. Weights are row-major
// [out x in] blocks named "<name>.W<i>"; biases "<name>.b<i>". Hidden
// layers share one activation; the output layer has its own.
//
// Besides plain forward/backward the net supports a forward directional
// derivative (jvp) and the reverse pass through *both* the value and the
// directional derivative (jvp_backward). The latter is what makes losses on
// spatial SDF gradients trainable: it is a second-order pass and needs the
// activation's second derivative.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, int in, const std::vector<int>& hidden, int out,
      Act hidden_act = Act::softplus, Act out_act = Act::identity);

  // He-style init scaled by fan-in. final_scale shrinks the last layer
  // (geometry nets start near a chosen analytic shape); zero_final makes the
  // last layer exactly zero (residual heads start as the identity edit).
  void init(ParamStore& store, Rng& rng, double final_scale = 1.0, bool zero_final = false) const;

  int in_dim() const { return dims_.front(); }
  int out_dim() const { return dims_.back(); }
  int layers() const { return int(dims_.size()) - 1; }
  std::size_t param_count() const;
  std::size_t param_begin() const { return p_begin_; }
  std::size_t param_end() const { return p_end_; }

  // Caches hold layer inputs and pre-activations (and their tangents for
  // jvp). They are plain buffers; reuse them across calls to avoid churn.
  struct Cache {
    std::vector<double> a;   // layer inputs: x, h1, ..., h_{D-1}  (sum of dims[0..D-1])
    std::vector<double> z;   // pre-activations z1..zD (sum of dims[1..D])
    std::vector<double> ta;  // tangent of a (jvp only)
    std::vector<double> tz;  // tangent of z (jvp only)
  };

  void forward(const ParamStore& store, const double* x, double* y, Cache* cache = nullptr) const;
  // Accumulates parameter gradients; optionally returns dL/dx.
  void backward(const ParamStore& store, const Cache& cache, const double* dy, GradBuffer& grad,
                double* dx = nullptr) const;

  // Forward with tangent tx: y = f(x), ty = J_f(x) tx. Cache required.
  void jvp(const ParamStore& store, const double* x, const double* tx, double* y, double* ty,
           Cache& cache) const;
  // Reverse pass through (y, ty): given dL/dy and dL/dty, accumulates
  // parameter gradients and optionally dL/dx and dL/dtx.
  void jvp_backward(const ParamStore& store, const Cache& cache, const double* dy,
                    const double* dty, GradBuffer& grad, double* dx = nullptr,
                    double* dtx = nullptr) const;

 private:
  std::vector<int> dims_;
  std::vector<std::size_t> w_off_, b_off_;
  Act hidden_act_ = Act::softplus;
  Act out_act_ = Act::identity;
  std::size_t p_begin_ = 0, p_end_ = 0;
  std::size_t a_size_ = 0, z_size_ = 0;

  Act act_of(int layer) const { return layer + 1 == layers() ? out_act_ : hidden_act_; }
};

}  // namespace neused
