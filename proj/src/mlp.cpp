#include "neused/mlp.hpp"

#include <algorithm>
#include <cmath>

namespace neused {

namespace {
inline double sigmoid(double z) {
  if (z >= 0) {
    const double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}
}  // namespace

double act_eval(Act a, double z) {
  switch (a) {
    case Act::identity: return z;
    case Act::softplus:
      if (z > 30.0) return z;
      if (z < -30.0) return std::exp(z);
      return std::log1p(std::exp(z));
    case Act::sigmoid: return sigmoid(z);
  }
  return z;
}

double act_d1(Act a, double z) {
  switch (a) {
    case Act::identity: return 1.0;
    case Act::softplus: return sigmoid(z);
    case Act::sigmoid: {
      const double s = sigmoid(z);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

double act_d2(Act a, double z) {
  switch (a) {
    case Act::identity: return 0.0;
    case Act::softplus: {
      const double s = sigmoid(z);
      return s * (1.0 - s);
    }
    case Act::sigmoid: {
      const double s = sigmoid(z);
      return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
  }
  return 0.0;
}

Mlp::Mlp(ParamStore& store, const std::string& name, int in, const std::vector<int>& hidden,
         int out, Act hidden_act, Act out_act)
    : hidden_act_(hidden_act), out_act_(out_act) {
  if (in <= 0 || out <= 0) throw ConfigError("mlp " + name + ": non-positive width");
  dims_.push_back(in);
  for (int h : hidden) {
    if (h <= 0) throw ConfigError("mlp " + name + ": non-positive hidden width");
    dims_.push_back(h);
  }
  dims_.push_back(out);
  for (int l = 0; l + 1 < int(dims_.size()); ++l) {
    const std::string tag = std::to_string(l);
    w_off_.push_back(store.add(name + ".W" + tag, {dims_[l + 1], dims_[l]}));
    b_off_.push_back(store.add(name + ".b" + tag, {dims_[l + 1]}));
  }
  p_begin_ = w_off_.front();
  p_end_ = b_off_.back() + std::size_t(dims_.back());
  for (int l = 0; l + 1 < int(dims_.size()); ++l) a_size_ += std::size_t(dims_[l]);
  for (int l = 1; l < int(dims_.size()); ++l) z_size_ += std::size_t(dims_[l]);
}

std::size_t Mlp::param_count() const { return p_end_ - p_begin_; }

void Mlp::init(ParamStore& store, Rng& rng, double final_scale, bool zero_final) const {
  const int D = layers();
  for (int l = 0; l < D; ++l) {
    const int fan_in = dims_[l], fan_out = dims_[l + 1];
    double* W = store.data(w_off_[l]);
    double* b = store.data(b_off_[l]);
    const bool last = (l + 1 == D);
    if (last && zero_final) {
      std::fill(W, W + std::size_t(fan_out) * fan_in, 0.0);
      std::fill(b, b + fan_out, 0.0);
      continue;
    }
    double std = std::sqrt(2.0 / fan_in);
    if (last) std *= final_scale;
    for (int i = 0; i < fan_out * fan_in; ++i) W[i] = std * normal_draw(rng);
    std::fill(b, b + fan_out, 0.0);
  }
}

namespace {
thread_local std::vector<double> tl_a, tl_b, tl_c, tl_d;
}

void Mlp::forward(const ParamStore& store, const double* x, double* y, Cache* cache) const {
  const int D = layers();
  if (cache) {
    cache->a.resize(a_size_);
    cache->z.resize(z_size_);
  }
  tl_a.resize(std::size_t(*std::max_element(dims_.begin(), dims_.end())));
  tl_b.resize(tl_a.size());
  const double* in = x;
  std::size_t a_off = 0, z_off = 0;
  for (int l = 0; l < D; ++l) {
    const int ni = dims_[l], no = dims_[l + 1];
    if (cache) std::copy(in, in + ni, cache->a.data() + a_off);
    const double* W = store.data(w_off_[l]);
    const double* b = store.data(b_off_[l]);
    double* out = (l + 1 == D) ? y : tl_b.data();
    const Act act = act_of(l);
    for (int r = 0; r < no; ++r) {
      double z = b[r];
      const double* wr = W + std::size_t(r) * ni;
      for (int c = 0; c < ni; ++c) z += wr[c] * in[c];
      if (cache) cache->z[z_off + std::size_t(r)] = z;
      out[r] = act_eval(act, z);
    }
    a_off += std::size_t(ni);
    z_off += std::size_t(no);
    if (l + 1 < D) {
      std::copy(out, out + no, tl_a.data());
      in = tl_a.data();
    }
  }
}

void Mlp::backward(const ParamStore& store, const Cache& cache, const double* dy, GradBuffer& grad,
                   double* dx) const {
  const int D = layers();
  tl_c.resize(std::size_t(*std::max_element(dims_.begin(), dims_.end())));
  tl_d.resize(tl_c.size());
  double* g = tl_c.data();   // dL/d a_{l+1}
  double* gz = tl_d.data();  // dL/d z_{l+1}
  std::copy(dy, dy + dims_.back(), g);
  std::size_t a_off = a_size_, z_off = z_size_;
  for (int l = D - 1; l >= 0; --l) {
    const int ni = dims_[l], no = dims_[l + 1];
    a_off -= std::size_t(ni);
    z_off -= std::size_t(no);
    const Act act = act_of(l);
    const double* z = cache.z.data() + z_off;
    const double* a = cache.a.data() + a_off;
    for (int r = 0; r < no; ++r) gz[r] = g[r] * act_d1(act, z[r]);
    const double* W = store.data(w_off_[l]);
    double* gW = grad.data() + w_off_[l];
    double* gb = grad.data() + b_off_[l];
    for (int r = 0; r < no; ++r) {
      const double gr = gz[r];
      gb[r] += gr;
      double* gwr = gW + std::size_t(r) * ni;
      for (int c = 0; c < ni; ++c) gwr[c] += gr * a[c];
    }
    double* gprev = (l == 0) ? dx : g;
    if (gprev) {
      for (int c = 0; c < ni; ++c) {
        double s = 0.0;
        for (int r = 0; r < no; ++r) s += W[std::size_t(r) * ni + c] * gz[r];
        gprev[c] = s;
      }
    }
  }
}

void Mlp::jvp(const ParamStore& store, const double* x, const double* tx, double* y, double* ty,
              Cache& cache) const {
  const int D = layers();
  cache.a.resize(a_size_);
  cache.z.resize(z_size_);
  cache.ta.resize(a_size_);
  cache.tz.resize(z_size_);
  const std::size_t mx = std::size_t(*std::max_element(dims_.begin(), dims_.end()));
  tl_a.resize(mx);
  tl_b.resize(mx);
  tl_c.resize(mx);
  tl_d.resize(mx);
  const double* in = x;
  const double* tin = tx;
  std::size_t a_off = 0, z_off = 0;
  for (int l = 0; l < D; ++l) {
    const int ni = dims_[l], no = dims_[l + 1];
    std::copy(in, in + ni, cache.a.data() + a_off);
    std::copy(tin, tin + ni, cache.ta.data() + a_off);
    const double* W = store.data(w_off_[l]);
    const double* b = store.data(b_off_[l]);
    double* out = (l + 1 == D) ? y : tl_c.data();
    double* tout = (l + 1 == D) ? ty : tl_d.data();
    const Act act = act_of(l);
    for (int r = 0; r < no; ++r) {
      double z = b[r], tz = 0.0;
      const double* wr = W + std::size_t(r) * ni;
      for (int c = 0; c < ni; ++c) {
        z += wr[c] * in[c];
        tz += wr[c] * tin[c];
      }
      cache.z[z_off + std::size_t(r)] = z;
      cache.tz[z_off + std::size_t(r)] = tz;
      out[r] = act_eval(act, z);
      tout[r] = act_d1(act, z) * tz;
    }
    a_off += std::size_t(ni);
    z_off += std::size_t(no);
    if (l + 1 < D) {
      std::swap(tl_a, tl_c);
      std::swap(tl_b, tl_d);
      in = tl_a.data();
      tin = tl_b.data();
    }
  }
}

void Mlp::jvp_backward(const ParamStore& store, const Cache& cache, const double* dy,
                       const double* dty, GradBuffer& grad, double* dx, double* dtx) const {
  const int D = layers();
  const std::size_t mx = std::size_t(*std::max_element(dims_.begin(), dims_.end()));
  tl_a.resize(mx);
  tl_b.resize(mx);
  tl_c.resize(mx);
  tl_d.resize(mx);
  double* g = tl_a.data();    // dL/d a_{l+1}
  double* gt = tl_b.data();   // dL/d ta_{l+1}
  double* gz = tl_c.data();   // dL/d z_{l+1}
  double* gtz = tl_d.data();  // dL/d tz_{l+1}
  const int nout = dims_.back();
  for (int r = 0; r < nout; ++r) {
    g[r] = dy ? dy[r] : 0.0;
    gt[r] = dty ? dty[r] : 0.0;
  }
  std::size_t a_off = a_size_, z_off = z_size_;
  for (int l = D - 1; l >= 0; --l) {
    const int ni = dims_[l], no = dims_[l + 1];
    a_off -= std::size_t(ni);
    z_off -= std::size_t(no);
    const Act act = act_of(l);
    const double* z = cache.z.data() + z_off;
    const double* tz = cache.tz.data() + z_off;
    const double* a = cache.a.data() + a_off;
    const double* ta = cache.ta.data() + a_off;
    for (int r = 0; r < no; ++r) {
      const double d1 = act_d1(act, z[r]);
      gz[r] = g[r] * d1 + gt[r] * act_d2(act, z[r]) * tz[r];
      gtz[r] = gt[r] * d1;
    }
    const double* W = store.data(w_off_[l]);
    double* gW = grad.data() + w_off_[l];
    double* gb = grad.data() + b_off_[l];
    for (int r = 0; r < no; ++r) {
      gb[r] += gz[r];
      double* gwr = gW + std::size_t(r) * ni;
      const double gzr = gz[r], gtzr = gtz[r];
      for (int c = 0; c < ni; ++c) gwr[c] += gzr * a[c] + gtzr * ta[c];
    }
    double* gprev = (l == 0) ? dx : g;
    double* gtprev = (l == 0) ? dtx : gt;
    if (gprev || gtprev) {
      for (int c = 0; c < ni; ++c) {
        double s = 0.0, st = 0.0;
        for (int r = 0; r < no; ++r) {
          const double w = W[std::size_t(r) * ni + c];
          s += w * gz[r];
          st += w * gtz[r];
        }
        if (gprev) gprev[c] = s;
        if (gtprev) gtprev[c] = st;
      }
    }
  }
}

}  // namespace neused
