#include "ncdssm/nn.hpp"

#include "ncdssm/sqrt_linalg.hpp"

#include <cmath>

namespace ncdssm::nn {

Mat orthogonal_matrix(Rng& rng, int n) {
  const Mat g = rng.normal_mat(n, n);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ();
  const Mat r = qr.matrixQR();
  for (int i = 0; i < n; ++i)
    if (r(i, i) < 0.0) q.col(i) = -q.col(i);
  return q;
}

Mat skew_symmetric(Rng& rng, int n) {
  const Mat g = rng.normal_mat(n, n);
  return 0.5 * (g - g.transpose());
}

Mat spectral_normalize(const Mat& w, Vec& v, int iters) {
  double sigma = 0.0;
  for (int i = 0; i < iters; ++i) sigma = la::spectral_norm_step(w, v);
  if (sigma <= 1.0) return w;
  return w / sigma;
}

Mlp::Mlp(std::string prefix, MlpConfig cfg, ParamGroup group)
    : prefix_(std::move(prefix)), cfg_(std::move(cfg)), group_(group) {
  if (cfg_.widths.size() < 2) throw std::invalid_argument("mlp: need at least one layer");
}

void Mlp::register_params(ParamStore& store, InitScheme scheme, Rng& rng) const {
  const int n_layers = layers();
  for (int l = 0; l < n_layers; ++l) {
    const int fan_in = cfg_.widths[l];
    const int fan_out = cfg_.widths[l + 1];
    Mat w;
    const bool square = fan_in == fan_out;
    const bool last = l == n_layers - 1;
    if (scheme == InitScheme::ZeroLastLayer && last) {
      w = Mat::Zero(fan_out, fan_in);
    } else if (scheme == InitScheme::Orthogonal && square) {
      w = orthogonal_matrix(rng, fan_in);
    } else if (scheme == InitScheme::SkewSymmetricExpmSeed && square) {
      w = skew_symmetric(rng, fan_in);
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      w = Mat::NullaryExpr(fan_out, fan_in, [&](Eigen::Index, Eigen::Index) {
        return rng.uniform(-bound, bound);
      });
    }
    const std::string wname = prefix_ + ".w" + std::to_string(l);
    store.add(wname, w, group_);
    store.add(prefix_ + ".b" + std::to_string(l), Mat::Zero(fan_out, 1), group_);
    if (cfg_.spectral_normalize) {
      Vec v = Vec::Ones(fan_in);
      double sigma = 0.0;
      for (int i = 0; i < 50; ++i) sigma = la::spectral_norm_step(w, v);
      Vec u = w * v;
      if (u.norm() > 0.0) u /= u.norm();
      store.add(wname + ".sn_v", v, ParamGroup::Buffer, false);
      store.add(wname + ".sn_u", u, ParamGroup::Buffer, false);
    }
  }
}

void Mlp::refresh_spectral_state(ParamStore& store) const {
  if (!cfg_.spectral_normalize) return;
  for (int l = 0; l < layers(); ++l) {
    const std::string wname = prefix_ + ".w" + std::to_string(l);
    const Mat& w = store.at(wname).value;
    Param& pv = store.at(wname + ".sn_v");
    Vec v = pv.value.col(0);
    la::spectral_norm_step(w, v);
    Vec u = w * v;
    if (u.norm() > 0.0) u /= u.norm();
    pv.value = v;
    store.at(wname + ".sn_u").value = u;
  }
}

ad::Var Mlp::weight(Binding& b, int layer) const {
  const std::string wname = prefix_ + ".w" + std::to_string(layer);
  if (!cfg_.spectral_normalize) return b[wname];
  const std::string key = wname + ".eff";
  auto it = b.memo.find(key);
  if (it != b.memo.end()) return it->second;

  ad::Tape& t = *b.tape;
  ad::Var w = b[wname];
  ad::Var u = b[wname + ".sn_u"];
  ad::Var v = b[wname + ".sn_v"];
  ad::Var sigma = t.matmul(t.transpose(u), t.matmul(w, v));
  ad::Var eff = w;
  if (t.value(sigma)(0, 0) > 1.0) eff = t.scale_by(w, t.reciprocal(sigma));
  b.memo[key] = eff;
  return eff;
}

ad::Var Mlp::activation_derivative(ad::Tape& t, ad::Var pre, ad::Var post) const {
  switch (cfg_.activation) {
    case Activation::Tanh: {
      ad::Var ones = t.constant(Mat::Ones(post.rows, 1));
      return t.sub(ones, t.square(post));
    }
    case Activation::Softplus: {
      // sigmoid(pre)
      ad::Var ones = t.constant(Mat::Ones(pre.rows, 1));
      return t.reciprocal(t.add(ones, t.exp(t.scale(pre, -1.0))));
    }
    case Activation::None:
      return t.constant(Mat::Ones(pre.rows, 1));
  }
  throw std::logic_error("unreachable");
}

ad::Var Mlp::forward_impl(Binding& b, ad::Var x, std::vector<ad::Var>* pre,
                          std::vector<ad::Var>* post) const {
  if (x.rows != input_width() || x.cols != 1)
    throw std::invalid_argument("mlp forward: input width mismatch for " + prefix_);
  ad::Tape& t = *b.tape;
  ad::Var h = x;
  const int n_layers = layers();
  for (int l = 0; l < n_layers; ++l) {
    ad::Var z = t.add(t.matmul(weight(b, l), h), b[prefix_ + ".b" + std::to_string(l)]);
    const bool act = l + 1 < n_layers || cfg_.activation_after_last;
    ad::Var a = z;
    if (act) {
      switch (cfg_.activation) {
        case Activation::Tanh: a = t.tanh(z); break;
        case Activation::Softplus: a = t.softplus(z); break;
        case Activation::None: break;
      }
    }
    if (pre) pre->push_back(z);
    if (post) post->push_back(act ? a : z);
    h = a;
  }
  return h;
}

ad::Var Mlp::forward(Binding& b, ad::Var x) const { return forward_impl(b, x, nullptr, nullptr); }

ad::Var Mlp::input_jacobian(Binding& b, ad::Var x) const {
  ad::Tape& t = *b.tape;
  std::vector<ad::Var> pre, post;
  forward_impl(b, x, &pre, &post);
  const int n_layers = layers();
  ad::Var j = weight(b, 0);
  for (int l = 1; l < n_layers; ++l) {
    ad::Var d = activation_derivative(t, pre[l - 1], post[l - 1]);
    j = t.matmul(weight(b, l), t.scale_rows(j, d));
  }
  if (cfg_.activation_after_last && cfg_.activation != Activation::None) {
    ad::Var d = activation_derivative(t, pre[n_layers - 1], post[n_layers - 1]);
    j = t.scale_rows(j, d);
  }
  return j;
}

ad::Var DiagGaussianHead::std_from_raw(ad::Tape& t, ad::Var raw) const {
  ad::Var sp = t.softplus(raw);
  return t.add(sp, t.constant(Mat::Constant(raw.rows, raw.cols, floor)));
}

ad::Var DiagGaussianHead::sample(ad::Tape& t, ad::Var mean, ad::Var stddev, const Vec& noise) {
  if (mean.rows != stddev.rows || mean.rows != noise.size())
    throw std::invalid_argument("sample: shape mismatch");
  return t.add(mean, t.mul(stddev, t.constant(noise)));
}

}  // namespace ncdssm::nn
