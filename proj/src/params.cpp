#include "ncdssm/params.hpp"

#include <cmath>

namespace ncdssm {

Param& ParamStore::add(const std::string& name, const Mat& init, ParamGroup group,
                       bool trainable) {
  if (contains(name)) throw std::invalid_argument("parameter already exists: " + name);
  Param p;
  p.value = init;
  p.group = group;
  p.trainable = trainable && group != ParamGroup::Buffer;
  p.adam_m = Mat::Zero(init.rows(), init.cols());
  p.adam_v = Mat::Zero(init.rows(), init.cols());
  index_[name] = storage_.size();
  order_.push_back(name);
  storage_.push_back(std::move(p));
  return storage_.back();
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return storage_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return storage_[it->second];
}

double ParamStore::grad_norm(const std::unordered_map<std::string, Mat>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) s += g.squaredNorm();
  return std::sqrt(s);
}

Binding bind(const ParamStore& params, ad::Tape& tape) {
  Binding b;
  b.tape = &tape;
  for (const auto& name : params.names()) {
    const Param& p = params.at(name);
    b.vars[name] = p.trainable ? tape.leaf(p.value) : tape.constant(p.value);
  }
  return b;
}

std::unordered_map<std::string, Mat> collect_gradients(const ParamStore& params,
                                                       const Binding& binding) {
  std::unordered_map<std::string, Mat> grads;
  for (const auto& name : params.names()) {
    if (!params.at(name).trainable) continue;
    grads[name] = binding.tape->adjoint(binding[name]);
  }
  return grads;
}

GradCheckReport grad_check(ParamStore& params,
                           const std::function<ad::Var(ad::Tape&, Binding&)>& build, double h) {
  if (h < 1e-7 || h > 1e-3) throw std::invalid_argument("grad_check: h must be in [1e-7, 1e-3]");

  ad::Tape tape;
  Binding binding = bind(params, tape);
  ad::Var root = build(tape, binding);
  if (!root.is_scalar()) throw std::invalid_argument("grad_check: objective must be scalar");
  tape.backward(root);
  auto analytic = collect_gradients(params, binding);

  auto eval = [&]() {
    ad::Tape t;
    Binding b = bind(params, t);
    ad::Var r = build(t, b);
    return t.value(r)(0, 0);
  };

  GradCheckReport report;
  for (const auto& name : params.names()) {
    Param& p = params.at(name);
    if (!p.trainable) continue;
    double worst = 0.0;
    for (long i = 0; i < p.value.size(); ++i) {
      const double saved = p.value.data()[i];
      p.value.data()[i] = saved + h;
      const double up = eval();
      p.value.data()[i] = saved - h;
      const double down = eval();
      p.value.data()[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double an = analytic[name].data()[i];
      const double rel = std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-6);
      worst = std::max(worst, rel);
    }
    report.entries.push_back({name, worst});
    if (worst > report.max_rel_err) {
      report.max_rel_err = worst;
      report.worst_param = name;
    }
  }
  return report;
}

}  // namespace ncdssm
