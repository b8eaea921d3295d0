#pragma once

#include "ncdssm/common.hpp"
#include "ncdssm/tape.hpp"

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace ncdssm {

enum class ParamGroup { Ssm, Recognition, Emission, Buffer };

struct Param {
  Mat value;
  ParamGroup group = ParamGroup::Ssm;
  bool trainable = true;
  // Adam slots; step counts per parameter so a freeze window behaves like a
  // fresh optimizer when it ends.
  Mat adam_m;
  Mat adam_v;
  long adam_steps = 0;
};

/// Named parameter tensors in a stable (insertion) order. The order defines
/// gradient reduction order and checkpoint layout.
class ParamStore {
public:
  Param& add(const std::string& name, const Mat& init, ParamGroup group = ParamGroup::Ssm,
             bool trainable = true);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  /// Sum of squared entries over trainable parameters of a gradient map.
  static double grad_norm(const std::unordered_map<std::string, Mat>& grads);

private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Param> storage_;
};

/// Per-tape view of a ParamStore: trainable parameters become leaves,
/// buffers become constants. Also memoizes derived expressions (e.g. a
/// spectrally normalized weight) so each is recorded once per tape.
struct Binding {
  ad::Tape* tape = nullptr;
  std::unordered_map<std::string, ad::Var> vars;
  std::unordered_map<std::string, ad::Var> memo;

  ad::Var operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::invalid_argument("binding: unknown parameter " + name);
    return it->second;
  }
};

Binding bind(const ParamStore& params, ad::Tape& tape);

/// Gradients of a scalar root with respect to every trainable parameter,
/// keyed by name. Call after tape.backward(root).
std::unordered_map<std::string, Mat> collect_gradients(const ParamStore& params,
                                                       const Binding& binding);

struct GradCheckEntry {
  std::string name;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::vector<GradCheckEntry> entries;
};

/// Central finite differences against the tape's reverse sweep. The builder
/// must be a deterministic function of the parameter values (freeze any noise
/// outside). h must lie in [1e-7, 1e-3].
GradCheckReport grad_check(ParamStore& params,
                           const std::function<ad::Var(ad::Tape&, Binding&)>& build,
                           double h = 1e-5);

}  // namespace ncdssm
