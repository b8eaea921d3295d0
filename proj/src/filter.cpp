#include "ncdssm/filter.hpp"

#include <algorithm>
#include <cmath>

namespace ncdssm::filt {

integrate::PredictOutput SsmView::predict(Binding& b, const Belief& belief, double t0,
                                          double t1) const {
  if (analytic_lti) {
    const auto* lti = dynamic_cast<const dyn::LtiDynamics*>(dynamics);
    if (lti == nullptr)
      throw std::invalid_argument("analytic predict requires LTI dynamics");
    auto out = integrate::analytic_predict_lti(*lti, *diffusion, b, belief, t1 - t0);
    out.node_times = {t0, t1};
    return out;
  }
  const auto grid = integrate::make_subgrid(t0, t1, eta);
  return integrate::predict_moments(*dynamics, *diffusion, b, belief, grid, solver);
}

UpdateResult update(ad::Tape& t, ad::Var obs, const Belief& prior, ad::Var H, ad::Var r_sqrt) {
  const int h = H.rows;
  const int m = H.cols;
  if (obs.rows != h || obs.cols != 1 || prior.mean.rows != m)
    throw std::invalid_argument("update: shape mismatch");

  ad::Var hp = t.matmul(H, prior.factor);
  ad::Var top = t.concat_cols(r_sqrt, hp);
  ad::Var bottom = t.concat_cols(t.constant(Mat::Zero(m, h)), prior.factor);
  ad::Var block = t.concat_rows(top, bottom);
  ad::Var w = t.transpose(t.qr_r_factor(t.transpose(block)));

  ad::Var x = t.slice(w, 0, 0, h, h);
  const auto xv = t.value(x);
  for (int i = 0; i < h; ++i)
    if (xv(i, i) < 1e-12) throw SingularInnovation("update: singular innovation factor");
  ad::Var y = t.slice(w, h, 0, m, h);
  ad::Var z = t.slice(w, h, h, m, m);

  ad::Var ahat = t.matmul(H, prior.mean);
  ad::Var resid = t.sub(obs, ahat);
  ad::Var mean = t.add(prior.mean, t.matmul(y, t.tri_solve(x, resid)));
  ad::Var ll = t.gaussian_logpdf(obs, ahat, x);
  return {Belief{mean, z}, ahat, x, ll};
}

ad::Var kalman_gain(ad::Tape& t, const Belief& prior, ad::Var H, ad::Var r_sqrt) {
  const int h = H.rows;
  const int m = H.cols;
  ad::Var hp = t.matmul(H, prior.factor);
  ad::Var top = t.concat_cols(r_sqrt, hp);
  ad::Var bottom = t.concat_cols(t.constant(Mat::Zero(m, h)), prior.factor);
  ad::Var w = t.transpose(t.qr_r_factor(t.transpose(t.concat_rows(top, bottom))));
  ad::Var x = t.slice(w, 0, 0, h, h);
  ad::Var y = t.slice(w, h, 0, m, h);
  // K = Y X^{-1}  <=>  K^T = X^{-T} Y^T
  return t.transpose(t.tri_solve(x, t.transpose(y), true));
}

FilterResult filter(const SsmView& ssm, Binding& b, const std::vector<double>& times,
                    const std::vector<ad::Var>& aux, const std::vector<double>& query_times) {
  if (times.empty()) throw std::invalid_argument("filter: empty time list");
  if (times.size() != aux.size())
    throw std::invalid_argument("filter: times and observations differ in length");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw std::invalid_argument("filter: times must be strictly increasing");

  struct Slot {
    double time;
    int obs_index;  // -1 for query-only slots
  };
  std::vector<Slot> slots;
  slots.reserve(times.size() + query_times.size());
  for (std::size_t i = 0; i < times.size(); ++i)
    slots.push_back({times[i], static_cast<int>(i)});
  for (double q : query_times) {
    if (q < times.front() - 1e-12 || q > times.back() + 1e-12)
      throw std::invalid_argument("filter: query time outside the observed span");
    const bool coincides =
        std::any_of(times.begin(), times.end(), [&](double t0) { return std::abs(t0 - q) <= 1e-12; });
    if (!coincides) slots.push_back({q, -1});
  }
  std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& c) { return a.time < c.time; });

  ad::Tape& t = *b.tape;
  FilterResult result;
  Belief prior{ssm.mu0, ssm.sigma0_sqrt};
  std::optional<integrate::PredictOutput> arrival;

  for (std::size_t k = 0; k < slots.size(); ++k) {
    FilterStep step;
    step.time = slots[k].time;
    step.obs_index = slots[k].obs_index;
    step.observed = step.obs_index >= 0;
    step.predicted = prior;
    step.arrival = arrival;

    if (step.observed) {
      UpdateResult up;
      try {
        up = update(t, aux[step.obs_index], prior, ssm.H, ssm.r_sqrt);
      } catch (const SingularInnovation& e) {
        throw SingularInnovation(std::string(e.what()) + " at timestep " +
                                 std::to_string(step.obs_index));
      }
      step.filtered = up.posterior;
      step.predicted_obs = up.predicted_obs;
      step.innovation_sqrt = up.innovation_sqrt;
      step.loglik = up.loglik;
      result.loglik =
          result.observed_count == 0 ? up.loglik : t.add(result.loglik, up.loglik);
      ++result.observed_count;
    } else {
      step.filtered = prior;
    }

    if (k + 1 < slots.size()) {
      auto out = ssm.predict(b, step.filtered, step.time, slots[k + 1].time);
      prior = out.predicted;
      arrival = std::move(out);
    }
    result.steps.push_back(std::move(step));
  }
  return result;
}

}  // namespace ncdssm::filt
