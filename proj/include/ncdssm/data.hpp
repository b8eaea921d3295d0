#pragma once

#include "ncdssm/common.hpp"
#include "ncdssm/rng.hpp"

#include <string>
#include <vector>

namespace ncdssm::data {

/// Timestamped vector series with whole-timestep missingness.
struct IrregularSeries {
  std::vector<double> times;
  std::vector<Vec> values;
  std::vector<char> observed;

  int dim() const { return values.empty() ? 0 : static_cast<int>(values.front().size()); }
  std::size_t size() const { return times.size(); }

  void push(double t, Vec v, bool obs = true) {
    times.push_back(t);
    values.push_back(std::move(v));
    observed.push_back(obs ? 1 : 0);
  }

  /// Only the observed rows.
  IrregularSeries observed_view() const;
  /// Rows with t <= t_max.
  IrregularSeries head(double t_max) const;
  /// Rows with t > t_min.
  IrregularSeries tail(double t_min) const;

  void validate() const;
};

struct GeneratorConfig {
  std::string dataset = "damped-pendulum";  // bouncing-ball | damped-pendulum | scalar-lgssm
  int n_sequences = 100;
  double length = 10.0;  // seconds
  double dt = 0.1;
  double noise_std = 0.05;
  double missing_fraction = 0.0;
  std::uint64_t seed = 0;
  // scalar-lgssm ground truth
  double lgssm_f = -0.5;
  double lgssm_q = 0.2;
  double lgssm_r = 0.1;
};

/// Ball on a line between elastic walls at +-1; Euler dynamics, reflected
/// positions, observation = position + noise.
std::vector<IrregularSeries> gen_bouncing_ball(const GeneratorConfig& cfg);

/// Damped pendulum integrated with RK4; observation = bob coordinates
/// (sin theta, -cos theta) + noise.
std::vector<IrregularSeries> gen_damped_pendulum(const GeneratorConfig& cfg);

/// Scalar linear-Gaussian SSM with exact discretization; observation =
/// state + N(0, lgssm_r).
std::vector<IrregularSeries> gen_scalar_lgssm(const GeneratorConfig& cfg);

/// Dispatch on cfg.dataset. Missingness is NOT applied here.
std::vector<IrregularSeries> generate(const GeneratorConfig& cfg);

/// Drops each non-initial timestep independently with probability p; the
/// first timestep is always kept. Deterministic in the seed.
void apply_missingness(std::vector<IrregularSeries>& seqs, double p, std::uint64_t seed);

/// One row per observed timestep, header "t,y1,...,yd". Missing timesteps are
/// simply absent from the file.
void write_csv(const IrregularSeries& series, const std::string& path);

/// Accepts rows whose value cells are all empty as explicitly-missing
/// timesteps. Rejects non-increasing times, ragged rows and unparseable
/// cells, reporting the line number.
IrregularSeries read_csv(const std::string& path);

/// Mean squared error of prediction rows against truth rows matched by
/// timestamp (tolerance 1e-9). A prediction time absent from the truth is a
/// misalignment error.
double mse_against(const IrregularSeries& pred, const IrregularSeries& truth);

}  // namespace ncdssm::data
