#pragma once

#include "ncdssm/filter.hpp"

namespace ncdssm::smoothing {

using integrate::Belief;

struct SmoothedStep {
  double time = 0.0;
  bool observed = false;
  Belief smoothed;
};

struct SmoothResult {
  std::vector<SmoothedStep> steps;

  /// Smoothed belief at a time that was cached during filtering.
  const SmoothedStep& at(double time) const;
};

/// One backward leg from the smoothed belief at t_k to t_{k-1}. The filtered
/// trajectory inside the interval is recovered by replaying the forward
/// prediction from the filtered belief at t_{k-1} on a half-step grid, which
/// provides the midpoint values the backward integrator needs.
Belief smooth_step(const filt::SsmView& ssm, Binding& b, const Belief& smoothed_at_end,
                   const Belief& filtered_at_start, double t_start, double t_end);

/// Backward recursion over every step cached by the filter (observed and
/// query alike). The final step's smoothed belief is the filtered one.
SmoothResult smooth(const filt::SsmView& ssm, Binding& b, const filt::FilterResult& fr);

}  // namespace ncdssm::smoothing
