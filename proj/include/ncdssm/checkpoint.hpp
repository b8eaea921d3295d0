#pragma once

#include "ncdssm/params.hpp"

#include <json.hpp>

#include <string>

namespace ncdssm::ckpt {

/// Container layout: a little-endian uint64 header length, a JSON index
/// (format version, step, RNG state, config snapshot, tensor table with
/// offsets), then the contiguous float64 payload. Column-major entries.
struct Checkpoint {
  int format_version = 1;
  long step = 0;
  std::string rng_state;
  nlohmann::ordered_json config;
  // Tensor table in insertion order; values plus optimizer slots.
  std::vector<std::pair<std::string, Mat>> tensors;
};

void save(const Checkpoint& c, const std::string& path);
Checkpoint load(const std::string& path);

/// Packs parameter values and Adam slots of a store.
Checkpoint from_store(const ParamStore& params, long step, const std::string& rng_state,
                      nlohmann::ordered_json config);

/// Restores values and Adam slots into an already-constructed store with the
/// same parameter set (shapes must match).
void into_store(const Checkpoint& c, ParamStore& params);

}  // namespace ncdssm::ckpt
