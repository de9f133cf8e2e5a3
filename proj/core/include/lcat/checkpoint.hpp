#pragma once

#include <cstdint>
#include <string>

#include "lcat/params.hpp"
#include "lcat/rng.hpp"

namespace lcat {

// Checkpoint file: one UTF-8 JSON header line (param names, shapes, config
// echo, epoch, rng state) terminated by '\n', followed by each tensor's raw
// little-endian float32 payload concatenated in header order.
struct CheckpointMeta {
  int epoch = 0;
  std::string rng_state_hex;   // training rng state at save time
  std::string config_json;     // effective run configuration (JSON text)
};

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const CheckpointMeta& meta);

struct Checkpoint {
  ModelParams params;
  CheckpointMeta meta;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace lcat
