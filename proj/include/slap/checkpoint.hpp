#pragma once

#include <string>

#include "slap/config.hpp"
#include "slap/trainer.hpp"

namespace slap::io {

// Binary "SLAP" container: header (magic, version, config digest, step,
// embedded model-config JSON), named f32 tensor table, CRC32 trailer.
// Tensor prefixes: param/ teacher/ opt_m/ opt_v/ state/.
void save_checkpoint(const train::TrainState& state, const std::string& path);

// Verifies integrity and version; if `expect` is given, its digest must match
// the stored one. Rebuilds the full training state.
train::TrainState load_checkpoint(const std::string& path, const ModelConfig* expect = nullptr);

} // namespace slap::io
