#pragma once

// Checkpoint directory: manifest.json (config, counters, tensor index) and
// tensors.bin (raw little-endian float64, parameters then Adam moments).

#include <filesystem>

#include "optolab/config_json.hpp"
#include "optolab/rng.hpp"
#include "optolab/transformer.hpp"

namespace optolab {

constexpr int kCheckpointSchema = 1;

struct Checkpoint {
    Json experiment;           // resolved experiment config, stored verbatim
    std::string config_hash;
    std::uint64_t step = 0;
    ModelParams params;
    AdamState adam;
    CounterRng data_rng;
    Json run_state = Json::object();  // driver bookkeeping carried across a resume
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes into a temporary sibling and renames, so a crash never leaves a half-written checkpoint.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
/// Parameters only; Adam moments are skipped.
ModelParams load_params(const std::filesystem::path& dir);

}  // namespace optolab
