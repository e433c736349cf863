#pragma once

#include <string>

#include "pcmoe/trainer.hpp"

namespace pcmoe {

/// Stable, key-ordered JSON for configs; identical configs dump identically.
std::string dump_train_config(const TrainConfig& config, int indent = -1);
TrainConfig parse_train_config(const std::string& json);

}  // namespace pcmoe
