// SPDX-License-Identifier: Apache-2.0
//
// Model / policy checkpoints on top of the tensor container. Geometry rides
// along in a small "__meta" tensor so a checkpoint is self-describing.

#pragma once

#include <string>

#include "lkv/model.hpp"
#include "lkv/policy.hpp"

namespace lkv {

void save_model(const std::string& path, const ModelWeights& weights);
ModelWeights load_model(const std::string& path);

void save_lkv_params(const std::string& path, const LkvParams& params);
LkvParams load_lkv_params(const std::string& path);

}  // namespace lkv
