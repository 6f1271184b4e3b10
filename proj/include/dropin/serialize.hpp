// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include "dropin/growth.hpp"
#include "dropin/layers.hpp"

namespace dropin {

using Json = nlohmann::json;

/// Full architecture including every segment split and LoRA adapter, so an
/// expanded model can be rebuilt exactly.
Json model_to_json(const ModelGraph& model);
ModelGraph model_from_json(const Json& j);

Json ledger_to_json(const NeuronLedger& ledger);
NeuronLedger ledger_from_json(const Json& j);

std::string to_string(ScaleMode mode);
ScaleMode scale_mode_from_string(const std::string& s);
std::string to_string(Activation act);
Activation activation_from_string(const std::string& s);

}  // namespace dropin
