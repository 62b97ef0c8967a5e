#pragma once

#include <json.hpp>

#include "resprobe/nn.hpp"

namespace resprobe::nn {

// Strict JSON conversions for the architecture and sharing configs.
// from-json rejects unknown keys so misspelled settings fail closed.

nlohmann::json to_json(const ArchitectureConfig& c);
ArchitectureConfig architecture_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SharingSpec& s);
SharingSpec sharing_from_json(const nlohmann::json& j);

/// Throws when j holds keys outside `allowed`, naming the offender.
void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                         const std::string& context);

}  // namespace resprobe::nn
