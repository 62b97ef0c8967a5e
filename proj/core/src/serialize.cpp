#include "resprobe/serialize.hpp"

#include <algorithm>
#include <stdexcept>

namespace resprobe::nn {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                         const std::string& context) {
  if (!j.is_object()) throw std::invalid_argument(context + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw std::invalid_argument(context + ": unknown key '" + it.key() + "'");
    }
  }
}

json to_json(const ArchitectureConfig& c) {
  json stages = json::array();
  for (const auto& st : c.stages) stages.push_back({{"blocks", st.num_blocks}, {"channels", st.channels}});
  return json{{"family", family_name(c.family)},
              {"stages", stages},
              {"stem_channels", c.stem_channels},
              {"input", {c.input_shape[0], c.input_shape[1], c.input_shape[2]}},
              {"num_classes", c.num_classes},
              {"shortcut", shortcut_name(c.shortcut)}};
}

ArchitectureConfig architecture_from_json(const json& j) {
  reject_unknown_keys(j, {"family", "stages", "stem_channels", "input", "num_classes", "shortcut"},
                      "architecture");
  ArchitectureConfig c;
  c.family = family_from_name(j.at("family").get<std::string>());
  for (const auto& st : j.at("stages")) {
    reject_unknown_keys(st, {"blocks", "channels"}, "architecture.stages");
    c.stages.push_back({st.at("blocks").get<int>(), st.at("channels").get<int>()});
  }
  c.stem_channels = j.at("stem_channels").get<int>();
  auto in = j.at("input");
  if (!in.is_array() || in.size() != 3)
    throw std::invalid_argument("architecture.input must be [C, H, W]");
  c.input_shape = {in[0].get<int64_t>(), in[1].get<int64_t>(), in[2].get<int64_t>()};
  c.num_classes = j.at("num_classes").get<int>();
  c.shortcut = shortcut_from_name(j.at("shortcut").get<std::string>());
  c.validate();
  return c;
}

json to_json(const SharingSpec& s) {
  return json{{"share_from_block", s.share_from_block},
              {"bn_mode", bn_mode_name(s.bn_mode)},
              {"gamma_init_shared", s.gamma_init_shared}};
}

SharingSpec sharing_from_json(const json& j) {
  reject_unknown_keys(j, {"share_from_block", "bn_mode", "gamma_init_shared"}, "sharing");
  SharingSpec s;
  s.share_from_block = j.at("share_from_block").get<int>();
  s.bn_mode = bn_mode_from_name(j.at("bn_mode").get<std::string>());
  if (j.contains("gamma_init_shared")) s.gamma_init_shared = j.at("gamma_init_shared").get<double>();
  s.validate();
  return s;
}

}  // namespace resprobe::nn
