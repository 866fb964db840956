#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "pudet/errors.hpp"

namespace pudet {

/// Unknown keys are configuration errors; silent protocol drift is worse.
inline void require_keys_subset(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                                const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(context + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& context) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(context + "." + key + ": " + e.what());
  }
}

}  // namespace pudet
