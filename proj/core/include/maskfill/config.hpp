#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace maskfill {

/// Run configuration: one flat JSON object whose keys are `section.field`
/// (e.g. "mlm_train.lr") plus optional top-level "seed" and "scale".
/// Nested objects are rejected; arrays are allowed as values.
nlohmann::json load_flat_config(const std::filesystem::path& path);
void check_flat_config(const nlohmann::json& flat);

/// Fields of one section with the prefix stripped.
nlohmann::json config_section(const nlohmann::json& flat, std::string_view section);

/// `base` overlaid with the section's fields.
template <typename T>
T configured(const nlohmann::json& flat, std::string_view section, const T& base) {
  nlohmann::json j = base;
  j.update(config_section(flat, section));
  return j.get<T>();
}

}  // namespace maskfill
