#include "maskfill/config.hpp"

#include <fstream>

#include "maskfill/errors.hpp"

namespace maskfill {

using nlohmann::json;

void check_flat_config(const json& flat) {
  if (!flat.is_object()) throw FormatError("config must be a JSON object");
  for (const auto& [key, value] : flat.items()) {
    if (value.is_object()) throw FormatError("config key '" + key + "' holds an object; use dotted keys instead");
  }
}

json load_flat_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  check_flat_config(j);
  return j;
}

json config_section(const json& flat, std::string_view section) {
  json out = json::object();
  const std::string prefix = std::string(section) + ".";
  for (const auto& [key, value] : flat.items()) {
    if (key.size() > prefix.size() && key.compare(0, prefix.size(), prefix) == 0) out[key.substr(prefix.size())] = value;
  }
  return out;
}

}  // namespace maskfill
