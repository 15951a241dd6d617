#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ffx/model.hpp"

namespace ffx {

// Flat view of a sectioned key-value file: "[moe]\nN_E = 16" becomes
// {"moe.N_E": "16"}. Keys are case-sensitive.
using KeyValues = std::map<std::string, std::string>;

// Accepts "[section]" headers, "key = value" lines, blank lines and comments
// starting with '#' or ';'. Throws ConfigError naming the line on malformed
// input or a repeated key.
KeyValues parse_ini(std::string_view text);
// Sections are written in the order model, ff, moe, train, data, run, then
// any others alphabetically.
std::string format_ini(const KeyValues& values);

// Shortest text that parses back to the same value.
std::string format_real(double v);
double parse_real(const std::string& key, const std::string& text);
std::size_t parse_count(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);

// One named, documented setting of a config struct.
template <class T>
struct Field {
  std::string key;  // "section.name"
  std::string help;
  std::function<std::string(const T&)> get;
  std::function<void(T&, const std::string&)> set;
};

// Settings of the [model], [ff] and [moe] sections.
const std::vector<Field<ModelConfig>>& model_fields();

std::string model_config_to_text(const ModelConfig& cfg);
// Unknown keys or values that fail to parse throw ConfigError.
ModelConfig model_config_from_text(std::string_view text);

}  // namespace ffx
