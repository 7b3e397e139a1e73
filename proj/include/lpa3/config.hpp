#pragma once

// Run configuration: INI-style "[section]" headers with "key = value" lines.
// Unknown sections or keys are errors.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "lpa3/data.hpp"
#include "lpa3/trainer.hpp"

namespace lpa3 {

struct RunConfig {
    std::uint64_t seed = 0;  // training seed; the split seed is data.split_seed
    std::filesystem::path out = "runs/default";
    TrainConfig train;
    DatasetSource data;
};

struct ConfigField {
    std::string key;  // "section.name"
    std::string help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::vector<ConfigField>& config_fields();

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Throws ConfigError for an unknown key or a malformed value.
void set_config_value(RunConfig& cfg, std::string_view key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

// Applies the file on top of `cfg`. `origin` prefixes error messages.
void apply_config(RunConfig& cfg, std::istream& is, const std::string& origin = "<config>");
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
// "section.key=value"
void apply_assignment(RunConfig& cfg, const std::string& assignment);

// Every key, grouped by section; parsing the text reproduces the config.
std::string dump_config(const RunConfig& cfg);

}  // namespace lpa3
