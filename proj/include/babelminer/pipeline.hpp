#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace babelminer::pipeline {

// Effective pipeline configuration: library defaults merged with a config
// file and then with individual key overrides (overrides win). Stored as a
// structured tree so every stage reads the same validated source of truth.
struct PipelineConfig {
    nlohmann::json values;

    static PipelineConfig defaults();
    static PipelineConfig from_file(const std::string& path);

    // Override one key by dotted path, e.g. "mining.min_rho" = "0.2".
    // The value is parsed as a JSON scalar when possible, else kept a string.
    void set_option(const std::string& dotted_key, const std::string& value);

    // Checks every parameter against the preconditions of its owning module.
    void validate() const;

    std::string dump() const;
};

const std::vector<std::string>& subcommands();

// Runs one subcommand. Artifacts land under the configured output directory
// together with an effective-config echo and a checksum manifest. Throws on
// failure; a normal return means exit status 0.
void run(const std::string& subcommand, const PipelineConfig& config);

}  // namespace babelminer::pipeline
