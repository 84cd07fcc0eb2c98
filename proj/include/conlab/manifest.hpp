#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "conlab/common.hpp"

namespace conlab::manifest {

// One per CLI run; replaying the recorded command with the recorded config
// snapshot reproduces the artifacts byte-for-byte (no timestamps in here).
struct RunManifest {
    std::string command;
    nlohmann::json config_snapshot;  // effective configuration after precedence
    std::map<std::string, std::uint64_t> seeds;
    std::vector<std::string> artifact_paths;
    std::string tool_version = kToolVersion;
};

void write_manifest(const std::string& path, const RunManifest& m);
RunManifest read_manifest(const std::string& path);

}  // namespace conlab::manifest
