#include "conlab/manifest.hpp"

#include <fstream>

using nlohmann::json;

namespace conlab::manifest {

void write_manifest(const std::string& path, const RunManifest& m) {
    json j;
    j["command"] = m.command;
    j["config_snapshot"] = m.config_snapshot;
    j["seeds"] = m.seeds;
    j["artifact_paths"] = m.artifact_paths;
    j["tool_version"] = m.tool_version;
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

RunManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open manifest: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(path + ": bad JSON: " + e.what());
    }
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_snapshot = j.at("config_snapshot");
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.artifact_paths = j.at("artifact_paths").get<std::vector<std::string>>();
    m.tool_version = j.at("tool_version").get<std::string>();
    return m;
}

}  // namespace conlab::manifest
