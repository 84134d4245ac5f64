#pragma once
// Provenance sidecar for CLI artifacts. Every output file gets a sibling
// <output>.manifest.json recording the command, its full argument vector,
// the seed, and content fingerprints of all inputs. No timestamps: reruns
// of the same command on the same inputs produce byte-identical manifests.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "spikelab/ioutil.hpp"

namespace spikelab {

inline constexpr const char* kToolVersion = "spikelab 0.1.0";

struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    uint64_t seed = 0;
    std::map<std::string, std::string> inputs;  // path -> content fingerprint
    std::vector<std::string> outputs;
    std::string tool_version = kToolVersion;

    void add_input(const std::string& path) { inputs[path] = fingerprint_file(path); }
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
    return nlohmann::json{{"command", m.command}, {"argv", m.argv},       {"seed", m.seed},
                          {"inputs", m.inputs},   {"outputs", m.outputs}, {"tool_version", m.tool_version}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<uint64_t>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.tool_version = j.at("tool_version").get<std::string>();
    return m;
}

// One sidecar per declared output.
inline void write_manifests(const RunManifest& m) {
    const std::string text = manifest_to_json(m).dump(2) + "\n";
    for (const std::string& out : m.outputs) write_file_text(out + ".manifest.json", text);
}

}  // namespace spikelab
