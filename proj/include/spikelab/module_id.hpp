#pragma once
// Identity of a quantizable linear group. Sibling projections sharing one
// input tap share one id: q/k/v are "qkv", gate/up are "gate_up".

#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace spikelab {

enum class ModuleKind : int32_t { qkv = 0, out = 1, gate_up = 2, down = 3 };
inline constexpr int32_t kModuleKindsPerLayer = 4;

struct ModuleId {
    int32_t layer = 0;
    ModuleKind kind = ModuleKind::qkv;

    auto operator<=>(const ModuleId&) const = default;
};

inline const char* module_kind_name(ModuleKind k) {
    switch (k) {
        case ModuleKind::qkv: return "qkv";
        case ModuleKind::out: return "out";
        case ModuleKind::gate_up: return "gate_up";
        case ModuleKind::down: return "down";
    }
    throw std::invalid_argument("module_kind_name: bad kind");
}

inline ModuleKind parse_module_kind(const std::string& name) {
    if (name == "qkv") return ModuleKind::qkv;
    if (name == "out") return ModuleKind::out;
    if (name == "gate_up") return ModuleKind::gate_up;
    if (name == "down") return ModuleKind::down;
    throw std::invalid_argument("parse_module_kind: unknown kind '" + name + "'");
}

inline std::string module_id_name(const ModuleId& id) {
    return std::to_string(id.layer) + ":" + module_kind_name(id.kind);
}

// Canonical dense index: layer-major, kind order qkv, out, gate_up, down.
inline int64_t module_index(const ModuleId& id) {
    return static_cast<int64_t>(id.layer) * kModuleKindsPerLayer + static_cast<int32_t>(id.kind);
}

}  // namespace spikelab
