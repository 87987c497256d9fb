#include "vlaquant/manifest.hpp"

#include <set>

#include "vlaquant/error.hpp"

namespace vlaq {

const char* to_string(Modality m) {
  switch (m) {
    case Modality::vision: return "vision";
    case Modality::language: return "language";
    case Modality::other: return "other";
  }
  return "?";
}

const char* to_string(Role r) {
  switch (r) {
    case Role::encoder: return "encoder";
    case Role::projector: return "projector";
    case Role::core: return "core";
    case Role::action_head: return "action_head";
  }
  return "?";
}

Modality parse_modality(const std::string& s) {
  if (s == "vision") return Modality::vision;
  if (s == "language") return Modality::language;
  if (s == "other") return Modality::other;
  throw ManifestError("unknown modality '" + s + "'");
}

Role parse_role(const std::string& s) {
  if (s == "encoder") return Role::encoder;
  if (s == "projector") return Role::projector;
  if (s == "core") return Role::core;
  if (s == "action_head") return Role::action_head;
  throw ManifestError("unknown role '" + s + "'");
}

std::uint64_t LayerInfo::params() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::uint64_t ModuleInfo::params() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.params();
  return n;
}

void ModuleManifest::validate() const {
  std::set<std::string> module_names, layer_names;
  int projectors = 0;
  for (const auto& m : modules) {
    if (m.name.empty()) throw ManifestError("manifest: module with empty name");
    if (!module_names.insert(m.name).second) throw ManifestError("manifest: duplicate module '" + m.name + "'");
    if (m.role == Role::projector) ++projectors;
    for (const auto& l : m.layers) {
      if (l.name.empty()) throw ManifestError("manifest: module '" + m.name + "' has a layer with empty name");
      if (!layer_names.insert(l.name).second) throw ManifestError("manifest: layer '" + l.name + "' appears twice");
      if (l.shape.empty()) throw ManifestError("manifest: layer '" + l.name + "' has no shape");
      for (auto d : l.shape) {
        if (d == 0) throw ManifestError("manifest: layer '" + l.name + "' has a zero dimension");
      }
    }
  }
  if (projectors > 1) throw ManifestError("manifest: more than one projector module");
}

const ModuleInfo* ModuleManifest::find_module(const std::string& name) const {
  for (const auto& m : modules) {
    if (m.name == name) return &m;
  }
  return nullptr;
}

const ModuleInfo& ModuleManifest::module(const std::string& name) const {
  if (const auto* m = find_module(name)) return *m;
  throw ManifestError("manifest: no module named '" + name + "'");
}

const ModuleInfo* ModuleManifest::module_of(const std::string& layer) const {
  for (const auto& m : modules) {
    for (const auto& l : m.layers) {
      if (l.name == layer) return &m;
    }
  }
  return nullptr;
}

const LayerInfo* ModuleManifest::find_layer(const std::string& layer) const {
  for (const auto& m : modules) {
    for (const auto& l : m.layers) {
      if (l.name == layer) return &l;
    }
  }
  return nullptr;
}

std::vector<const LayerInfo*> ModuleManifest::all_layers() const {
  std::vector<const LayerInfo*> out;
  for (const auto& m : modules)
    for (const auto& l : m.layers) out.push_back(&l);
  return out;
}

std::uint64_t ModuleManifest::total_params() const {
  std::uint64_t n = 0;
  for (const auto& m : modules) n += m.params();
  return n;
}

ModuleManifest openvla_reference_manifest() {
  // One pseudo-layer per module; 100000-wide rows keep every count integral.
  constexpr std::size_t kWidth = 100000;
  ModuleManifest m;
  m.modules.push_back({"vision", Modality::vision, Role::encoder, {{"vision.all", {6000, kWidth}}}});
  m.modules.push_back({"projector", Modality::vision, Role::projector, {{"projector.all", {300, kWidth}}}});
  m.modules.push_back({"language", Modality::language, Role::core, {{"language.all", {70000, kWidth}}}});
  m.modules.push_back({"action_head", Modality::language, Role::action_head, {{"action_head.all", {50, kWidth}}}});
  return m;
}

}  // namespace vlaq
