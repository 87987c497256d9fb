#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vlaquant/tensor.hpp"

namespace vlaq {

enum class Modality { vision, language, other };
enum class Role { encoder, projector, core, action_head };

const char* to_string(Modality m);
const char* to_string(Role r);
Modality parse_modality(const std::string& s);
Role parse_role(const std::string& s);

struct LayerInfo {
  std::string name;
  Shape shape;  // [out_features, in_features] for linear layers

  std::uint64_t params() const;
};

struct ModuleInfo {
  std::string name;
  Modality modality = Modality::other;
  Role role = Role::core;
  std::vector<LayerInfo> layers;

  std::uint64_t params() const;
};

/// Names the pipeline's modules and the layers each one owns.
struct ModuleManifest {
  std::vector<ModuleInfo> modules;

  // Unique module and layer names; at most one projector. Throws ManifestError.
  void validate() const;

  const ModuleInfo& module(const std::string& name) const;
  const ModuleInfo* find_module(const std::string& name) const;
  // Module owning `layer`, or nullptr.
  const ModuleInfo* module_of(const std::string& layer) const;
  const LayerInfo* find_layer(const std::string& layer) const;

  std::vector<const LayerInfo*> all_layers() const;
  std::uint64_t total_params() const;
};

// Accounting-only manifest sized like a 7B-language VLA (language 7.0e9,
// vision 0.60e9, projector 0.03e9, action head 0.005e9 parameters).
ModuleManifest openvla_reference_manifest();

}  // namespace vlaq
