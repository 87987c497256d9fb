#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "vlaquant/manifest.hpp"
#include "vlaquant/planner.hpp"
#include "vlaquant/quant.hpp"
#include "vlaquant/sensitivity.hpp"
#include "vlaquant/toy_vla.hpp"

// JSON forms of every file the CLI reads or writes. Readers reject unknown
// and missing fields with FormatError.
namespace vlaq::json_io {

using nlohmann::json;

json to_json(const QuantScheme& s);
QuantScheme scheme_from_json(const json& j);

json to_json(const ModuleManifest& m);
ModuleManifest manifest_from_json(const json& j);

json to_json(const PrecisionPlan& p);
PrecisionPlan plan_from_json(const json& j);

// { "<module>": {"method": ..., "scheme": {...} | null}, ... }
PlanOverrides overrides_from_json(const json& j);

json to_json(const SensitivityReport& r);
SensitivityReport sensitivity_from_json(const json& j);

json to_json(const ToyModelSpec& s);
// Fields missing from `j` keep their defaults; unknown fields are rejected.
ToyModelSpec spec_from_json(const json& j);

json to_json(const EvalReport& r);
json to_json(const QuantReport& r);
json to_json(const ProjectorComparison& c);

json read_file(const std::filesystem::path& path);
void write_file(const json& j, const std::filesystem::path& path);

}  // namespace vlaq::json_io
