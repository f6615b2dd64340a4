#pragma once

// JSON persistence for a trained metric/controller pair.

#include <string>

#include <json.hpp>

#include "contraction_kit/netmetric.hpp"

namespace ckit {

inline constexpr const char* kCheckpointVersion = "contraction-kit/ckpt-v1";

struct Checkpoint {
  std::string system;
  double alpha = 0.5;
  MetricNet metric;
  ControllerNet controller;
  nlohmann::json config = nlohmann::json::object();
};

nlohmann::json mlp_to_json(const Mlp& net);
Mlp mlp_from_json(const nlohmann::json& j);

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
/// Throws std::runtime_error on a version mismatch or malformed document.
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Writes `j` with two-space indentation and a trailing newline.
void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

}  // namespace ckit
