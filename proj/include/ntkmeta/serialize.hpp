#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "ntkmeta/linalg.hpp"
#include "ntkmeta/network.hpp"
#include "ntkmeta/tasks.hpp"

namespace ntkmeta {

/// Doubles are written in shortest round-trip form, so every value reads
/// back bit-identical.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j, const std::string& field);

nlohmann::json task_to_json(const Task& task);
Task task_from_json(const nlohmann::json& j);

struct Checkpoint {
  static constexpr int kFormatVersion = 1;
  std::string network;  // NetworkSpec::describe()
  std::string config_hash;
  std::int64_t iteration = 0;
  ParamVector theta;
  nlohmann::json optimizer = nlohmann::json::object();
};

nlohmann::json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

/// Atomic write (temp file + rename) of the pretty-printed document.
void save_json(const std::string& path, const nlohmann::json& j);
nlohmann::json load_json(const std::string& path);

}  // namespace ntkmeta
