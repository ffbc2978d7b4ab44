#include "ntkmeta/serialize.hpp"

#include <fstream>
#include <sstream>

#include "ntkmeta/csv.hpp"
#include "ntkmeta/error.hpp"

namespace ntkmeta {

using nlohmann::json;

namespace {

template <class T>
T get_field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw Error(ErrorCode::io, "missing field", where.empty() ? key : where + "." + key);
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::io, e.what(), where.empty() ? key : where + "." + key);
  }
}

json dataset_to_json(const Dataset& d) {
  return {{"x", matrix_to_json(d.x)}, {"y", matrix_to_json(d.y)}};
}

Dataset dataset_from_json(const json& j, const std::string& field) {
  if (!j.is_object()) throw Error(ErrorCode::io, "expected an object", field);
  return Dataset{matrix_from_json(j.value("x", json()), field + ".x"),
                 matrix_from_json(j.value("y", json()), field + ".y")};
}

}  // namespace

json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

Matrix matrix_from_json(const json& j, const std::string& field) {
  const auto rows = get_field<std::size_t>(j, "rows", field);
  const auto cols = get_field<std::size_t>(j, "cols", field);
  auto data = get_field<std::vector<double>>(j, "data", field);
  if (data.size() != rows * cols) {
    throw Error(ErrorCode::io, "data length does not match rows × cols", field + ".data");
  }
  return Matrix(rows, cols, std::move(data));
}

json task_to_json(const Task& task) {
  json j;
  j["support"] = dataset_to_json(task.support);
  j["query"] = dataset_to_json(task.query);
  j["support_labels"] = task.support_labels;
  j["query_labels"] = task.query_labels;
  j["num_classes"] = task.num_classes;
  j["meta"] = {{"kind", std::string(to_string(task.meta.kind))},
               {"amplitude", task.meta.amplitude},
               {"phase", task.meta.phase},
               {"centers", matrix_to_json(task.meta.centers)}};
  return j;
}

Task task_from_json(const json& j) {
  Task t;
  t.support = dataset_from_json(j.value("support", json()), "support");
  t.query = dataset_from_json(j.value("query", json()), "query");
  t.support_labels = get_field<std::vector<int>>(j, "support_labels", "");
  t.query_labels = get_field<std::vector<int>>(j, "query_labels", "");
  t.num_classes = get_field<std::size_t>(j, "num_classes", "");
  const json& m = j.value("meta", json::object());
  t.meta.kind = task_kind_from_string(get_field<std::string>(m, "kind", "meta"));
  t.meta.amplitude = get_field<double>(m, "amplitude", "meta");
  t.meta.phase = get_field<double>(m, "phase", "meta");
  t.meta.centers = matrix_from_json(m.value("centers", json()), "meta.centers");
  return t;
}

json checkpoint_to_json(const Checkpoint& c) {
  json j;
  j["format_version"] = Checkpoint::kFormatVersion;
  j["network"] = c.network;
  j["config_hash"] = c.config_hash;
  j["iteration"] = c.iteration;
  j["theta"] = c.theta;
  j["optimizer"] = c.optimizer;
  return j;
}

Checkpoint checkpoint_from_json(const json& j) {
  const int version = get_field<int>(j, "format_version", "");
  if (version != Checkpoint::kFormatVersion) {
    throw Error(ErrorCode::io, "unsupported checkpoint format_version " + std::to_string(version),
                "format_version");
  }
  Checkpoint c;
  c.network = get_field<std::string>(j, "network", "");
  c.config_hash = get_field<std::string>(j, "config_hash", "");
  c.iteration = get_field<std::int64_t>(j, "iteration", "");
  c.theta = get_field<std::vector<double>>(j, "theta", "");
  c.optimizer = j.value("optimizer", json::object());
  return c;
}

void save_json(const std::string& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::io, path + ": " + e.what());
  }
}

}  // namespace ntkmeta
