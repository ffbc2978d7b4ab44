#include "ntkmeta/csv.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ntkmeta/error.hpp"

namespace ntkmeta {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

CsvTable::Row& CsvTable::Row::add(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) {
    fields_.emplace_back(s);
    return *this;
  }
  std::string quoted = "\"";
  for (char c : s) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  quoted += '"';
  fields_.push_back(std::move(quoted));
  return *this;
}

CsvTable::Row& CsvTable::Row::add(double v) {
  fields_.push_back(format_double(v));
  return *this;
}

CsvTable::Row& CsvTable::Row::add(std::int64_t v) {
  fields_.push_back(std::to_string(v));
  return *this;
}

CsvTable::Row& CsvTable::Row::add(std::uint64_t v) {
  fields_.push_back(std::to_string(v));
  return *this;
}

CsvTable::Row& CsvTable::row() { return rows_.emplace_back(); }

std::string CsvTable::str() const {
  std::string out;
  auto emit = [&out](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += fields[i];
    }
    out += '\n';
  };
  emit(header_);
  for (const Row& r : rows_) {
    if (r.fields_.size() != header_.size()) {
      throw Error(ErrorCode::invalid_argument, "csv row has " + std::to_string(r.fields_.size()) +
                                                   " fields, header has " +
                                                   std::to_string(header_.size()));
    }
    emit(r.fields_);
  }
  return out;
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_file_atomic(const std::string& path, std::string_view content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error(ErrorCode::io, "failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw Error(ErrorCode::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace ntkmeta
