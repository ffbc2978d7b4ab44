#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ntkmeta {

/// Shortest round-trip decimal for a double; locale independent.
std::string format_double(double v);

/// In-memory CSV table with a fixed header. Fields are written verbatim;
/// callers format numbers through the typed add() overloads.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  class Row {
   public:
    Row& add(std::string_view s);
    Row& add(const char* s) { return add(std::string_view(s)); }
    Row& add(double v);
    Row& add(std::int64_t v);
    Row& add(std::uint64_t v);
    Row& add(int v) { return add(static_cast<std::int64_t>(v)); }
    Row& add(bool v) { return add(std::string_view(v ? "pass" : "fail")); }

   private:
    friend class CsvTable;
    std::vector<std::string> fields_;
  };

  Row& row();
  const std::vector<std::string>& header() const noexcept { return header_; }
  std::size_t size() const noexcept { return rows_.size(); }
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<Row> rows_;
};

/// 64-bit FNV-1a as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view text);

/// Writes `content` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::string& path, std::string_view content);

}  // namespace ntkmeta
