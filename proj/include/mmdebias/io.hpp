#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdebias/errors.hpp"

namespace mmdebias {

using json = nlohmann::ordered_json;

// Every line-record file starts with a header object:
//   {"schema": "<name>/<version>", ...}
// followed by one JSON object per line. Readers check the schema name and
// reject files written under a different layout.

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write via a temp file and rename so partially written outputs never appear
// under the final name.
inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + tmp.string());
    out << content;
    if (!out) throw DataError("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline json parse_json(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ParseError("malformed JSON in " + what);
  return j;
}

struct LineRecordFile {
  json header;
  std::vector<json> records;
};

inline std::string schema_name(const json& header) {
  if (!header.is_object() || !header.contains("schema") || !header["schema"].is_string())
    throw SchemaError("missing schema field in header");
  std::string s = header["schema"].get<std::string>();
  auto slash = s.find('/');
  return slash == std::string::npos ? s : s.substr(0, slash);
}

inline LineRecordFile read_line_records(const std::filesystem::path& path,
                                        const std::string& expected_schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  LineRecordFile out;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON line");
    if (!have_header) {
      if (schema_name(j) != expected_schema)
        throw SchemaError(path.string() + ": expected schema '" + expected_schema + "', found '" +
                          schema_name(j) + "'");
      out.header = std::move(j);
      have_header = true;
    } else {
      out.records.push_back(std::move(j));
    }
  }
  if (!have_header) throw SchemaError(path.string() + ": missing header line");
  return out;
}

inline void write_line_records(const std::filesystem::path& path, const json& header,
                               const std::vector<json>& records) {
  std::ostringstream ss;
  ss << header.dump() << "\n";
  for (const auto& r : records) ss << r.dump() << "\n";
  write_text_file(path, ss.str());
}

template <typename T>
T require_field(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(where + ": bad type for field '" + key + "'");
  }
}

}  // namespace mmdebias
