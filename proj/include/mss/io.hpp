#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "mss/model.hpp"

namespace mss {

using json = nlohmann::json;

/// 17 significant digits; enough for an exact double round trip.
std::string format_double(double v);

/// Table with a header row; values written with format_double.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header, const Matrix& rows);

struct CsvTable {
  std::vector<std::string> header;
  Matrix rows;
};

CsvTable read_csv(const std::filesystem::path& path);

/// Serializes with every floating value rendered by format_double.
std::string dump_json(const json& j);
void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

}  // namespace mss
