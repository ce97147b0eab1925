#include "mss/io.hpp"

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <fstream>
#include <sstream>

#include "mss/errors.hpp"

namespace mss {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header, const Matrix& rows) {
  if (static_cast<Eigen::Index>(header.size()) != rows.cols()) {
    throw DimensionMismatch("csv header has " + std::to_string(header.size()) + " columns, data has " +
                            std::to_string(rows.cols()));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) out << (j ? "," : "") << format_double(rows(i, j));
    out << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_number(const std::string& s, std::size_t line, std::size_t col) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return kInf;
  if (s == "-inf") return -kInf;
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("line " + std::to_string(line) + ", column " + std::to_string(col) +
                      ": not a number: '" + s + "'");
  }
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("'" + path.string() + "': missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split(line, ',');
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != t.header.size()) {
      throw FormatError("'" + path.string() + "' line " + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    std::vector<double> r;
    r.reserve(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) r.push_back(parse_number(cells[j], lineno, j + 1));
    rows.push_back(std::move(r));
  }
  t.rows.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      t.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return t;
}

namespace {

void dump_value(const json& j, std::ostream& os, int indent, int depth) {
  const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
  const std::string pad_close(static_cast<std::size_t>(indent * depth), ' ');
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) {
        os << "{}";
        return;
      }
      os << "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) os << ",\n";
        first = false;
        os << pad << json(it.key()).dump() << ": ";
        dump_value(it.value(), os, indent, depth + 1);
      }
      os << "\n" << pad_close << "}";
      return;
    }
    case json::value_t::array: {
      if (j.empty()) {
        os << "[]";
        return;
      }
      // Numeric arrays stay on one line to keep files compact.
      const bool flat = std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_number(); });
      if (flat) {
        os << "[";
        bool first = true;
        for (const auto& e : j) {
          if (!first) os << ", ";
          first = false;
          dump_value(e, os, indent, depth + 1);
        }
        os << "]";
        return;
      }
      os << "[\n";
      bool first = true;
      for (const auto& e : j) {
        if (!first) os << ",\n";
        first = false;
        os << pad;
        dump_value(e, os, indent, depth + 1);
      }
      os << "\n" << pad_close << "]";
      return;
    }
    case json::value_t::number_float: {
      const double v = j.get<double>();
      // JSON has no inf/nan literals.
      if (!std::isfinite(v)) {
        os << "null";
      } else {
        os << format_double(v);
      }
      return;
    }
    default:
      os << j.dump();
  }
}

}  // namespace

std::string dump_json(const json& j) {
  std::ostringstream os;
  dump_value(j, os, 2, 0);
  os << '\n';
  return os.str();
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << dump_json(j);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace mss
