// pathfield: CSV emission for experiment runs. Headers are mandatory, floats
// are printed at 17 significant digits, and rows never carry wall-clock data,
// so a rerun with the same config and seed produces byte-identical files.
#pragma once

#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace pathfield {

// Shortest representation that round-trips a double exactly.
inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// One cell: text passes through (quoted when it contains delimiters),
// numbers go through csv_num.
class CsvCell {
 public:
  CsvCell(const char* s) : text_(s) {}            // NOLINT(runtime/explicit)
  CsvCell(std::string s) : text_(std::move(s)) {} // NOLINT(runtime/explicit)
  CsvCell(double v) : text_(csv_num(v)) {}        // NOLINT(runtime/explicit)
  CsvCell(int v) : text_(std::to_string(v)) {}    // NOLINT(runtime/explicit)
  CsvCell(long v) : text_(std::to_string(v)) {}   // NOLINT(runtime/explicit)
  CsvCell(std::uint64_t v) : text_(std::to_string(v)) {}  // NOLINT(runtime/explicit)
  CsvCell(bool v) : text_(v ? "1" : "0") {}       // NOLINT(runtime/explicit)

  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::initializer_list<const char*> header)
      : out_(path, std::ios::binary), columns_(header.size()) {
    if (!out_) throw std::runtime_error("CsvWriter: cannot open " + path);
    std::vector<CsvCell> cells;
    cells.reserve(header.size());
    for (const char* h : header) cells.emplace_back(h);
    write_row(cells);
  }

  void row(std::initializer_list<CsvCell> cells) {
    if (cells.size() != columns_)
      throw std::invalid_argument("CsvWriter: row width does not match the header");
    write_row(std::vector<CsvCell>(cells));
  }

  std::size_t columns() const { return columns_; }

 private:
  static std::string escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (const char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  }

  void write_row(const std::vector<CsvCell>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out_ << ',';
      out_ << escape(cells[i].text());
    }
    out_ << '\n';
  }

  std::ofstream out_;
  std::size_t columns_;
};

}  // namespace pathfield
