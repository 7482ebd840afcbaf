#pragma once

#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace protoadapt::io {

/// Shortest round-trippable-enough decimal form used in every tabular output.
std::string num(double v);
std::string num(double v, int precision);

/// Minimal CSV writer. Fields containing a comma, quote or newline are quoted.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path);

  void header(std::initializer_list<std::string_view> cols);
  void header(const std::vector<std::string>& cols);
  void row(const std::vector<std::string>& fields);

 private:
  std::ofstream out_;
};

/// Creates the directory (and parents); throws Error if it is not writable.
void ensure_dir(const std::string& path);

std::string join_path(const std::string& dir, const std::string& file);

void write_text(const std::string& path, const std::string& text);

}  // namespace protoadapt::io
