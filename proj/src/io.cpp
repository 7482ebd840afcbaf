#include "protoadapt/io.hpp"

#include "protoadapt/common.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

namespace protoadapt::io {

std::string num(double v) { return num(v, 10); }

std::string num(double v, int precision) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";  // folds -0
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

namespace {
std::string escape(std::string_view f) {
  if (f.find_first_of(",\"\n") == std::string_view::npos) return std::string(f);
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}
}  // namespace

CsvWriter::CsvWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw Error("cannot open for writing: " + path);
}

void CsvWriter::header(std::initializer_list<std::string_view> cols) {
  std::vector<std::string> v(cols.begin(), cols.end());
  header(v);
}

void CsvWriter::header(const std::vector<std::string>& cols) { row(cols); }

void CsvWriter::row(const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out_ << ',';
    out_ << escape(fields[i]);
  }
  out_ << '\n';
  if (!out_) throw Error("CSV write failed");
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec || !std::filesystem::is_directory(path)) throw Error("output directory not writable: " + path);
  const auto probe = std::filesystem::path(path) / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw Error("output directory not writable: " + path);
  }
  std::filesystem::remove(probe, ec);
}

std::string join_path(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f << text;
}

}  // namespace protoadapt::io
