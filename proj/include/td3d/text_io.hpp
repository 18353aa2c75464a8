#pragma once

#include <charconv>
#include <istream>
#include <string>
#include <string_view>
#include <vector>

namespace td3d::text {

// Shortest-exact decimal form (17 significant digits, general notation).
std::string format_double(double value);

std::vector<std::string_view> split_ws(std::string_view line);

// Parse helpers return false on malformed input (trailing characters included).
bool parse_double(std::string_view token, double& out);
bool parse_int(std::string_view token, long long& out);

// Line reader that keeps a 1-based line counter for error messages.
class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  bool next(std::string& line);
  std::size_t line_number() const { return line_; }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
};

}  // namespace td3d::text
