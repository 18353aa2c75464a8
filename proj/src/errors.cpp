#include "td3d/errors.hpp"

namespace td3d {

ParseError::ParseError(const std::string& source, std::size_t line, const std::string& what)
    : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

}  // namespace td3d
