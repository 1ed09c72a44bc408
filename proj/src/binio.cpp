#include "fishersft/binio.hpp"

#include <fstream>
#include <iterator>

namespace fishersft::binio {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ParseError(ParseErrorKind::kIo, fmt::format("cannot open {} for reading", path));
  }
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw ParseError(ParseErrorKind::kIo, fmt::format("cannot open {} for writing", path));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw ParseError(ParseErrorKind::kIo, fmt::format("short write to {}", path));
  }
}

}  // namespace fishersft::binio
