#include "dalip/blob.hpp"

#include <bit>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "blob i/o writes raw doubles and assumes a little-endian host");

namespace dalip {

void write_blob(const std::filesystem::path& path, const Matrix& m) {
  require_finite(m, "write_blob");
  nlohmann::json header;
  header["dtype"] = "f64";
  header["shape"] = {m.rows(), m.cols()};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("write_blob: cannot open " + path.string());
  out << header.dump() << "\n";
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(m.size())));
  if (!out) throw ParseError("write_blob: short write to " + path.string());
}

Matrix read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("read_blob: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("read_blob: missing header line in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("read_blob: bad header in " + path.string() + ": " + e.what());
  }
  if (header.value("dtype", "") != "f64")
    throw ParseError("read_blob: unsupported dtype in " + path.string());
  if (!header.contains("shape") || !header["shape"].is_array() || header["shape"].size() != 2)
    throw ParseError("read_blob: header shape must be [rows, cols] in " + path.string());

  const auto rows = header["shape"][0].get<Index>();
  const auto cols = header["shape"][1].get<Index>();
  if (rows < 0 || cols < 0) throw ParseError("read_blob: negative shape in " + path.string());

  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(m.size())));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(m.size())))
    throw ParseError("read_blob: truncated payload in " + path.string());
  require_finite(m, "read_blob");
  return m;
}

}  // namespace dalip
