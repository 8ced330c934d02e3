#pragma once

#include <filesystem>

#include "dalip/types.hpp"

namespace dalip {

// Tensor blob: one JSON header line {"dtype":"f64","shape":[r,c]} followed by
// raw little-endian binary64 values in row-major order.
void write_blob(const std::filesystem::path& path, const Matrix& m);
Matrix read_blob(const std::filesystem::path& path);

}  // namespace dalip
