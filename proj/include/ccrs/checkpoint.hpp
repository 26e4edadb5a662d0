#pragma once

// On-disk layout: <dir>/manifest.json plus one raw little-endian float64
// blob per parameter group (row-major). Every file is written to a temporary
// name and renamed into place; the manifest goes last.

#include "ccrs/tensor.hpp"

#include <string>

#include <nlohmann/json.hpp>

namespace ccrs::ckpt {

struct Checkpoint {
  ParamSet params;
  nlohmann::json meta;
};

void save(const std::string& dir, const ParamSet& params, const nlohmann::json& meta);
/// Throws std::runtime_error on missing files or blob/manifest shape mismatch.
Checkpoint load(const std::string& dir);
bool exists(const std::string& dir);

/// Hex FNV-1a digest over group names, shapes and values.
std::string checksum(const ParamSet& params);

}  // namespace ccrs::ckpt
