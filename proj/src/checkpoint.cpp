#include "ccrs/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace ccrs::ckpt {

namespace {

constexpr const char* kFormat = "ccrs-checkpoint-1";

std::string blob_name(const std::string& group) {
  std::string out;
  for (char c : group) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_') ? c : '-';
  return out + ".bin";
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string to_bytes(const Matrix& m) {
  std::string bytes(static_cast<std::size_t>(m.size()) * sizeof(double), '\0');
  std::size_t off = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      std::memcpy(bytes.data() + off, &v, sizeof(double));
      off += sizeof(double);
    }
  return bytes;
}

}  // namespace

void save(const std::string& dir, const ParamSet& params, const nlohmann::json& meta) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = kFormat;
  manifest["meta"] = meta;
  manifest["checksum"] = checksum(params);
  manifest["groups"] = nlohmann::json::array();
  for (const auto& [name, m] : params) {
    const std::string file = blob_name(name);
    write_atomic(fs::path(dir) / file, to_bytes(m));
    manifest["groups"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"file", file}});
  }
  write_atomic(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

bool exists(const std::string& dir) { return fs::exists(fs::path(dir) / "manifest.json"); }

Checkpoint load(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw std::runtime_error("no checkpoint manifest at " + mpath.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != kFormat) throw std::runtime_error("unsupported checkpoint format");
  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& g : manifest.at("groups")) {
    const std::string name = g.at("name");
    const auto rows = g.at("rows").get<Eigen::Index>();
    const auto cols = g.at("cols").get<Eigen::Index>();
    const fs::path bpath = fs::path(dir) / g.at("file").get<std::string>();
    std::ifstream blob(bpath, std::ios::binary);
    if (!blob) throw std::runtime_error("missing blob for group " + name);
    std::string bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(double))
      throw std::runtime_error("blob size for " + name + " does not match manifest shape " + std::to_string(rows) +
                               "x" + std::to_string(cols));
    Matrix m(rows, cols);
    std::size_t off = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        std::memcpy(&m(r, c), bytes.data() + off, sizeof(double));
        off += sizeof(double);
      }
    ck.params.set(name, std::move(m));
  }
  if (manifest.contains("checksum") && manifest.at("checksum").get<std::string>() != checksum(ck.params))
    throw std::runtime_error("checkpoint checksum mismatch");
  return ck;
}

std::string checksum(const ParamSet& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, m] : params) {
    mix(name.data(), name.size());
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    mix(shape, sizeof(shape));
    const std::string bytes = to_bytes(m);
    mix(bytes.data(), bytes.size());
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

}  // namespace ccrs::ckpt
