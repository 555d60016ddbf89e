#include "raypose/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace raypose {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts are unsupported");

namespace {

constexpr char kMagic[8] = {'R', 'P', 'O', 'S', 'E', 'C', 'K', 'P'};

uint32_t payload_crc(const std::vector<char>& payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  if (!payload.empty()) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data()),
                static_cast<uInt>(payload.size()));
  }
  return static_cast<uint32_t>(crc);
}

struct ParsedHeader {
  nlohmann::json header;
  std::streamoff payload_start = 0;
};

ParsedHeader read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw CheckpointError(CheckpointError::Kind::kCorruptHeader, path + ": bad checkpoint magic");
  }
  uint32_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&header_len), 4)) {
    throw CheckpointError(CheckpointError::Kind::kCorruptHeader, path + ": missing header length");
  }
  std::string header_text(header_len, '\0');
  if (!in.read(header_text.data(), header_len)) {
    throw CheckpointError(CheckpointError::Kind::kCorruptHeader, path + ": header shorter than declared");
  }
  nlohmann::json header = nlohmann::json::parse(header_text, nullptr, false);
  if (header.is_discarded() || !header.contains("format_version") || !header.contains("tensors") ||
      !header.contains("crc32_of_payload")) {
    throw CheckpointError(CheckpointError::Kind::kCorruptHeader, path + ": malformed header JSON");
  }
  if (header["format_version"].get<int>() != kCheckpointFormatVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersionMismatch,
                          path + ": unsupported checkpoint format version");
  }
  return {std::move(header), static_cast<std::streamoff>(12 + header_len)};
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& model_config) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<char> payload;
  payload.reserve(static_cast<size_t>(params.total_elements()) * sizeof(float));
  for (int i = 0; i < params.size(); ++i) {
    const auto& p = params.param(i);
    const size_t bytes = p.value.data.size() * sizeof(float);
    tensors.push_back({{"name", p.name},
                       {"shape", {p.value.rows, p.value.cols}},
                       {"byte_offset", payload.size()},
                       {"byte_len", bytes}});
    const size_t at = payload.size();
    payload.resize(at + bytes);
    std::memcpy(payload.data() + at, p.value.data.data(), bytes);
  }
  const nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                                 {"model_config", model_config},
                                 {"tensors", std::move(tensors)},
                                 {"crc32_of_payload", payload_crc(payload)}};
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 8);
  const uint32_t header_len = static_cast<uint32_t>(header_text.size());
  out.write(reinterpret_cast<const char*>(&header_len), 4);
  out.write(header_text.data(), header_text.size());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

nlohmann::json read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_checkpoint_config: cannot open " + path);
  return read_header(in, path).header.value("model_config", nlohmann::json::object());
}

nlohmann::json load_checkpoint(const std::string& path, ParamStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  ParsedHeader parsed = read_header(in, path);

  size_t payload_size = 0;
  for (const auto& t : parsed.header["tensors"]) {
    payload_size = std::max(payload_size,
                            t["byte_offset"].get<size_t>() + t["byte_len"].get<size_t>());
  }
  std::vector<char> payload(payload_size);
  in.seekg(parsed.payload_start);
  in.read(payload.data(), static_cast<std::streamsize>(payload_size));
  if (static_cast<size_t>(in.gcount()) != payload_size) {
    throw CheckpointError(CheckpointError::Kind::kTruncated, path + ": truncated payload");
  }
  if (payload_crc(payload) != parsed.header["crc32_of_payload"].get<uint32_t>()) {
    throw CheckpointError(CheckpointError::Kind::kChecksumMismatch,
                          path + ": payload checksum mismatch");
  }

  const auto& tensors = parsed.header["tensors"];
  if (static_cast<int>(tensors.size()) != params.size()) {
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                          path + ": tensor count does not match the model");
  }
  for (const auto& t : tensors) {
    const std::string name = t["name"].get<std::string>();
    const int idx = params.find(name);
    if (idx < 0) {
      throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                            path + ": model has no parameter " + name);
    }
    auto& p = params.param(idx);
    const auto shape = t["shape"].get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] != p.value.rows || shape[1] != p.value.cols) {
      throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                            path + ": shape mismatch for parameter " + name);
    }
    const size_t offset = t["byte_offset"].get<size_t>();
    const size_t bytes = t["byte_len"].get<size_t>();
    if (bytes != p.value.data.size() * sizeof(float) || offset + bytes > payload.size()) {
      throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                            path + ": byte length mismatch for parameter " + name);
    }
    std::memcpy(p.value.data.data(), payload.data() + offset, bytes);
  }
  return parsed.header.value("model_config", nlohmann::json::object());
}

}  // namespace raypose
