#pragma once

#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>

#include "raypose/tensor.hpp"

namespace raypose {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointError : std::runtime_error {
  enum class Kind {
    kCorruptHeader,
    kVersionMismatch,
    kChecksumMismatch,
    kShapeMismatch,
    kTruncated,
  };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

// Layout: 8-byte magic "RPOSECKP", uint32 LE header length, UTF-8 JSON header
// {format_version, model_config, tensors:[{name, shape, byte_offset,
// byte_len}], crc32_of_payload}, then the raw little-endian float32 payload.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& model_config);

// Reads just the model_config from the header.
nlohmann::json read_checkpoint_config(const std::string& path);

// Fills an existing store (e.g. a freshly constructed model) from the file.
// The file's tensor names and shapes must match the store exactly; otherwise
// CheckpointError{kShapeMismatch} is thrown. Returns the stored model_config.
nlohmann::json load_checkpoint(const std::string& path, ParamStore& params);

}  // namespace raypose
