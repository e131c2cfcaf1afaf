#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "uasr/model.hpp"
#include "uasr/params.hpp"

namespace uasr {

// Binary checkpoint layout (all integers little-endian u32):
//   magic "UASR1" | config_len, config text | tensor_count |
//   per tensor: name_len, name, rank, extents..., f32 values... |
//   crc32 of everything before the checksum.
// Values are stored as 32-bit floats regardless of compute precision.
void checkpoint_save(const ParamStore& params, const ModelConfig& config,
                     const std::string& path);

std::pair<ParamStore, ModelConfig> checkpoint_load(const std::string& path);

// Feature files: u32 T, u32 d_input header, then T*d_input f32 values,
// row-major little-endian.
void write_features(const std::string& path, const Tensor& features);
Tensor read_features(const std::string& path);

uint32_t crc32_ieee(const uint8_t* data, std::size_t len);

}  // namespace uasr
