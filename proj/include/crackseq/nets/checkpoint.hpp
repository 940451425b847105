#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "json.hpp"

namespace crackseq::nets {

// Checkpoint container, stable across implementations:
//   bytes 0..7   magic "CSEQCKPT"
//   u32 LE       format version (1)
//   u64 LE       header length in bytes
//   header       UTF-8 JSON: {"meta": ..., "tensors": [{name, shape, offset, numel}]}
//   payload      row-major float32 little-endian arrays, in header order
// Only trainable parameters are stored; derived buffers are rebuilt from the spec.
void save_checkpoint(const torch::nn::Module& model, const nlohmann::json& meta,
                     const std::filesystem::path& path);

// Loads weights by parameter name; shapes must match. Returns the meta block.
nlohmann::json load_checkpoint(torch::nn::Module& model, const std::filesystem::path& path);

// Reads only the meta block (to pick the right architecture before loading).
nlohmann::json read_checkpoint_meta(const std::filesystem::path& path);

}  // namespace crackseq::nets
