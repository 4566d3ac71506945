#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "attnbench/models.hpp"

// Checkpoint layout:
//   "ATTNCKPT" | u32 LE version | u64 LE manifest bytes | JSON manifest | f32 LE data
// The manifest lists name, shape and element offset per parameter, the model
// config, free-form metadata and an FNV-1a 64 checksum of the data block.
namespace attnbench {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    ModelConfig config;
    std::map<std::string, std::string> metadata;
};

/// Parameters are stored as 32-bit floats, so the round trip is exact for
/// values already representable in single precision (see round_to_float).
void save_checkpoint(const std::filesystem::path& path, const Seq2SeqModel& model,
                     const std::map<std::string, std::string>& metadata = {});

/// Reads only the manifest.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Rebuilds the model recorded in the checkpoint. Throws FormatError on a bad
/// header, version, manifest, size or checksum.
std::unique_ptr<Seq2SeqModel> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

/// Loads into an existing model; its config must equal the stored one.
void load_parameters(const std::filesystem::path& path, Seq2SeqModel& model);

} // namespace attnbench
