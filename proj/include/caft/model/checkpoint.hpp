#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "caft/model/caft_model.hpp"
#include "json.hpp"

namespace caft::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// On-disk container shared by model checkpoints and trainer state.
//
//   "CAFT" | u32 version | u64 header_len | header JSON
//   u64 tensor_count
//   per tensor: u32 name_len | name | u32 rank | u64 dims[rank] |
//               u64 byte_len | f64 values[byte_len / 8]
//
// All integers and floats are little-endian.
struct TensorArchive {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;
};

// Writes to a sibling temp file and renames it into place.
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
// Throws IoError if unreadable and FormatError on any structural defect.
TensorArchive read_archive(const std::filesystem::path& path);

// Model checkpoints carry {"kind": "model", "config": {...}} as header.
// Saving a model with attached adapters is a ContractError.
void save_model(const std::filesystem::path& path, CaftModel& model);
CaftModel load_model(const std::filesystem::path& path);

}  // namespace caft::model
