#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fgd/synthdata.hpp"
#include "fgd/tensor.hpp"

namespace fgd {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using NamedTensorList = std::vector<std::pair<std::string, Tensor>>;

/// Binary layout: magic "FGDNT001", u64 count, then per tensor u32 name
/// length, name bytes, u32 rank, u64 dims, little-endian f64 values.
void write_named_tensors(const std::filesystem::path& path, const NamedTensorList& tensors);
NamedTensorList read_named_tensors(const std::filesystem::path& path);

inline constexpr const char* kDatasetSchema = "fgd.dataset/1";

/// Writes `<stem>.bin` (tensors x and y) and `<stem>.json` (generator spec,
/// thresholds, ground-truth groups). Returns the two paths.
std::pair<std::filesystem::path, std::filesystem::path> save_dataset(const std::filesystem::path& stem,
                                                                     const LabeledDataset& data, const GpSpec& spec);
LabeledDataset load_dataset(const std::filesystem::path& stem);

/// One row per (sample, step): sample, step, x0..x{F-1}, y.
void export_dataset_csv(const std::filesystem::path& path, const LabeledDataset& data);

/// Writes text to `path` atomically enough for our purposes: temp file then rename.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace fgd
