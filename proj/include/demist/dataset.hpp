#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "demist/train.hpp"

namespace demist {

inline constexpr const char* kSplitNames[] = {"train", "val", "test"};

/// On-disk layout:
///   <root>/<split>/gt/NNNN.png
///   <root>/<split>/degraded/NNNN.png
///   <root>/labels.csv   columns id,class_label with id "<split>/NNNN"
/// Writes one split; `labels` collects rows for write_labels.
void write_split(const std::filesystem::path& root, const std::string& split,
                 const std::vector<DegradationSample>& samples, std::map<std::string, ClassLabel>& labels);

void write_labels(const std::filesystem::path& root, const std::map<std::string, ClassLabel>& labels);
std::map<std::string, ClassLabel> read_labels(const std::filesystem::path& root);

/// Loads every pair of a split in file-name order. Labels come from
/// labels.csv; a pair without a row is an error.
std::vector<PairedSample> load_split(const std::filesystem::path& root, const std::string& split);

/// Sorted list of *.png files in a directory, or the path itself when it
/// names a file.
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& path);

}  // namespace demist
