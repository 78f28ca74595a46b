// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifest: a versioned JSON listing of volumes, subject splits and
// per-subject metadata.  The schema is documented in docs/manifest.md.
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fmch/tensor.hpp"

namespace fmch {

enum class Split { Train, Val, Test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

struct ManifestEntry {
  std::string subject_id;
  std::string contrast_id;
  int timepoint = 0;
  std::string path;  // relative to the manifest root
  std::optional<bool> health_status;
  bool has_tissue_map = false;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct SubjectInfo {
  std::string tissue_map;       // relative path, empty when absent
  std::optional<double> scale;  // synthetic anatomical scale ("age" target)

  friend bool operator==(const SubjectInfo&, const SubjectInfo&) = default;
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  std::string root = ".";  // as written; relative roots resolve against the manifest's directory
  Dims3 shape{};
  std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};
  std::vector<std::string> contrasts;
  std::vector<ManifestEntry> entries;
  std::map<std::string, Split> splits;
  std::map<std::string, SubjectInfo> subjects;

  // Directory that entry paths are relative to (set by load_manifest).
  std::filesystem::path base_dir = ".";

  std::filesystem::path resolve(const std::string& relative) const;
  std::vector<std::string> subject_ids() const;  // sorted, distinct
  std::vector<std::string> subjects_in(Split split) const;
  std::optional<Split> split_of(const std::string& subject_id) const;
  std::vector<const ManifestEntry*> entries_for(const std::string& subject_id) const;
  const ManifestEntry* find(const std::string& subject_id, const std::string& contrast_id, int timepoint) const;

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.root == b.root && a.shape == b.shape && a.spacing_mm == b.spacing_mm && a.contrasts == b.contrasts &&
           a.entries == b.entries && a.splits == b.splits && a.subjects == b.subjects;
  }
};

struct ManifestLoadOptions {
  bool check_files = true;  // MissingFile when a listed file does not exist
};

// Throws SchemaViolation, SplitLeak or MissingFile.
DatasetManifest load_manifest(const std::filesystem::path& path, ManifestLoadOptions options = {});
DatasetManifest parse_manifest(const std::string& json_text, const std::filesystem::path& base_dir,
                               ManifestLoadOptions options = {});
std::string dump_manifest(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Structural invariants independent of the filesystem; throws like load_manifest.
void validate_manifest(const DatasetManifest& manifest);

}  // namespace fmch
