#pragma once

// On-disk hazy/clear pair collections: the JSON manifest and the synthetic
// dataset writer behind `dvd synth`.

#include "dvd/scene.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dvd {

/// Paths are relative to the manifest's directory.
struct ManifestPair {
  std::filesystem::path hazy_dir;
  std::filesystem::path clear_dir;
  std::optional<std::filesystem::path> truth_file;
  std::optional<std::filesystem::path> flow_dir;
  /// Haze-free renderings of the hazy frames (synthetic pairs only).
  std::optional<std::filesystem::path> aligned_dir;
};

struct DatasetManifest {
  std::vector<ManifestPair> pairs;
  std::string pattern = "%05d.ppm";
  std::string format = "ppm";
};

std::string manifest_to_json(const DatasetManifest& manifest);
/// Throws ValidationError on an empty pair list or an unsupported format.
DatasetManifest manifest_from_json(const std::string& text);

/// Parses `path` and checks that every referenced path exists, resolving
/// relative entries against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Writes hazy/, clear/, aligned_clear/, flows/, truth.jsonl, scene.json and
/// manifest.json below `dir`.
DatasetManifest write_synthetic_dataset(const SceneConfig& config, const std::filesystem::path& dir);

}  // namespace dvd
