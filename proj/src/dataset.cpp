#include "dvd/dataset.hpp"

#include "dvd/flow.hpp"
#include "dvd/image_io.hpp"
#include "dvd/nrfm.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace dvd {

namespace fs = std::filesystem;

std::string manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = m.format;
  j["pattern"] = m.pattern;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const ManifestPair& p : m.pairs) {
    nlohmann::ordered_json e;
    e["hazy_dir"] = p.hazy_dir.generic_string();
    e["clear_dir"] = p.clear_dir.generic_string();
    if (p.truth_file) e["truth_file"] = p.truth_file->generic_string();
    if (p.flow_dir) e["flow_dir"] = p.flow_dir->generic_string();
    if (p.aligned_dir) e["aligned_dir"] = p.aligned_dir->generic_string();
    j["pairs"].push_back(e);
  }
  return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.format = j.value("format", m.format);
    m.pattern = j.value("pattern", m.pattern);
    if (!j.contains("pairs") || !j["pairs"].is_array()) throw ValidationError("manifest: missing \"pairs\" array");
    for (const auto& e : j["pairs"]) {
      ManifestPair p;
      p.hazy_dir = e.at("hazy_dir").get<std::string>();
      p.clear_dir = e.at("clear_dir").get<std::string>();
      if (e.contains("truth_file")) p.truth_file = e["truth_file"].get<std::string>();
      if (e.contains("flow_dir")) p.flow_dir = e["flow_dir"].get<std::string>();
      if (e.contains("aligned_dir")) p.aligned_dir = e["aligned_dir"].get<std::string>();
      m.pairs.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  if (m.pairs.empty()) throw ValidationError("manifest lists no pairs");
  if (m.format != "ppm") throw ValidationError("manifest: unsupported image format '" + m.format + "' (expected ppm)");
  if (m.pattern != "%05d.ppm") throw ValidationError("manifest: unsupported frame pattern '" + m.pattern + "'");
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  DatasetManifest m = manifest_from_json(ss.str());
  const fs::path base = path.parent_path();
  auto resolve = [&](fs::path& p, const char* what) {
    if (p.is_relative()) p = base / p;
    if (!fs::exists(p)) throw ValidationError(std::string("manifest ") + what + " does not exist: " + p.string());
  };
  for (ManifestPair& p : m.pairs) {
    resolve(p.hazy_dir, "hazy_dir");
    resolve(p.clear_dir, "clear_dir");
    if (p.truth_file) resolve(*p.truth_file, "truth_file");
    if (p.flow_dir) resolve(*p.flow_dir, "flow_dir");
    if (p.aligned_dir) resolve(*p.aligned_dir, "aligned_dir");
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << manifest_to_json(m) << '\n';
}

DatasetManifest write_synthetic_dataset(const SceneConfig& config, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create output directory " + dir.string() + ": " + ec.message());
  const GeneratedScene g = generate_scene(config);
  const MisalignedPair pair = make_misaligned_pair(g.scene, g.misalignment);
  write_sequence(pair.hazy, dir / "hazy");
  write_sequence(pair.clear, dir / "clear");
  write_sequence(pair.aligned_clear, dir / "aligned_clear");
  write_flows(pair.flows, dir / "flows");
  write_match_table(pair.truth, dir / "truth.jsonl");
  {
    std::ofstream out(dir / "scene.json");
    if (!out) throw ValidationError("cannot write " + (dir / "scene.json").string());
    out << scene_config_to_json(config) << '\n';
  }
  DatasetManifest m;
  m.pairs.push_back({"hazy", "clear", fs::path("truth.jsonl"), fs::path("flows"), fs::path("aligned_clear")});
  save_manifest(m, dir / "manifest.json");
  return m;
}

}  // namespace dvd
