// SPDX-License-Identifier: Apache-2.0
#include "fmch/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace fmch {
namespace {

using nlohmann::json;

[[noreturn]] void schema_error(const std::string& field, const std::string& what) {
  throw Error(ErrorCode::SchemaViolation, field, field + ": " + what);
}

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) schema_error(where, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) schema_error(where.empty() ? key : where + "." + key, "missing key");
  return *it;
}

int get_int(const json& value, const std::string& field) {
  if (!value.is_number_integer()) schema_error(field, "expected an integer");
  return value.get<int>();
}

std::string get_string(const json& value, const std::string& field) {
  if (!value.is_string()) schema_error(field, "expected a string");
  return value.get<std::string>();
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  schema_error("splits", "unknown split '" + std::string(name) + "'");
}

std::filesystem::path DatasetManifest::resolve(const std::string& relative) const {
  std::filesystem::path r(root);
  std::filesystem::path base = r.is_absolute() ? r : base_dir / r;
  return (base / relative).lexically_normal();
}

std::vector<std::string> DatasetManifest::subject_ids() const {
  std::set<std::string> ids;
  for (const auto& e : entries) ids.insert(e.subject_id);
  return {ids.begin(), ids.end()};
}

std::vector<std::string> DatasetManifest::subjects_in(Split split) const {
  std::vector<std::string> out;
  for (const auto& [id, s] : splits)
    if (s == split) out.push_back(id);
  return out;
}

std::optional<Split> DatasetManifest::split_of(const std::string& subject_id) const {
  auto it = splits.find(subject_id);
  if (it == splits.end()) return std::nullopt;
  return it->second;
}

std::vector<const ManifestEntry*> DatasetManifest::entries_for(const std::string& subject_id) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.subject_id == subject_id) out.push_back(&e);
  return out;
}

const ManifestEntry* DatasetManifest::find(const std::string& subject_id, const std::string& contrast_id,
                                           int timepoint) const {
  for (const auto& e : entries)
    if (e.subject_id == subject_id && e.contrast_id == contrast_id && e.timepoint == timepoint) return &e;
  return nullptr;
}

void validate_manifest(const DatasetManifest& m) {
  if (m.shape.d < 1 || m.shape.h < 1 || m.shape.w < 1) schema_error("shape", "dimensions must be positive");
  for (float s : m.spacing_mm)
    if (!(s > 0.0f)) schema_error("spacing_mm", "spacing must be positive");

  std::set<std::string> contrast_set(m.contrasts.begin(), m.contrasts.end());
  if (contrast_set.size() != m.contrasts.size()) schema_error("contrasts", "duplicate contrast id");

  std::set<std::tuple<std::string, std::string, int>> seen;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const std::string where = "entries[" + std::to_string(i) + "]";
    if (e.subject_id.empty()) schema_error(where + ".subject_id", "empty");
    if (!contrast_set.count(e.contrast_id)) schema_error(where + ".contrast_id", "'" + e.contrast_id + "' not in contrasts");
    if (e.timepoint < 0) schema_error(where + ".timepoint", "must be non-negative");
    if (!seen.insert({e.subject_id, e.contrast_id, e.timepoint}).second)
      schema_error(where, "duplicate (subject, contrast, timepoint)");
    if (!m.splits.count(e.subject_id)) schema_error(where + ".subject_id", "'" + e.subject_id + "' has no split");
  }
  for (const auto& [id, split] : m.splits) {
    if (split == Split::Train && m.entries_for(id).empty())
      schema_error("splits.train", "subject '" + id + "' has no entries");
  }
}

DatasetManifest parse_manifest(const std::string& json_text, const std::filesystem::path& base_dir,
                               ManifestLoadOptions options) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    schema_error("document", e.what());
  }
  if (!doc.is_object()) schema_error("document", "expected an object");

  DatasetManifest m;
  m.base_dir = base_dir;
  if (get_int(require(doc, "schema", ""), "schema") != DatasetManifest::kSchemaVersion)
    schema_error("schema", "unsupported version");
  m.root = get_string(require(doc, "root", ""), "root");

  const json& shape = require(doc, "shape", "");
  if (!shape.is_array() || shape.size() != 3) schema_error("shape", "expected [D,H,W]");
  m.shape = {get_int(shape[0], "shape[0]"), get_int(shape[1], "shape[1]"), get_int(shape[2], "shape[2]")};

  const json& spacing = require(doc, "spacing_mm", "");
  if (!spacing.is_array() || spacing.size() != 3) schema_error("spacing_mm", "expected 3 numbers");
  for (int i = 0; i < 3; ++i) {
    if (!spacing[i].is_number()) schema_error("spacing_mm", "expected numbers");
    m.spacing_mm[i] = spacing[i].get<float>();
  }

  const json& contrasts = require(doc, "contrasts", "");
  if (!contrasts.is_array()) schema_error("contrasts", "expected an array");
  for (const auto& c : contrasts) m.contrasts.push_back(get_string(c, "contrasts[]"));

  const json& splits = require(doc, "splits", "");
  if (!splits.is_object()) schema_error("splits", "expected an object");
  for (const auto& [name, ids] : splits.items()) {
    const Split split = split_from_string(name);
    if (!ids.is_array()) schema_error("splits." + name, "expected an array");
    for (const auto& id_json : ids) {
      const std::string id = get_string(id_json, "splits." + name + "[]");
      auto [it, inserted] = m.splits.emplace(id, split);
      if (!inserted) {
        throw Error(ErrorCode::SplitLeak, id,
                    "subject '" + id + "' listed in both " + std::string(to_string(it->second)) + " and " + name);
      }
    }
  }

  if (auto it = doc.find("subjects"); it != doc.end()) {
    if (!it->is_object()) schema_error("subjects", "expected an object");
    for (const auto& [id, info] : it->items()) {
      const std::string where = "subjects." + id;
      if (!info.is_object()) schema_error(where, "expected an object");
      SubjectInfo s;
      if (auto t = info.find("tissue_map"); t != info.end() && !t->is_null()) s.tissue_map = get_string(*t, where + ".tissue_map");
      if (auto sc = info.find("scale"); sc != info.end() && !sc->is_null()) {
        if (!sc->is_number()) schema_error(where + ".scale", "expected a number");
        s.scale = sc->get<double>();
      }
      m.subjects.emplace(id, std::move(s));
    }
  }

  const json& entries = require(doc, "entries", "");
  if (!entries.is_array()) schema_error("entries", "expected an array");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string where = "entries[" + std::to_string(i) + "]";
    const json& e = entries[i];
    ManifestEntry entry;
    entry.subject_id = get_string(require(e, "subject_id", where), where + ".subject_id");
    entry.contrast_id = get_string(require(e, "contrast_id", where), where + ".contrast_id");
    entry.timepoint = get_int(require(e, "timepoint", where), where + ".timepoint");
    entry.path = get_string(require(e, "path", where), where + ".path");
    const json& hs = require(e, "health_status", where);
    if (!hs.is_null()) {
      if (!hs.is_boolean()) schema_error(where + ".health_status", "expected boolean or null");
      entry.health_status = hs.get<bool>();
    }
    const json& tm = require(e, "has_tissue_map", where);
    if (!tm.is_boolean()) schema_error(where + ".has_tissue_map", "expected a boolean");
    entry.has_tissue_map = tm.get<bool>();
    m.entries.push_back(std::move(entry));
  }

  validate_manifest(m);

  if (options.check_files) {
    for (const auto& e : m.entries) {
      const auto p = m.resolve(e.path);
      if (!std::filesystem::is_regular_file(p)) throw Error(ErrorCode::MissingFile, e.path, "missing file " + p.string());
      if (e.has_tissue_map) {
        auto it = m.subjects.find(e.subject_id);
        if (it == m.subjects.end() || it->second.tissue_map.empty())
          schema_error("subjects." + e.subject_id + ".tissue_map", "entry declares a tissue map but none is listed");
        const auto tp = m.resolve(it->second.tissue_map);
        if (!std::filesystem::is_regular_file(tp))
          throw Error(ErrorCode::MissingFile, it->second.tissue_map, "missing file " + tp.string());
      }
    }
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path, ManifestLoadOptions options) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, path.string(), "cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path(), options);
}

std::string dump_manifest(const DatasetManifest& m) {
  json doc;
  doc["schema"] = DatasetManifest::kSchemaVersion;
  doc["root"] = m.root;
  doc["shape"] = {m.shape.d, m.shape.h, m.shape.w};
  doc["spacing_mm"] = {m.spacing_mm[0], m.spacing_mm[1], m.spacing_mm[2]};
  doc["contrasts"] = m.contrasts;
  json splits = {{"train", json::array()}, {"val", json::array()}, {"test", json::array()}};
  for (const auto& [id, split] : m.splits) splits[std::string(to_string(split))].push_back(id);
  doc["splits"] = splits;
  json subjects = json::object();
  for (const auto& [id, s] : m.subjects) {
    json info;
    info["tissue_map"] = s.tissue_map.empty() ? json(nullptr) : json(s.tissue_map);
    info["scale"] = s.scale ? json(*s.scale) : json(nullptr);
    subjects[id] = info;
  }
  doc["subjects"] = subjects;
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"subject_id", e.subject_id},
                       {"contrast_id", e.contrast_id},
                       {"timepoint", e.timepoint},
                       {"path", e.path},
                       {"health_status", e.health_status ? json(*e.health_status) : json(nullptr)},
                       {"has_tissue_map", e.has_tissue_map}});
  }
  doc["entries"] = entries;
  return doc.dump(2) + "\n";
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  validate_manifest(manifest);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, path.string(), "cannot write manifest " + path.string());
  out << dump_manifest(manifest);
}

}  // namespace fmch
