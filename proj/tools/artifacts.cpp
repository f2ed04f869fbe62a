#include "artifacts.hpp"

#include <cstdio>
#include <iostream>
#include <json.hpp>

#include "deformer/binary_io.hpp"
#include "deformer/errors.hpp"
#include "deformer/fingerprint.hpp"

namespace deformer::cli {

std::string KeyBuilder::to_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string KeyBuilder::digest() const {
  Sha256 h;
  h.update_string(text_);
  return h.finish().hex();
}

std::string file_digest(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = binary::read_file(path);
  Sha256 h;
  h.update(bytes);
  return h.finish().hex();
}

bool ArtifactStore::read_stamp(const std::string& stage, Stamp& out) const {
  const auto file = run_dir_ / "stamps" / (stage + ".json");
  if (!std::filesystem::exists(file)) return false;
  const std::vector<std::uint8_t> bytes = binary::read_file(file);
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    out.key = j.at("key").get<std::string>();
    out.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt stamp " + file.string() + ": " + e.what());
  }
  return true;
}

bool ArtifactStore::up_to_date(const std::string& stage, const std::string& key) const {
  Stamp s;
  if (!read_stamp(stage, s) || s.key != key) return false;
  for (const auto& [rel, digest] : s.outputs) {
    if (!std::filesystem::exists(path(rel)) || file_digest(path(rel)) != digest) return false;
  }
  return true;
}

void ArtifactStore::require(const std::string& stage, const std::string& key, const std::string& command) const {
  Stamp s;
  if (!read_stamp(stage, s)) {
    throw DependencyError("no " + stage + " artifacts in " + run_dir_.string() + "; run `deformer " + command + "` first");
  }
  if (s.key != key) {
    throw StaleArtifactError(stage + " artifacts were built under a different configuration; rerun `deformer " +
                             command + "`");
  }
  for (const auto& [rel, digest] : s.outputs) {
    if (!std::filesystem::exists(path(rel))) {
      throw DependencyError(path(rel).string() + " is missing; rerun `deformer " + command + "`");
    }
    if (file_digest(path(rel)) != digest) {
      throw StaleArtifactError(path(rel).string() + " changed since " + stage + " wrote it; rerun `deformer " +
                               command + "`");
    }
  }
}

void ArtifactStore::stamp(const std::string& stage, const std::string& key,
                          const std::vector<std::string>& outputs) const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["key"] = key;
  nlohmann::ordered_json files = nlohmann::ordered_json::object();
  for (const std::string& rel : outputs) files[rel] = file_digest(path(rel));
  j["outputs"] = files;
  const std::string text = j.dump(2) + "\n";
  binary::write_file_atomic(run_dir_ / "stamps" / (stage + ".json"),
                            {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

bool ArtifactStore::run(const std::string& stage, const std::string& key, bool force,
                        const std::function<std::vector<std::string>()>& build) const {
  if (!force && up_to_date(stage, key)) {
    std::cout << stage << ": up to date, skipped\n";
    return false;
  }
  const std::vector<std::string> outputs = build();
  stamp(stage, key, outputs);
  std::cout << stage << ": done\n";
  return true;
}

}  // namespace deformer::cli
