#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace deformer::cli {

// Canonical key=value text hashed into a stage key.
class KeyBuilder {
 public:
  explicit KeyBuilder(const std::string& stage) { add("stage", stage); }
  template <typename T>
  KeyBuilder& add(const std::string& name, const T& value) {
    text_ += name + "=" + to_text(value) + "\n";
    return *this;
  }
  std::string digest() const;

 private:
  static std::string to_text(const std::string& v) { return v; }
  static std::string to_text(const char* v) { return v; }
  static std::string to_text(bool v) { return v ? "1" : "0"; }
  static std::string to_text(double v);
  template <typename T>
  static std::string to_text(const T& v) {
    return std::to_string(v);
  }
  std::string text_;
};

std::string file_digest(const std::filesystem::path& path);

/// Each stage leaves <run>/stamps/<stage>.json recording its key and the
/// digest of every output file.
class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path run_dir) : run_dir_(std::move(run_dir)) {}

  std::filesystem::path path(const std::string& relative) const { return run_dir_ / relative; }

  // True when the stamp exists with this key and every output is intact.
  bool up_to_date(const std::string& stage, const std::string& key) const;

  /// Throws DependencyError when the stage has not run or an output is
  /// missing, StaleArtifactError when it ran under another key or an output
  /// changed since. `command` names the subcommand that rebuilds it.
  void require(const std::string& stage, const std::string& key, const std::string& command) const;

  void stamp(const std::string& stage, const std::string& key, const std::vector<std::string>& outputs) const;

  /// Runs `build` unless the stage is up to date (or `force`), then stamps
  /// the returned outputs. Returns false when skipped.
  bool run(const std::string& stage, const std::string& key, bool force,
           const std::function<std::vector<std::string>()>& build) const;

 private:
  struct Stamp {
    std::string key;
    std::map<std::string, std::string> outputs;
  };
  bool read_stamp(const std::string& stage, Stamp& out) const;

  std::filesystem::path run_dir_;
};

}  // namespace deformer::cli
