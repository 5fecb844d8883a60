#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>

#include "json.hpp"

#include "dcv/decoder.hpp"

namespace dcv::cli {

/// JSON record of one command invocation.
class Manifest {
 public:
  Manifest(std::filesystem::path path, std::string command);

  nlohmann::json& config() { return doc_["config"]; }
  void set_seed(std::uint64_t seed) { doc_["seed"] = seed; }
  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
  void set_timing(const PhaseTimes& t);
  nlohmann::json& extra() { return doc_["extra"]; }
  void finish(int exit_code, const std::string& error);
  void write() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  nlohmann::json doc_;
};

/// Runs body, maps exceptions to exit codes and always writes the manifest.
int guarded(Manifest& manifest, std::ostream& err, const std::function<void()>& body);

std::string code_version();

}  // namespace dcv::cli
