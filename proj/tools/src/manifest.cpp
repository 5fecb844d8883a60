#include "manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "dcv/cli/commands.hpp"
#include "dcv/errors.hpp"
#include "dcv/parallel.hpp"
#include "dcv/tensor.hpp"

#ifndef DCV_VERSION
#define DCV_VERSION "unknown"
#endif

namespace dcv::cli {

std::string code_version() { return DCV_VERSION; }

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return os.str();
}

Manifest::Manifest(std::filesystem::path path, std::string command) : path_(std::move(path)) {
  doc_["command"] = std::move(command);
  doc_["code_version"] = code_version();
  doc_["config"] = nlohmann::json::object();
  doc_["inputs"] = nlohmann::json::array();
  doc_["outputs"] = nlohmann::json::array();
  doc_["extra"] = nlohmann::json::object();
  doc_["threads"] = num_threads();
  doc_["precision"] = storage_precision() == Precision::f32 ? "f32" : "f64";
  set_timing({});
}

void Manifest::add_input(const std::filesystem::path& path) {
  nlohmann::json entry{{"path", path.string()}};
  entry["sha256"] = std::filesystem::is_regular_file(path) ? nlohmann::json(sha256_file(path)) : nlohmann::json();
  doc_["inputs"].push_back(std::move(entry));
}

void Manifest::add_output(const std::filesystem::path& path) {
  doc_["outputs"].push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
}

void Manifest::set_timing(const PhaseTimes& t) {
  doc_["timing_ms"] = {{"encode", t.encode_ms},
                       {"cost_volume", t.cost_volume_ms},
                       {"decoder", t.decoder_ms},
                       {"upsample", t.upsample_ms},
                       {"total", t.total_ms}};
}

void Manifest::finish(int exit_code, const std::string& error) {
  doc_["exit_code"] = exit_code;
  doc_["status"] = exit_code == kExitOk ? "ok" : "error";
  if (!error.empty()) doc_["error"] = error;
}

void Manifest::write() const {
  std::ofstream os(path_);
  if (!os) throw FormatError("cannot write manifest " + path_.string());
  os << doc_.dump(2) << '\n';
}

int guarded(Manifest& manifest, std::ostream& err, const std::function<void()>& body) {
  int code = kExitOk;
  std::string message;
  try {
    body();
  } catch (const NumericalError& e) {
    code = kExitNumerical;
    message = e.what();
  } catch (const std::exception& e) {
    code = kExitUsage;
    message = e.what();
  }
  if (!message.empty()) err << "error: " << message << '\n';
  manifest.finish(code, message);
  try {
    manifest.write();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    if (code == kExitOk) code = kExitUsage;
  }
  return code;
}

}  // namespace dcv::cli
