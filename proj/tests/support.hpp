#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unistd.h>

#include <doctest.h>
#include <json.hpp>

#include "usbb/blockdev.hpp"
#include "usbb/bytes.hpp"
#include "usbb/error.hpp"

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "usbb-test-XXXXXX").string();
    if (::mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

inline usbb::Bytes random_bytes(std::mt19937_64& rng, std::size_t n) {
  usbb::Bytes out(n);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    std::uint64_t v = rng();
    for (int k = 0; k < 8; ++k) out[i + k] = static_cast<std::uint8_t>(v >> (8 * k));
  }
  std::uint64_t v = rng();
  for (; i < n; ++i, v >>= 8) out[i] = static_cast<std::uint8_t>(v);
  return out;
}

inline std::uint64_t fnv1a(usbb::ByteSpan data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : data) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct CommandResult {
  int status = -1;
  std::string output;
};

inline CommandResult run(const std::string& command) {
  CommandResult r;
  FILE* pipe = ::popen((command + " 2>&1").c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  int rc = ::pclose(pipe);
  r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return r;
}

inline std::string reference(const std::string& args) {
  return std::string(USBB_PYTHON) + " " + USBB_FAT_REFERENCE + " " + args;
}

inline void write_host_file(const std::string& path, usbb::ByteSpan data) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw std::runtime_error("cannot write " + path);
  std::fwrite(data.data(), 1, data.size(), f);
  std::fclose(f);
}

inline nlohmann::json reference_list(const std::string& image) {
  auto r = run(reference("list " + image));
  REQUIRE_MESSAGE(r.status == 0, r.output);
  return nlohmann::json::parse(r.output);
}

// The error code raised by fn, failing the test if nothing is thrown.
template <typename Fn>
usbb::ErrorCode error_of(Fn&& fn) {
  try {
    fn();
  } catch (const usbb::Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return usbb::ErrorCode::kInvalidArgument;
}

}  // namespace testsupport
