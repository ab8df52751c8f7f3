#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "ctseg/synth.hpp"
#include "ctseg/volume.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("ctseg_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const noexcept { return path_; }

private:
  std::filesystem::path path_;
};

inline ctseg::Phantom small_phantom(std::uint64_t seed, std::uint32_t n = 24, std::uint32_t nz = 8) {
  ctseg::PhantomConfig cfg;
  cfg.dims = {n, n, nz};
  return ctseg::generate_phantom(cfg, seed);
}

}  // namespace testing
