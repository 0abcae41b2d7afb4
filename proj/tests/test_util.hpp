#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

namespace test {

/// Fresh per-process directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("densedit_test_" + std::to_string(::getpid())) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::filesystem::path data_dir() { return DENSEDIT_TEST_DATA; }

}  // namespace test
