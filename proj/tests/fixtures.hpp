#pragma once
// Shared test fixtures.  The trained detector is expensive, so test binaries
// cache its weights on disk keyed by the training configuration; reruns and
// sibling binaries load instead of retraining.

#include <cstdlib>
#include <filesystem>
#include <memory>

#include "patchsmith/toy_detector.hpp"

namespace testfix {

inline std::filesystem::path cache_dir() {
  if (const char* env = std::getenv("PATCHSMITH_CACHE"); env && *env)
    return std::filesystem::path(env);
  return std::filesystem::temp_directory_path() / "patchsmith_cache";
}

// Process-wide trained detector with default training settings.
inline std::shared_ptr<patchsmith::ToyDetector> shared_toy_detector() {
  static std::shared_ptr<patchsmith::ToyDetector> det = [] {
    std::filesystem::create_directories(cache_dir());
    return patchsmith::load_or_train_toy_detector({}, cache_dir());
  }();
  return det;
}

}  // namespace testfix
