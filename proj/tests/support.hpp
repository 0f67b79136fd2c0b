#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "dnas/random.hpp"
#include "dnas/search_space.hpp"
#include "dnas/tensor.hpp"

namespace dnas::testing {

/// 8x8 input, two searchable layers (one of them can hold skip), 3 classes.
inline SpaceConfig tiny_space_config() {
  SpaceConfig c;
  c.input_resolution = 8;
  c.channel_scale = 1.0;
  c.num_classes = 3;
  c.head_width = 16;
  c.stages = {{4, 1, 2, false}, {4, 1, 1, true}, {8, 1, 2, true}};
  return c;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(scale * normal01(rng));
  return t;
}

/// Fresh scratch directory, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("dnas_test_" + std::to_string(rd()) + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace dnas::testing
