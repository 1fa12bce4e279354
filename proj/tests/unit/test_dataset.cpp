#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "hmnas/dataset.hpp"
#include "hmnas/error.hpp"

using namespace hmnas;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "hmnas_test_dataset";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("synthetic blobs2 is a fixed 2-class set of 3x16x16 images") {
  const Dataset a = load_dataset("synthetic:blobs2:7");
  CHECK(a.size() == 512);
  CHECK(a.channels() == 3);
  CHECK(a.height() == 16);
  CHECK(a.width() == 16);
  CHECK(a.num_classes == 2);
  int ones = 0;
  for (int l : a.labels) ones += l;
  CHECK(ones == 256);
  const Dataset b = load_dataset("synthetic:blobs2:7");
  CHECK(a.images.storage() == b.images.storage());
  CHECK(a.labels == b.labels);
  const Dataset c = load_dataset("synthetic:blobs2:8");
  CHECK(a.images.storage() != c.images.storage());
}

TEST_CASE("stripes4 and explicit sample counts") {
  const Dataset s = load_dataset("synthetic:stripes4:1:64");
  CHECK(s.size() == 64);
  CHECK(s.num_classes == 4);
  CHECK_THROWS_AS(load_dataset("synthetic:nope:1"), ConfigError);
  CHECK_THROWS_AS(load_dataset("synthetic:blobs2"), ConfigError);
  CHECK_THROWS_AS(load_dataset("synthetic:blobs2:x"), ConfigError);
}

TEST_CASE("normalization statistics are stored and applied") {
  const Dataset d = load_dataset("synthetic:stripes4:3:128");
  std::vector<std::size_t> all(d.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Batch b = d.gather(all, SplitTag::train);
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    const std::size_t plane = 16 * 16;
    for (std::size_t s = 0; s < d.size(); ++s)
      for (std::size_t i = 0; i < plane; ++i) m += b.x[(s * 3 + c) * plane + i];
    m /= static_cast<double>(d.size() * plane);
    for (std::size_t s = 0; s < d.size(); ++s)
      for (std::size_t i = 0; i < plane; ++i) v += (b.x[(s * 3 + c) * plane + i] - m) * (b.x[(s * 3 + c) * plane + i] - m);
    v /= static_cast<double>(d.size() * plane);
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("HMDS write then read gives identical tensors") {
  const Dataset d = load_dataset("synthetic:blobs2:2:40");
  const fs::path p = tmp("rt.hmds");
  save_hmds(d, p.string());
  const Dataset r = load_dataset(p.string());
  CHECK(r.images.shape() == d.images.shape());
  CHECK(r.images.storage() == d.images.storage());
  CHECK(r.labels == d.labels);
  CHECK(r.num_classes == d.num_classes);
  CHECK(r.mean == d.mean);
  CHECK(r.stddev == d.stddev);
}

TEST_CASE("malformed HMDS files are format errors with offsets") {
  const Dataset d = load_dataset("synthetic:blobs2:2:4");
  const fs::path p = tmp("bad.hmds");
  save_hmds(d, p.string());
  auto bytes = slurp(p);

  auto bad = bytes;
  bad[0] = 'X';
  try {
    parse_hmds(bad);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(parse_hmds(truncated), FormatError);
  auto header_only = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10);
  CHECK_THROWS_AS(parse_hmds(header_only), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  try {
    parse_hmds(trailing);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == bytes.size());
  }

  auto label = bytes;
  label[label.size() - 4] = 9;
  try {
    parse_hmds(label);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == bytes.size() - 4);
  }
  CHECK_THROWS_AS(load_dataset((fs::temp_directory_path() / "hmnas_no_such_file.hmds").string()), PathError);
}
