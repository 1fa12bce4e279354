#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hmnas/tensor.hpp"

namespace hmnas {

enum class SplitTag { train, val, test };
const char* split_name(SplitTag s);

// A minibatch remembers where it came from so training loops can assert that
// each optimizer only ever sees its own split.
struct Batch {
  Tensor x;
  std::vector<int> labels;
  SplitTag split;
  std::vector<std::size_t> indices;
};

struct Dataset {
  Tensor images;  // (N, C, H, W), raw pixels
  std::vector<int> labels;
  int num_classes = 0;
  std::vector<double> mean, stddev;  // per channel, applied by gather()

  std::size_t size() const { return labels.size(); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }

  void compute_stats();
  // Normalized copy of the selected samples.
  Batch gather(std::span<const std::size_t> indices, SplitTag split) const;
  // Keeps the parent's normalization statistics.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// `synthetic:<name>:<seed>[:<count>]` builds a generated task (blobs2,
/// stripes4); anything else is read as an HMDS file.
Dataset load_dataset(const std::string& path);
Dataset make_synthetic(const std::string& name, std::uint64_t seed, int count = 512);

// HMDS layout: "HMDS", u32 version, u32 count, u32 C, H, W, u32 classes,
// then per sample C*H*W little-endian f32 pixels and a u32 label.
void save_hmds(const Dataset& d, const std::string& path);
Dataset read_hmds(const std::string& path);
Dataset parse_hmds(std::span<const std::uint8_t> bytes);

}  // namespace hmnas
