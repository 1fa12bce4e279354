#include "hmnas/dataset.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "hmnas/error.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

const char* split_name(SplitTag s) {
  switch (s) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "?";
}

void Dataset::compute_stats() {
  const int c = channels();
  const std::size_t plane = static_cast<std::size_t>(height()) * width();
  mean.assign(c, 0.0);
  stddev.assign(c, 0.0);
  const double n = static_cast<double>(size() * plane);
  for (std::size_t s = 0; s < size(); ++s)
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) mean[ch] += images[(s * c + ch) * plane + i];
  for (double& m : mean) m /= n;
  for (std::size_t s = 0; s < size(); ++s)
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = images[(s * c + ch) * plane + i] - mean[ch];
        stddev[ch] += d * d;
      }
  for (double& v : stddev) {
    v = std::sqrt(v / n);
    if (!(v > 1e-12)) v = 1.0;
  }
}

Batch Dataset::gather(std::span<const std::size_t> indices, SplitTag split) const {
  const int c = channels();
  const std::size_t plane = static_cast<std::size_t>(height()) * width();
  Batch b{Tensor({static_cast<int>(indices.size()), c, height(), width()}), {}, split,
          {indices.begin(), indices.end()}};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t s = indices[k];
    if (s >= size()) throw RangeError("sample index " + std::to_string(s) + " out of range");
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i)
        b.x[(k * c + ch) * plane + i] = (images[(s * c + ch) * plane + i] - mean[ch]) / stddev[ch];
    b.labels.push_back(labels[s]);
  }
  return b;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  const int c = channels();
  const std::size_t sample = static_cast<std::size_t>(c) * height() * width();
  d.images = Tensor({static_cast<int>(indices.size()), c, height(), width()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(images.storage().begin() + indices[k] * sample, sample, d.images.storage().begin() + k * sample);
    d.labels.push_back(labels[indices[k]]);
  }
  d.num_classes = num_classes;
  d.mean = mean;
  d.stddev = stddev;
  return d;
}

namespace {

constexpr int kSize = 16;

std::vector<int> balanced_labels(int count, int classes, Rng& rng) {
  std::vector<int> l(count);
  for (int i = 0; i < count; ++i) l[i] = i % classes;
  rng.shuffle(l.begin(), l.end());
  return l;
}

// Coloured Gaussian blob on a noisy background; the colour carries the class.
void render_blob(Tensor& img, int s, int label, Rng& rng) {
  static const double colour[2][3] = {{1.0, 0.3, 0.0}, {0.0, 0.3, 1.0}};
  const double cx = rng.uniform(3.0, 13.0), cy = rng.uniform(3.0, 13.0);
  const double r = rng.uniform(1.5, 3.0), amp = rng.uniform(0.8, 1.4);
  for (int c = 0; c < 3; ++c) {
    const double bg = 0.1 * rng.normal();
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        img.at4(s, c, y, x) = bg + 0.25 * rng.normal() + amp * colour[label][c] * std::exp(-d2 / (2 * r * r));
      }
  }
}

// Sinusoidal stripes whose orientation carries the class; colour is random.
void render_stripes(Tensor& img, int s, int label, Rng& rng) {
  static const double angle[4] = {0.0, 0.5, 0.25, 0.75};
  const double theta = angle[label] * std::numbers::pi;
  const double f = rng.uniform(0.2, 0.35), phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (int c = 0; c < 3; ++c) {
    const double gain = rng.uniform(0.5, 1.0);
    for (int y = 0; y < kSize; ++y)
      for (int x = 0; x < kSize; ++x) {
        const double v = std::sin(2.0 * std::numbers::pi * f * (x * ct + y * st) + phase);
        img.at4(s, c, y, x) = 0.8 * gain * v + 0.4 * rng.normal();
      }
  }
}

}  // namespace

Dataset make_synthetic(const std::string& name, std::uint64_t seed, int count) {
  if (count < 2) throw ConfigError("synthetic dataset needs at least 2 samples");
  Rng rng(derive_seed(seed, "synthetic:" + name));
  Dataset d;
  if (name == "blobs2") {
    d.num_classes = 2;
  } else if (name == "stripes4") {
    d.num_classes = 4;
  } else {
    throw ConfigError("unknown synthetic dataset '" + name + "' (expected blobs2 or stripes4)");
  }
  d.labels = balanced_labels(count, d.num_classes, rng);
  d.images = Tensor({count, 3, kSize, kSize});
  for (int s = 0; s < count; ++s) {
    if (d.num_classes == 2) {
      render_blob(d.images, s, d.labels[s], rng);
    } else {
      render_stripes(d.images, s, d.labels[s], rng);
    }
  }
  // stored pixels are f32-exact so the HMDS round trip is lossless
  for (double& v : d.images.data()) v = static_cast<double>(static_cast<float>(v));
  d.compute_stats();
  return d;
}

Dataset load_dataset(const std::string& path) {
  const std::string prefix = "synthetic:";
  if (path.rfind(prefix, 0) != 0) return read_hmds(path);
  std::vector<std::string> parts;
  std::size_t start = prefix.size();
  while (true) {
    const std::size_t colon = path.find(':', start);
    parts.push_back(path.substr(start, colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  if (parts.size() < 2 || parts.size() > 3) {
    throw ConfigError("synthetic dataset path must look like synthetic:<name>:<seed>[:<count>], got '" + path + "'");
  }
  try {
    const std::uint64_t seed = std::stoull(parts[1]);
    const int count = parts.size() == 3 ? std::stoi(parts[2]) : 512;
    return make_synthetic(parts[0], seed, count);
  } catch (const std::logic_error&) {
    throw ConfigError("bad number in synthetic dataset path '" + path + "'");
  }
}

namespace {

constexpr std::uint32_t kHmdsVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32(const char* what) {
    if (pos_ + 4 > b_.size()) throw FormatError(std::string("truncated HMDS data while reading ") + what, pos_);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_hmds(const Dataset& d, const std::string& path) {
  std::vector<std::uint8_t> out{'H', 'M', 'D', 'S'};
  put_u32(out, kHmdsVersion);
  put_u32(out, static_cast<std::uint32_t>(d.size()));
  put_u32(out, d.channels());
  put_u32(out, d.height());
  put_u32(out, d.width());
  put_u32(out, d.num_classes);
  const std::size_t sample = static_cast<std::size_t>(d.channels()) * d.height() * d.width();
  for (std::size_t s = 0; s < d.size(); ++s) {
    for (std::size_t i = 0; i < sample; ++i) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(d.images[s * sample + i])));
    }
    put_u32(out, static_cast<std::uint32_t>(d.labels[s]));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw PathError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw PathError("write to '" + path + "' failed");
}

Dataset read_hmds(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PathError("cannot open dataset '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_hmds(bytes);
}

Dataset parse_hmds(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || bytes[0] != 'H' || bytes[1] != 'M' || bytes[2] != 'D' || bytes[3] != 'S') {
    throw FormatError("bad magic, expected HMDS", 0);
  }
  Reader r(bytes.subspan(0));
  r.u32("magic");
  const std::size_t version_at = r.pos();
  const std::uint32_t version = r.u32("version");
  if (version != kHmdsVersion) {
    throw FormatError("unsupported HMDS version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32("count");
  const std::uint32_t c = r.u32("channels"), h = r.u32("height"), w = r.u32("width");
  const std::size_t classes_at = r.pos();
  const std::uint32_t classes = r.u32("classes");
  if (count == 0 || c == 0 || h == 0 || w == 0) throw FormatError("empty dimension in HMDS header", 8);
  if (classes < 2) throw FormatError("HMDS header declares fewer than 2 classes", classes_at);
  const std::uint64_t sample = static_cast<std::uint64_t>(c) * h * w;
  const std::uint64_t need = 28 + count * (sample + 1) * 4;
  if (bytes.size() < need) throw FormatError("truncated HMDS data, file ends early", bytes.size());
  if (bytes.size() > need) throw FormatError("trailing bytes after the last HMDS sample", need);

  Dataset d;
  d.num_classes = static_cast<int>(classes);
  d.images = Tensor({static_cast<int>(count), static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)});
  for (std::uint32_t s = 0; s < count; ++s) {
    for (std::uint64_t i = 0; i < sample; ++i) d.images[s * sample + i] = r.f32("pixel");
    const std::size_t at = r.pos();
    const std::uint32_t label = r.u32("label");
    if (label >= classes) throw FormatError("label " + std::to_string(label) + " out of range", at);
    d.labels.push_back(static_cast<int>(label));
  }
  d.compute_stats();
  return d;
}

}  // namespace hmnas
