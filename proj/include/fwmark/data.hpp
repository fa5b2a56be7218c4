/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fwmark/bytes.hpp"
#include "fwmark/errors.hpp"
#include "fwmark/rng.hpp"
#include "fwmark/tensor.hpp"

namespace fwmark {

// Images normalized to [-1,1] plus integer labels in [0, classes).
struct Dataset {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string name;
  std::string split = "all";

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const {
    return Shape(images.shape().begin() + 1, images.shape().end());
  }
  std::size_t sample_numel() const { return images.numel() / size(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }
};

inline float normalize_pixel(std::uint8_t v) {
  return static_cast<float>(v) / 127.5f - 1.0f;
}

inline std::uint8_t denormalize_pixel(float x) {
  const float v = std::round((std::clamp(x, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(v);
}

namespace detail {

inline std::uint32_t read_be32(ByteReader& r) {
  auto b = r.take(4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline Dataset parse_idx(std::span<const std::uint8_t> image_bytes,
                         std::span<const std::uint8_t> label_bytes) {
  ByteReader ir(image_bytes, "idx images");
  if (detail::read_be32(ir) != kIdxImagesMagic)
    throw FormatError("idx images: bad magic (expected 0x00000803)");
  const std::size_t n = detail::read_be32(ir);
  const std::size_t rows = detail::read_be32(ir);
  const std::size_t cols = detail::read_be32(ir);

  ByteReader lr(label_bytes, "idx labels");
  if (detail::read_be32(lr) != kIdxLabelsMagic)
    throw FormatError("idx labels: bad magic (expected 0x00000801)");
  const std::size_t nl = detail::read_be32(lr);
  if (nl != n)
    throw FormatError("idx: " + std::to_string(n) + " images but " +
                      std::to_string(nl) + " labels");
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("idx: empty dataset");

  auto pixels = ir.take(n * rows * cols);
  auto raw_labels = lr.take(n);

  Dataset ds;
  ds.images = Tensor(Shape{n, 1, rows, cols});
  std::transform(pixels.begin(), pixels.end(), ds.images.data().begin(),
                 normalize_pixel);
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  ds.classes = std::max<std::size_t>(
      2, static_cast<std::size_t>(
             *std::max_element(ds.labels.begin(), ds.labels.end())) + 1);
  ds.name = "idx";
  return ds;
}

inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  Dataset ds = parse_idx(read_file(images_path), read_file(labels_path));
  ds.name = images_path.parent_path().filename().string();
  return ds;
}

// Directory holding train-images-idx3-ubyte / train-labels-idx1-ubyte.
inline Dataset load_idx_dir(const std::filesystem::path& dir) {
  return load_idx(dir / "train-images-idx3-ubyte",
                  dir / "train-labels-idx1-ubyte");
}

// Class c is a smoothed random template plus per-sample Gaussian noise,
// clipped to [-1,1]. Samples are stored class-major.
inline Dataset synth_blobs(std::size_t classes, std::size_t per_class,
                           const Shape& shape, std::uint64_t seed,
                           double noise = 0.35) {
  if (classes < 2) throw ConfigError("synth_blobs: need at least 2 classes");
  if (per_class == 0) throw ConfigError("synth_blobs: per_class must be > 0");
  if (shape.size() != 3) throw ConfigError("synth_blobs: shape must be [C,H,W]");
  const std::size_t ch = shape[0], h = shape[1], w = shape[2];
  const std::size_t numel = ch * h * w;

  Rng rng(seed);
  std::vector<std::vector<float>> templates(classes);
  for (auto& t : templates) {
    std::vector<double> img(numel);
    for (double& v : img) v = rng.uniform(-1.0, 1.0);
    for (int pass = 0; pass < 2; ++pass) {
      std::vector<double> blurred(numel, 0.0);
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            int cnt = 0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const long yy = long(y) + dy, xx = long(x) + dx;
                if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w)) continue;
                acc += img[(c * h + std::size_t(yy)) * w + std::size_t(xx)];
                ++cnt;
              }
            blurred[(c * h + y) * w + x] = acc / cnt;
          }
      img.swap(blurred);
    }
    double mu = 0, var = 0;
    for (double v : img) mu += v;
    mu /= double(numel);
    for (double v : img) var += (v - mu) * (v - mu);
    const double sd = std::sqrt(var / double(numel));
    t.resize(numel);
    for (std::size_t i = 0; i < numel; ++i)
      t[i] = static_cast<float>(0.5 * (img[i] - mu) / (sd > 0 ? sd : 1.0));
  }

  Dataset ds;
  const std::size_t n = classes * per_class;
  ds.images = Tensor(Shape{n, ch, h, w});
  ds.labels.resize(n);
  ds.classes = classes;
  ds.name = "synthetic";
  float* out = ds.images.ptr();
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t s = 0; s < per_class; ++s) {
      const std::size_t idx = c * per_class + s;
      ds.labels[idx] = static_cast<int>(c);
      for (std::size_t i = 0; i < numel; ++i) {
        const double v = templates[c][i] + noise * rng.normal();
        out[idx * numel + i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
    }
  }
  return ds;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx,
                      std::string split_name = "subset") {
  if (idx.empty()) throw DataError("subset: empty index list");
  Shape s = ds.images.shape();
  s[0] = idx.size();
  Dataset out;
  out.images = Tensor(s);
  out.labels.reserve(idx.size());
  out.classes = ds.classes;
  out.name = ds.name;
  out.split = std::move(split_name);
  const std::size_t per = ds.sample_numel();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.size()) throw IndexError("subset: index out of range");
    std::copy_n(ds.images.ptr() + idx[i] * per, per, out.images.ptr() + i * per);
    out.labels.push_back(ds.labels[idx[i]]);
  }
  return out;
}

inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.sample_shape() != b.sample_shape() || a.classes != b.classes)
    throw DataError("concat: incompatible datasets");
  Shape s = a.images.shape();
  s[0] = a.size() + b.size();
  Dataset out;
  out.images = Tensor(s);
  std::copy(a.images.data().begin(), a.images.data().end(),
            out.images.data().begin());
  std::copy(b.images.data().begin(), b.images.data().end(),
            out.images.data().begin() + static_cast<long>(a.images.numel()));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.classes = a.classes;
  out.name = a.name;
  out.split = a.split;
  return out;
}

// Seeded random partition; `fraction` of the samples go to train.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction,
                                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ConfigError("split: fraction must lie in (0,1)");
  const auto n_train =
      static_cast<std::size_t>(std::llround(fraction * double(ds.size())));
  if (n_train == 0 || n_train == ds.size())
    throw DataError("split: fraction leaves one side empty");
  Rng rng(seed);
  std::vector<std::size_t> perm = rng.permutation(ds.size());
  std::vector<std::size_t> tr(perm.begin(), perm.begin() + long(n_train));
  std::vector<std::size_t> te(perm.begin() + long(n_train), perm.end());
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  Dataset train = subset(ds, tr, "train");
  for (std::size_t c = 0; auto count : train.class_counts()) {
    if (count == 0)
      throw DataError("split: class " + std::to_string(c) +
                      " has no training samples");
    ++c;
  }
  return {std::move(train), subset(ds, te, "test")};
}

// Seed-deterministic shuffled mini-batches; the final partial batch is kept.
class Batcher {
 public:
  Batcher(std::size_t size, std::size_t batch, std::uint64_t seed)
      : size_(size), batch_(batch), seed_(seed) {
    if (batch == 0) throw ConfigError("batch size must be positive");
  }

  std::size_t batches_per_epoch() const { return (size_ + batch_ - 1) / batch_; }

  std::vector<std::vector<std::size_t>> epoch(std::size_t e) const {
    Rng rng(mix_seed(seed_, e));
    std::vector<std::size_t> perm = rng.permutation(size_);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < size_; i += batch_)
      out.emplace_back(perm.begin() + long(i),
                       perm.begin() + long(std::min(size_, i + batch_)));
    return out;
  }

 private:
  std::size_t size_, batch_;
  std::uint64_t seed_;
};

// Copies the selected samples into a contiguous batch tensor.
inline std::pair<Tensor, std::vector<int>> gather(
    const Dataset& ds, std::span<const std::size_t> idx) {
  const std::size_t per = ds.sample_numel();
  Shape s = ds.images.shape();
  s[0] = idx.size();
  Tensor x(s);
  std::vector<int> y(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(ds.images.ptr() + idx[i] * per, per, x.ptr() + i * per);
    y[i] = ds.labels[idx[i]];
  }
  return {std::move(x), std::move(y)};
}

// Rows [begin, end) of a batched tensor.
inline Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t per = t.numel() / t.dim(0);
  Shape s = t.shape();
  s[0] = end - begin;
  return Tensor(s, std::vector<float>(t.data().begin() + long(begin * per),
                                      t.data().begin() + long(end * per)));
}

}  // namespace fwmark
