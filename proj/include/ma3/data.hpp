#pragma once

// Datasets of single-channel class images and N-way K-shot episode sampling.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ma3/rng.hpp"
#include "ma3/sampler.hpp"

namespace ma3 {

using GrayImage = Image<float>;

struct ImageClass {
  std::string id;  // relative path for loaded data, "synthetic/cNNNN" for generated data
  std::vector<GrayImage> images;
};

struct ClassDataset {
  std::vector<ImageClass> classes;
  std::string source;
  int height = 0;
  int width = 0;

  std::size_t num_classes() const { return classes.size(); }
  std::size_t num_images() const;
  /// Throws ContractError unless every image has the dataset size and values in [0, 1].
  void validate() const;
};

struct LoadOptions {
  int height = 28;
  int width = 28;
  bool invert = false;
  int min_images_per_class = 1;
};

/// Reads a single-channel PNG as values in [0, 1] (color inputs are converted to gray).
GrayImage read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const GrayImage& img);

/// Every directory under `root` that directly contains .png files is one class.
/// Classes are ordered lexicographically by relative path, images by file name.
ClassDataset load_image_directory(const std::filesystem::path& root, const LoadOptions& opt);

/// Writes `<root>/<alphabet>/<character>/<index>.png`, the layout load_image_directory reads.
void export_dataset(const ClassDataset& ds, const std::filesystem::path& root);

/// Stroke-glyph classes: each class is a seeded path of 3-6 connected segments on a
/// coarse lattice; instances jitter endpoints by up to 1 px and rotate by up to 10 degrees.
ClassDataset make_synthetic(int n_classes, int images_per_class, int size, std::uint64_t seed);

/// Linearly separable toy classes: a fixed random block pattern per class plus
/// small per-instance noise.
ClassDataset make_toy(int n_classes, int images_per_class, int size, std::uint64_t seed);

/// Disjoint class-index partitions of one dataset.
struct SplitSpec {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  std::uint64_t seed = 0;

  /// Throws ContractError on overlap or out-of-range indices.
  void validate(std::size_t num_classes) const;
};

/// Consecutive blocks of the class list: [0, n_train), [n_train, n_train + n_val), ...
SplitSpec contiguous_split(int n_train, int n_val, int n_test);

/// Seeded random partition of `num_classes` classes into the three counts.
SplitSpec random_split(std::size_t num_classes, int n_train, int n_val, int n_test, std::uint64_t seed);

struct Episode {
  int n_way = 0;
  int k_shot = 0;
  int q_query = 0;
  std::vector<GrayImage> support;
  std::vector<int> support_labels;
  std::vector<GrayImage> query;
  std::vector<int> query_labels;
  // (dataset class index, image index) of every item, support first then query.
  std::vector<std::pair<int, int>> support_ids;
  std::vector<std::pair<int, int>> query_ids;

  /// Throws ContractError if the size, label or disjointness invariants fail.
  void validate() const;
};

/// Draws n_way classes from `split` and k_shot + q_query distinct images per
/// class, all without replacement; labels are 0..n_way-1 in draw order.
Episode sample_episode(const ClassDataset& ds, std::span<const int> split, int n_way, int k_shot,
                       int q_query, Engine& rng);

}  // namespace ma3
