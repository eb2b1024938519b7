#include "ma3/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "ma3/errors.hpp"

namespace fs = std::filesystem;

namespace ma3 {

std::size_t ClassDataset::num_images() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.images.size();
  return n;
}

void ClassDataset::validate() const {
  for (const auto& c : classes) {
    for (const auto& img : c.images) {
      if (img.height != height || img.width != width || img.channels != 1)
        throw ContractError("dataset: image in class '" + c.id + "' has the wrong shape");
      if (img.values.size() > 0 && (img.values.minCoeff() < 0.0f || img.values.maxCoeff() > 1.0f))
        throw ContractError("dataset: image in class '" + c.id + "' has values outside [0, 1]");
    }
  }
}

GrayImage read_png_gray(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read image '" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode image '" + path.string() + "': " + msg);
  }
  GrayImage img(static_cast<int>(image.height), static_cast<int>(image.width));
  for (std::size_t i = 0; i < buffer.size(); ++i) img.values[static_cast<Eigen::Index>(i)] = buffer[i] / 255.0f;
  return img;
}

void write_png_gray(const fs::path& path, const GrayImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(static_cast<std::size_t>(img.pixels()));
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const float v = std::clamp(img.values[static_cast<Eigen::Index>(i)], 0.0f, 1.0f);
    buffer[i] = static_cast<png_byte>(std::lround(v * 255.0f));
  }
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write image '" + path.string() + "': " + image.message);
  }
}

ClassDataset load_image_directory(const fs::path& root, const LoadOptions& opt) {
  if (!fs::is_directory(root)) throw IoError("dataset directory '" + root.string() + "' does not exist");

  std::map<std::string, std::vector<fs::path>> by_dir;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext != ".png") continue;
    by_dir[fs::relative(entry.path().parent_path(), root).generic_string()].push_back(entry.path());
  }
  if (by_dir.empty()) throw IoError("dataset directory '" + root.string() + "' contains no PNG images");

  ClassDataset ds;
  ds.source = "directory:" + root.string();
  ds.height = opt.height;
  ds.width = opt.width;
  for (auto& [rel, files] : by_dir) {
    std::sort(files.begin(), files.end());
    if (static_cast<int>(files.size()) < opt.min_images_per_class) {
      throw ConfigError("class '" + rel + "' has " + std::to_string(files.size()) + " images, fewer than the " +
                        std::to_string(opt.min_images_per_class) + " an episode needs");
    }
    ImageClass cls;
    cls.id = rel;
    for (const auto& f : files) {
      GrayImage img = read_png_gray(f);
      if (img.height != opt.height || img.width != opt.width) img = resize_bilinear(img, opt.height, opt.width);
      img.values = img.values.cwiseMax(0.0f).cwiseMin(1.0f);
      if (opt.invert) img.values = 1.0f - img.values;
      cls.images.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(cls));
  }
  return ds;
}

void export_dataset(const ClassDataset& ds, const fs::path& root) {
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    const auto& cls = ds.classes[c];
    fs::path dir = root / fs::path(cls.id);
    if (fs::path(cls.id).parent_path().empty()) dir = root / "classes" / cls.id;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < cls.images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.png", i);
      write_png_gray(dir / name, cls.images[i]);
    }
  }
}

namespace {

struct Pt {
  double x, y;
};

double segment_distance(Pt p, Pt a, Pt b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

// Anti-aliased polyline: intensity falls from 1 to 0 over one pixel beyond the half width.
GrayImage render_polyline(const std::vector<Pt>& pts, int size, double half_width) {
  GrayImage img(size, size);
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      const Pt p{double(j), double(i)};
      double d = 1e9;
      for (std::size_t s = 0; s + 1 < pts.size(); ++s) d = std::min(d, segment_distance(p, pts[s], pts[s + 1]));
      img.at(0, i, j) = static_cast<float>(std::clamp(half_width + 0.5 - d, 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace

ClassDataset make_synthetic(int n_classes, int images_per_class, int size, std::uint64_t seed) {
  if (n_classes < 2) throw ContractError("make_synthetic: need at least 2 classes");
  if (images_per_class < 1 || size < 8) throw ContractError("make_synthetic: bad image count or size");

  constexpr int kLattice = 5;
  const double margin = size * 0.2;
  const double step = (size - 1 - 2 * margin) / (kLattice - 1);
  const double half_width = std::max(0.5, size / 28.0);
  const double center = (size - 1) / 2.0;

  ClassDataset ds;
  ds.source = "synthetic:seed=" + std::to_string(seed);
  ds.height = ds.width = size;
  for (int c = 0; c < n_classes; ++c) {
    Engine cg(derive_seed(seed, static_cast<std::uint64_t>(c)));
    const int segments = 3 + static_cast<int>(uniform_index(cg, 4));
    std::vector<std::pair<int, int>> nodes;
    nodes.emplace_back(static_cast<int>(uniform_index(cg, kLattice)), static_cast<int>(uniform_index(cg, kLattice)));
    while (static_cast<int>(nodes.size()) < segments + 1) {
      const std::pair<int, int> next{static_cast<int>(uniform_index(cg, kLattice)),
                                     static_cast<int>(uniform_index(cg, kLattice))};
      if (next != nodes.back()) nodes.push_back(next);
    }

    ImageClass cls;
    char id[32];
    std::snprintf(id, sizeof id, "synthetic/c%04d", c);
    cls.id = id;
    for (int k = 0; k < images_per_class; ++k) {
      Engine ig(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(c)), 0x1000000ULL + static_cast<std::uint64_t>(k)));
      const double angle = uniform(ig, -10.0, 10.0) * std::numbers::pi / 180.0;
      const double ca = std::cos(angle), sa = std::sin(angle);
      std::vector<Pt> pts;
      for (const auto& [gx, gy] : nodes) {
        const double jx = uniform(ig, -1.0, 1.0);
        const double jy = uniform(ig, -1.0, 1.0);
        const double x = margin + gx * step + jx - center;
        const double y = margin + gy * step + jy - center;
        pts.push_back({center + ca * x - sa * y, center + sa * x + ca * y});
      }
      cls.images.push_back(render_polyline(pts, size, half_width));
    }
    ds.classes.push_back(std::move(cls));
  }
  return ds;
}

ClassDataset make_toy(int n_classes, int images_per_class, int size, std::uint64_t seed) {
  if (n_classes < 2) throw ContractError("make_toy: need at least 2 classes");
  constexpr int kBlocks = 4;
  ClassDataset ds;
  ds.source = "toy:seed=" + std::to_string(seed);
  ds.height = ds.width = size;
  for (int c = 0; c < n_classes; ++c) {
    Engine cg(derive_seed(seed ^ 0x70790000ULL, static_cast<std::uint64_t>(c)));
    std::vector<float> pattern(kBlocks * kBlocks);
    for (auto& p : pattern) p = uniform01(cg) < 0.5 ? 0.15f : 0.85f;
    ImageClass cls;
    cls.id = "toy/c" + std::to_string(c);
    for (int k = 0; k < images_per_class; ++k) {
      GrayImage img(size, size);
      for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
          const float base = pattern[(i * kBlocks / size) * kBlocks + j * kBlocks / size];
          img.at(0, i, j) = std::clamp(base + static_cast<float>(uniform(cg, -0.1, 0.1)), 0.0f, 1.0f);
        }
      cls.images.push_back(std::move(img));
    }
    ds.classes.push_back(std::move(cls));
  }
  return ds;
}

void SplitSpec::validate(std::size_t num_classes) const {
  std::set<int> seen;
  for (const auto* part : {&train, &val, &test}) {
    for (int c : *part) {
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
        throw ContractError("split: class index " + std::to_string(c) + " out of range");
      if (!seen.insert(c).second)
        throw ContractError("split: class index " + std::to_string(c) + " appears in more than one split");
    }
  }
}

SplitSpec contiguous_split(int n_train, int n_val, int n_test) {
  SplitSpec s;
  int c = 0;
  for (int i = 0; i < n_train; ++i) s.train.push_back(c++);
  for (int i = 0; i < n_val; ++i) s.val.push_back(c++);
  for (int i = 0; i < n_test; ++i) s.test.push_back(c++);
  return s;
}

SplitSpec random_split(std::size_t num_classes, int n_train, int n_val, int n_test, std::uint64_t seed) {
  if (static_cast<std::size_t>(n_train + n_val + n_test) > num_classes)
    throw ConfigError("split: requested " + std::to_string(n_train + n_val + n_test) + " classes but only " +
                      std::to_string(num_classes) + " exist");
  std::vector<int> order(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) order[i] = static_cast<int>(i);
  Engine g(seed);
  shuffle(order, g);
  SplitSpec s;
  s.seed = seed;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.begin() + n_train + n_val + n_test);
  return s;
}

void Episode::validate() const {
  const auto n = static_cast<std::size_t>(n_way);
  if (support.size() != n * k_shot || support_labels.size() != support.size())
    throw ContractError("episode: support size is not n_way * k_shot");
  if (query.size() != n * q_query || query_labels.size() != query.size())
    throw ContractError("episode: query size is not n_way * q_query");
  std::vector<int> sc(n, 0), qc(n, 0);
  for (int l : support_labels) {
    if (l < 0 || l >= n_way) throw ContractError("episode: support label out of range");
    ++sc[l];
  }
  for (int l : query_labels) {
    if (l < 0 || l >= n_way) throw ContractError("episode: query label out of range");
    ++qc[l];
  }
  for (std::size_t k = 0; k < n; ++k)
    if (sc[k] != k_shot || qc[k] != q_query) throw ContractError("episode: unbalanced classes");
  if (!support_ids.empty() || !query_ids.empty()) {
    std::set<std::pair<int, int>> s(support_ids.begin(), support_ids.end());
    for (const auto& id : query_ids)
      if (s.count(id)) throw ContractError("episode: an image appears in both support and query");
  }
}

Episode sample_episode(const ClassDataset& ds, std::span<const int> split, int n_way, int k_shot, int q_query,
                       Engine& rng) {
  if (n_way < 1 || k_shot < 1 || q_query < 1) throw ContractError("sample_episode: sizes must be positive");
  if (static_cast<int>(split.size()) < n_way)
    throw ContractError("sample_episode: split has " + std::to_string(split.size()) + " classes, need " +
                        std::to_string(n_way));
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_query = q_query;
  const auto classes = sample_without_replacement(static_cast<int>(split.size()), n_way, rng);
  for (int label = 0; label < n_way; ++label) {
    const int c = split[static_cast<std::size_t>(classes[label])];
    const auto& imgs = ds.classes.at(static_cast<std::size_t>(c)).images;
    if (static_cast<int>(imgs.size()) < k_shot + q_query)
      throw ContractError("sample_episode: class '" + ds.classes[c].id + "' has too few images");
    const auto picks = sample_without_replacement(static_cast<int>(imgs.size()), k_shot + q_query, rng);
    for (int i = 0; i < k_shot + q_query; ++i) {
      const int idx = picks[i];
      if (i < k_shot) {
        ep.support.push_back(imgs[idx]);
        ep.support_labels.push_back(label);
        ep.support_ids.emplace_back(c, idx);
      } else {
        ep.query.push_back(imgs[idx]);
        ep.query_labels.push_back(label);
        ep.query_ids.emplace_back(c, idx);
      }
    }
  }
  return ep;
}

}  // namespace ma3
