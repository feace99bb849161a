#pragma once

// Directory ingestion and export. Labeled layout: <root>/real/*.png|jpg and
// <root>/fake/*.png|jpg. Unlabeled layout: flat <root>/*.png|jpg. Files are
// visited in lexicographic order so datasets are reproducible.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "biadapt/data.hpp"
#include "biadapt/imageio.hpp"

namespace biadapt::io {

namespace fs = std::filesystem;

namespace detail {

inline bool image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && image_extension(e.path()))
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

inline Image resize_image(const Image& src, int side) {
  if (src.h == side && src.w == side) return src;
  Image out(side, side);
  double sy = side > 1 ? double(src.h - 1) / double(side - 1) : 0.0;
  double sx = side > 1 ? double(src.w - 1) / double(side - 1) : 0.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = bilinear_sample(src, y * sy, x * sx, c);
  return out;
}

}  // namespace detail

inline DomainDataset load_dataset_dir(const std::string& root, bool labeled,
                                      int side,
                                      const std::string& domain_id = "") {
  fs::path rootp(root);
  if (!fs::is_directory(rootp))
    throw IngestionError("missing dataset directory: " + root);
  DomainDataset d;
  d.domain_id = domain_id.empty() ? rootp.filename().string() : domain_id;
  d.labeled = labeled;
  if (labeled) {
    for (const auto& e : fs::directory_iterator(rootp)) {
      if (!e.is_directory()) continue;
      std::string name = e.path().filename().string();
      if (name != "real" && name != "fake")
        throw IngestionError("unknown subdirectory in labeled dataset: " +
                             e.path().string());
    }
    fs::path realdir = rootp / "real";
    fs::path fakedir = rootp / "fake";
    if (!fs::is_directory(realdir))
      throw IngestionError("missing dataset directory: " + realdir.string());
    if (!fs::is_directory(fakedir))
      throw IngestionError("missing dataset directory: " + fakedir.string());
    for (const auto& p : detail::list_images(realdir)) {
      Image img = detail::resize_image(read_image(p.string()), side);
      clamp01(img);
      d.train.emplace_back(std::move(img), 0, d.domain_id);
    }
    for (const auto& p : detail::list_images(fakedir)) {
      Image img = detail::resize_image(read_image(p.string()), side);
      clamp01(img);
      d.train.emplace_back(std::move(img), 1, d.domain_id);
    }
    if (d.train.empty())
      throw IngestionError("no images found under " + root);
  } else {
    for (const auto& p : detail::list_images(rootp)) {
      Image img = detail::resize_image(read_image(p.string()), side);
      clamp01(img);
      d.train_u.push_back(UnlabeledSample{std::move(img), d.domain_id});
    }
    if (d.train_u.empty())
      throw IngestionError("no images found under " + root);
  }
  return d;
}

inline void export_dataset_dir(const DomainDataset& d, const std::string& root) {
  fs::path rootp(root);
  std::error_code ec;
  fs::create_directories(rootp, ec);
  if (ec) throw IoError("cannot create " + root + ": " + ec.message());
  auto name_for = [](std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04zu.png", i);
    return std::string(buf);
  };
  if (d.labeled) {
    fs::create_directories(rootp / "real", ec);
    fs::create_directories(rootp / "fake", ec);
    if (ec) throw IoError("cannot create class dirs under " + root);
    std::size_t nr = 0, nf = 0;
    auto write_split = [&](const std::vector<LabeledSample>& samples) {
      for (const auto& s : samples) {
        if (s.label() == 0)
          write_png((rootp / "real" / name_for(nr++)).string(), s.image);
        else
          write_png((rootp / "fake" / name_for(nf++)).string(), s.image);
      }
    };
    write_split(d.train);
    write_split(d.test);
  } else {
    std::size_t n = 0;
    for (const auto& s : d.train_u)
      write_png((rootp / name_for(n++)).string(), s.image);
    for (const auto& s : d.test_u)
      write_png((rootp / name_for(n++)).string(), s.image);
  }
}

}  // namespace biadapt::io
