#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "biadapt/dataset_io.hpp"
#include "biadapt/synth.hpp"

using biadapt::DomainDataset;
using biadapt::Image;
using biadapt::LabelAudit;
using biadapt::Rng;
namespace synth = biadapt::synth;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint64_t> dataset_hashes(const DomainDataset& d) {
  std::vector<std::uint64_t> out;
  for (const auto& s : d.train) out.push_back(biadapt::content_hash(s.image));
  for (const auto& s : d.test) out.push_back(biadapt::content_hash(s.image));
  return out;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generate_domain is deterministic") {
  auto a = synth::generate_domain(synth::ManipKind::patch_swap, 7, 8, 8, 32);
  auto b = synth::generate_domain(synth::ManipKind::patch_swap, 7, 8, 8, 32);
  REQUIRE(a.n() == b.n());
  CHECK(dataset_hashes(a) == dataset_hashes(b));
  auto c = synth::generate_domain(synth::ManipKind::patch_swap, 8, 8, 8, 32);
  CHECK(dataset_hashes(a) != dataset_hashes(c));
}

TEST_CASE("generate_domain counts and labels") {
  auto d = synth::generate_domain(synth::ManipKind::patch_swap, 7, 8, 8, 32);
  REQUIRE(d.n() == 16);
  REQUIRE(d.labeled);
  int real = 0, fake = 0;
  for (const auto& s : d.train) (s.label() == 0 ? real : fake)++;
  CHECK(real == 8);
  CHECK(fake == 8);
  for (const auto& s : d.train) {
    CHECK(s.image.h == 32);
    CHECK(s.image.w == 32);
    for (double v : s.image.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("all manipulation kinds generate") {
  for (auto kind :
       {synth::ManipKind::patch_swap, synth::ManipKind::local_warp,
        synth::ManipKind::region_noise, synth::ManipKind::full_synth}) {
    auto d = synth::generate_domain(kind, 3, 4, 4, 32);
    CHECK(d.n() == 8);
    CHECK(d.domain_id == synth::manip_kind_name(kind));
  }
}

TEST_CASE("generate_domain argument errors") {
  CHECK_THROWS_AS(synth::parse_manip_kind("face_swap"), biadapt::ConfigError);
  CHECK_THROWS_AS(synth::generate_domain(synth::ManipKind::patch_swap, 1, 2, 8, 32),
                  biadapt::SizeError);
  CHECK_THROWS_AS(synth::generate_domain(synth::ManipKind::patch_swap, 1, 8, 8, 48),
                  biadapt::ConfigError);
}

TEST_CASE("region_noise modifies only the region") {
  Rng rng(42);
  auto style = synth::domain_style(synth::ManipKind::region_noise);
  Image base = synth::make_real(style, rng, 32);
  synth::Region reg;
  Image fake = synth::apply_region_noise(base, rng, &reg);
  double inside = 0.0;
  long n_inside = 0;
  double outside = 0.0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) {
        double diff = std::abs(fake.at(y, x, c) - base.at(y, x, c));
        bool in = y >= reg.y0 && y < reg.y0 + reg.h && x >= reg.x0 &&
                  x < reg.x0 + reg.w;
        if (in) {
          inside += diff;
          ++n_inside;
        } else {
          outside = std::max(outside, diff);
        }
      }
  CHECK(inside / double(n_inside) > 0.0);
  CHECK(outside == 0.0);
}

TEST_CASE("patch_swap blends the donor in the patch interior") {
  Rng rng(43);
  auto style = synth::domain_style(synth::ManipKind::patch_swap);
  Image base = synth::make_real(style, rng, 32);
  Image donor = synth::make_real(style, rng, 32);
  Image fake = synth::apply_patch_swap(base, donor, rng);
  double changed = 0.0;
  for (std::size_t i = 0; i < fake.data.size(); ++i)
    changed = std::max(changed, std::abs(fake.data[i] - base.data[i]));
  CHECK(changed > 0.05);
}

TEST_CASE("split_domain arithmetic and determinism") {
  auto d = synth::generate_domain(synth::ManipKind::patch_swap, 7, 8, 8, 32);
  auto s1 = biadapt::split_domain(d, 0.75, 5);
  CHECK(s1.train.size() == 12);
  CHECK(s1.test.size() == 4);
  auto s2 = biadapt::split_domain(d, 0.75, 5);
  CHECK(dataset_hashes(s1) == dataset_hashes(s2));

  SECTION("stratified by class") {
    auto half = biadapt::split_domain(d, 0.5, 9);
    int train_real = 0, train_fake = 0, test_real = 0, test_fake = 0;
    for (const auto& s : half.train) (s.label() == 0 ? train_real : train_fake)++;
    for (const auto& s : half.test) (s.label() == 0 ? test_real : test_fake)++;
    CHECK(train_real == 4);
    CHECK(train_fake == 4);
    CHECK(test_real == 4);
    CHECK(test_fake == 4);
  }

  SECTION("train and test are disjoint and cover the pool") {
    auto sp = biadapt::split_domain(d, 0.75, 11);
    auto all = dataset_hashes(sp);
    std::sort(all.begin(), all.end());
    auto orig = dataset_hashes(d);
    std::sort(orig.begin(), orig.end());
    CHECK(all == orig);
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
  }

  SECTION("errors") {
    CHECK_THROWS_AS(biadapt::split_domain(d, 0.0, 1), biadapt::DomainError);
    CHECK_THROWS_AS(biadapt::split_domain(d, 1.0, 1), biadapt::DomainError);
    CHECK_THROWS_AS(biadapt::split_domain(d, 0.02, 1), biadapt::SizeError);
  }
}

TEST_CASE("make_scenario kinds and pooling") {
  auto a = biadapt::split_domain(
      synth::generate_domain(synth::ManipKind::patch_swap, 1, 8, 8, 32), 0.75, 1);
  auto b = biadapt::split_domain(
      synth::generate_domain(synth::ManipKind::local_warp, 2, 8, 8, 32), 0.75, 2);
  auto c = biadapt::split_domain(
      synth::generate_domain(synth::ManipKind::region_noise, 3, 8, 8, 32), 0.75, 3);

  auto o2o = biadapt::make_scenario(a, {b});
  CHECK(o2o.kind == biadapt::ScenarioKind::O2O);
  CHECK(o2o.target_train_pool.size() == b.train.size());
  CHECK_FALSE(o2o.targets[0].labeled);

  auto o2m = biadapt::make_scenario(a, {b, c});
  CHECK(o2m.kind == biadapt::ScenarioKind::O2M);
  CHECK(o2m.target_train_pool.size() == b.train.size() + c.train.size());

  auto unl = biadapt::unlabeled_view(a);
  CHECK_THROWS_AS(biadapt::make_scenario(unl, {b}), biadapt::ConfigError);
}

TEST_CASE("label audit counts reads per domain") {
  auto d = synth::generate_domain(synth::ManipKind::patch_swap, 7, 4, 4, 32);
  LabelAudit::instance().reset();
  CHECK(LabelAudit::instance().count("patch_swap") == 0);
  (void)d.train[0].label();
  (void)d.train[1].label();
  (void)d.train[2].label();
  CHECK(LabelAudit::instance().count("patch_swap") == 3);
  CHECK(LabelAudit::instance().count("local_warp") == 0);
  LabelAudit::instance().reset();
}

TEST_CASE("dataset export and reload round trip") {
  auto d = synth::generate_domain(synth::ManipKind::region_noise, 11, 4, 5, 32);
  fs::path root = fresh_dir("biadapt_synthdata_roundtrip");
  biadapt::io::export_dataset_dir(d, root.string());
  auto back = biadapt::io::load_dataset_dir(root.string(), true, 32, "region_noise");
  REQUIRE(back.n() == d.n());
  int real = 0, fake = 0;
  for (const auto& s : back.train) (s.label() == 0 ? real : fake)++;
  CHECK(real == 4);
  CHECK(fake == 5);
  // 8-bit quantization bounds the reload error
  double worst = 0.0;
  for (std::size_t i = 0; i < back.train.size(); ++i)
    for (std::size_t j = 0; j < back.train[i].image.data.size(); ++j)
      worst = std::max(worst, std::abs(back.train[i].image.data[j] -
                                       d.train[i].image.data[j]));
  CHECK(worst <= 0.5 / 255.0 + 1e-9);
  fs::remove_all(root);
}

TEST_CASE("load_dataset_dir flat unlabeled layout") {
  auto d = synth::generate_domain(synth::ManipKind::patch_swap, 5, 4, 4, 32);
  fs::path root = fresh_dir("biadapt_synthdata_flat");
  auto view = biadapt::unlabeled_view(d);
  biadapt::io::export_dataset_dir(view, root.string());
  auto back = biadapt::io::load_dataset_dir(root.string(), false, 32);
  CHECK(back.n() == 8);
  CHECK_FALSE(back.labeled);
  CHECK(back.train_u.size() == 8);
  fs::remove_all(root);
}

TEST_CASE("load_dataset_dir error contracts") {
  CHECK_THROWS_AS(
      biadapt::io::load_dataset_dir("/nonexistent/biadapt", true, 32),
      biadapt::IngestionError);

  fs::path root = fresh_dir("biadapt_synthdata_errors");
  fs::create_directories(root / "real");
  fs::create_directories(root / "fake");
  fs::create_directories(root / "extra");
  try {
    biadapt::io::load_dataset_dir(root.string(), true, 32);
    FAIL("expected ingestion error");
  } catch (const biadapt::IngestionError& e) {
    CHECK(std::string(e.what()).find("extra") != std::string::npos);
  }
  fs::remove_all(root / "extra");

  std::ofstream(root / "real" / "bad.png") << "not a png";
  try {
    biadapt::io::load_dataset_dir(root.string(), true, 32);
    FAIL("expected ingestion error");
  } catch (const biadapt::IngestionError& e) {
    CHECK(std::string(e.what()).find("bad.png") != std::string::npos);
  }
  fs::remove_all(root);
}

TEST_CASE("reload at a different side rescales") {
  auto d = synth::generate_domain(synth::ManipKind::patch_swap, 5, 4, 4, 32);
  fs::path root = fresh_dir("biadapt_synthdata_rescale");
  biadapt::io::export_dataset_dir(d, root.string());
  auto back = biadapt::io::load_dataset_dir(root.string(), true, 64);
  CHECK(back.train[0].image.h == 64);
  CHECK(back.train[0].image.w == 64);
  fs::remove_all(root);
}
