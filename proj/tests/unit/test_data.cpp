// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>

#include "convfuse/data.hpp"
#include "convfuse/error.hpp"

namespace convfuse {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("convfuse_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

SyntheticParams small(std::size_t count = 40) {
  SyntheticParams p;
  p.count = count;
  return p;
}

// ---- generation -------------------------------------------------------------------

TEST(Synthetic, SameSeedSameCorpus) {
  EXPECT_EQ(gen_synthetic(small(), 7), gen_synthetic(small(), 7));
  EXPECT_NE(gen_synthetic(small(), 7), gen_synthetic(small(), 8));
}

TEST(Synthetic, ZeroAnomalyRateIsAllNormal) {
  SyntheticParams p = small();
  p.anomaly_rate = 0.0;
  for (const Sample& s : gen_synthetic(p, 1)) {
    EXPECT_EQ(s.label, 0);
    EXPECT_EQ(std::accumulate(s.mask.begin(), s.mask.end(), 0), 0);
  }
}

TEST(Synthetic, DefectFractionCensus) {
  for (TextureFamily family : {TextureFamily::Noise, TextureFamily::Grid, TextureFamily::Mixed}) {
    SyntheticParams p = small(200);
    p.texture = family;
    std::size_t anomalous = 0;
    for (const Sample& s : gen_synthetic(p, 3)) {
      const double area = std::accumulate(s.mask.begin(), s.mask.end(), 0.0);
      // Mask all-zero iff label 0.
      EXPECT_EQ(area > 0, s.label == 1) << s.id;
      if (!s.label) continue;
      ++anomalous;
      const double fraction = area / static_cast<double>(s.mask.size());
      EXPECT_GE(fraction, p.min_defect_fraction) << s.id;
      EXPECT_LE(fraction, p.max_defect_fraction) << s.id;
    }
    EXPECT_EQ(anomalous, 100u);
  }
}

TEST(Synthetic, DefectIsSeparableFromTexture) {
  // Mean inside the defect departs from the mean outside by at least
  // min_delta texture deviations (minus 8-bit rounding).
  SyntheticParams p = small(60);
  p.brightness_min = p.brightness_max = 128.0;
  for (const Sample& s : gen_synthetic(p, 4)) {
    if (!s.label) continue;
    double in = 0, out = 0, n_in = 0, n_out = 0;
    for (std::size_t k = 0; k < s.pixels.size(); ++k) {
      (s.mask[k] ? in : out) += s.pixels[k];
      (s.mask[k] ? n_in : n_out) += 1;
    }
    EXPECT_GT(std::abs(in / n_in - out / n_out), 0.5 * p.min_delta * p.texture_std) << s.id;
  }
}

TEST(Synthetic, IdsAndSizes) {
  SyntheticParams p = small(12);
  p.image_size = 16;
  p.id_prefix = "q";
  const auto samples = gen_synthetic(p, 1);
  ASSERT_EQ(samples.size(), 12u);
  EXPECT_EQ(samples[0].id.rfind("q", 0), 0u);
  for (const Sample& s : samples) {
    EXPECT_EQ(s.pixels.size(), 256u);
    EXPECT_EQ(s.mask.size(), 256u);
  }
}

TEST(Synthetic, DefectLargerThanImageIsAConfigError) {
  SyntheticParams p = small();
  p.min_defect_fraction = 1.5;
  p.max_defect_fraction = 2.0;
  EXPECT_THROW(gen_synthetic(p, 1), ConfigError);
  EXPECT_THROW(parse_texture_family("plaid"), ConfigError);
  EXPECT_EQ(parse_texture_family(texture_family_name(TextureFamily::Grid)), TextureFamily::Grid);
}

TEST(Synthetic, TensorsNormalizeAndStack) {
  const auto samples = gen_synthetic(small(3), 2);
  const std::vector<const Sample*> batch{&samples[0], &samples[2]};
  const Tensor t = images_tensor(batch), m = masks_tensor(batch);
  EXPECT_EQ(t.shape(), (Shape{2, 1, 32, 32}));
  EXPECT_EQ(m.shape(), (Shape{2, 32, 32}));
  EXPECT_DOUBLE_EQ(t.at(1, 0, 0, 5), normalize_pixel(samples[2].pixels[5]));
  EXPECT_DOUBLE_EQ(normalize_pixel(0), -2.0);
  EXPECT_DOUBLE_EQ(normalize_pixel(255), 2.0);
  EXPECT_THROW(images_tensor({}), ShapeError);
}

// ---- on-disk layout ---------------------------------------------------------------

TEST(Dataset, ExportThenLoadRoundTrips) {
  TempDir dir;
  auto samples = gen_synthetic(small(30), 5);
  export_dataset(dir.path(), "test", samples);
  std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
  EXPECT_EQ(load_dataset(dir.path(), "test"), samples);
}

TEST(Dataset, EmptyDefectFolderGivesAllNormal) {
  TempDir dir;
  SyntheticParams p = small(5);
  p.anomaly_rate = 0.0;
  export_dataset(dir.path(), "train", gen_synthetic(p, 1));
  fs::create_directories(dir.path() / "train" / "defect");
  const auto loaded = load_dataset(dir.path(), "train");
  ASSERT_EQ(loaded.size(), 5u);
  for (const Sample& s : loaded) EXPECT_EQ(s.label, 0);
}

TEST(Dataset, MissingMaskNamesTheId) {
  TempDir dir;
  SyntheticParams p = small(6);
  p.anomaly_rate = 1.0;
  const auto samples = gen_synthetic(p, 1);
  export_dataset(dir.path(), "test", samples);
  fs::remove(dir.path() / "ground_truth" / "defect" / (samples[3].id + "_mask.pgm"));
  try {
    load_dataset(dir.path(), "test");
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("'" + samples[3].id + "'"), std::string::npos) << e.what();
  }
}

TEST(Dataset, CorruptHeaderNamesThePath) {
  TempDir dir;
  export_dataset(dir.path(), "test", gen_synthetic(small(2), 1));
  const fs::path bad = dir.path() / "test" / "good" / "zz.pgm";
  std::ofstream(bad) << "P2\n3 3\n255\n";
  try {
    load_dataset(dir.path(), "test");
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find(bad.string()), std::string::npos) << e.what();
  }
  std::ofstream(bad, std::ios::binary) << "P5\n4 4\n255\nabc";
  EXPECT_THROW(read_pgm(bad), LoadError);
  EXPECT_THROW(load_dataset(dir.path(), "nosuch"), LoadError);
}

TEST(Graymap, SixteenBitRoundTrip) {
  TempDir dir;
  Graymap g{3, 2, 65535, {0, 1, 256, 40000, 65535, 7}};
  write_pgm(dir.path() / "g.pgm", g);
  const Graymap r = read_pgm(dir.path() / "g.pgm");
  EXPECT_EQ(r.width, 3u);
  EXPECT_EQ(r.height, 2u);
  EXPECT_EQ(r.maxval, 65535u);
  EXPECT_EQ(r.values, g.values);
  // Big-endian sample order on disk.
  std::ifstream in(dir.path() / "g.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - 12 + 4]), 1u);
}

}  // namespace
}  // namespace convfuse
