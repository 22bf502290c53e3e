#include <gtest/gtest.h>

#include <cmath>

#include "deepsteer/data.hpp"
#include "deepsteer/synthetic.hpp"
#include "test_util.hpp"

namespace ds = deepsteer;

namespace {

ds::SyntheticSpec small_spec(std::uint64_t seed, std::size_t w = 64, std::size_t h = 48) {
  ds::SyntheticSpec s;
  s.sequences = 3;
  s.frames_per_sequence = 60;
  s.width = w;
  s.height = h;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Synthetic, HorizonRowScalesFromFullResolution) {
  EXPECT_EQ(ds::horizon_row(480), 200u);
  EXPECT_EQ(ds::horizon_row(48), 20u);
  EXPECT_EQ(ds::horizon_row(24), 10u);
}

TEST(Synthetic, SameSeedSameCorpus) {
  const auto a = ds::gen_synthetic(small_spec(5));
  const auto b = ds::gen_synthetic(small_spec(5));
  const auto c = ds::gen_synthetic(small_spec(6));
  ASSERT_EQ(a.sequences.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(a.sequences[s], b.sequences[s]);
    EXPECT_EQ(a.lane[s], b.lane[s]);
  }
  EXPECT_NE(a.sequences[0].records, c.sequences[0].records);
}

TEST(Synthetic, LabelsFollowTheCurvature) {
  const auto spec = small_spec(11);
  const auto corpus = ds::gen_synthetic(spec);
  double speed_sum = 0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < corpus.sequences.size(); ++s) {
    const auto& seq = corpus.sequences[s];
    ASSERT_EQ(seq.size(), spec.frames_per_sequence);
    for (std::size_t k = 0; k < seq.size(); ++k) {
      const auto& r = seq.records[k];
      const double c = corpus.curvature[s][k];
      EXPECT_LE(std::abs(c), spec.curvature_bound);
      EXPECT_EQ(r.angle, ds::kSyntheticKappa * c);
      EXPECT_EQ(r.torque, k == 0 ? 0.0 : (r.angle - seq.records[k - 1].angle) * 20.0);
      EXPECT_EQ(r.timestamp_ms, static_cast<std::int64_t>(s * 1000000 + k * 50));
      EXPECT_EQ(seq.frames[k].width, spec.width);
      EXPECT_EQ(seq.frames[k].height, spec.height);
      speed_sum += r.speed;
      ++n;
    }
  }
  EXPECT_NEAR(speed_sum / n, spec.speed_mean, 0.05);
}

TEST(Synthetic, CurvatureWalkStaysInsideTheBound) {
  auto spec = small_spec(3);
  spec.walk_sigma = 0.3;  // hits the walls often
  spec.curvature_bound = 0.4;
  const auto corpus = ds::gen_synthetic(spec);
  bool near_wall = false;
  for (const auto& cs : corpus.curvature)
    for (double c : cs) {
      ASSERT_LE(std::abs(c), 0.4 + 1e-12);
      near_wall = near_wall || std::abs(c) > 0.3;
    }
  EXPECT_TRUE(near_wall);
}

TEST(Synthetic, MirroredRenderEqualsNegatedCurvature) {
  for (auto [w, h] : {std::pair<std::size_t, std::size_t>{64, 48}, {33, 21}}) {
    auto spec = small_spec(21, w, h);
    const auto pos = ds::gen_synthetic(spec);
    spec.negate_curvature = true;
    const auto neg = ds::gen_synthetic(spec);
    for (std::size_t s = 0; s < pos.sequences.size(); ++s) {
      const auto mirrored = ds::mirror_augment(pos.sequences[s]);
      ASSERT_EQ(mirrored, neg.sequences[s]) << "sequence " << s << " at " << w << "x" << h;
      for (std::size_t k = 0; k < pos.lane[s].size(); ++k) {
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            ASSERT_EQ(neg.lane[s][k][y * w + x], pos.lane[s][k][y * w + (w - 1 - x)]);
          }
      }
    }
  }
}

TEST(Synthetic, LaneBandIsBrightAndBelowTheHorizon) {
  const auto spec = small_spec(8);
  const auto corpus = ds::gen_synthetic(spec);
  const std::size_t hz = ds::horizon_row(spec.height);
  for (std::size_t s = 0; s < corpus.sequences.size(); ++s)
    for (std::size_t k = 0; k < spec.frames_per_sequence; k += 7) {
      const auto& mask = corpus.lane[s][k];
      const auto& img = corpus.sequences[s].frames[k];
      double lane = 0, road = 0;
      std::size_t nl = 0, nr = 0;
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
          const bool on = mask[y * spec.width + x] != 0;
          if (y < hz) {
            ASSERT_FALSE(on);
            continue;
          }
          (on ? lane : road) += img.at(x, y, 0);
          ++(on ? nl : nr);
        }
      ASSERT_GT(nl, spec.height - hz);  // at least a pixel per row on average
      EXPECT_GT(lane / nl, road / nr + 100.0);
    }
}

TEST(Synthetic, RenderIsNoiseFreeWithZeroNoise) {
  const std::size_t w = 16, h = 12;
  const std::vector<double> field(w * h, 0.7);
  const ds::Image img = ds::render_road(w, h, 0.0, field, 0.0, 1.0);
  EXPECT_EQ(img.at(0, 0, 0), 70);
  EXPECT_EQ(img.at(0, 0, 2), 130);
  EXPECT_EQ(img.at(0, h - 1, 0), 45);
  EXPECT_EQ(ds::mirror_image(img), img);
}

TEST(Synthetic, CorpusSurvivesLogRoundTrip) {
  auto spec = small_spec(4);
  spec.frames_per_sequence = 12;
  auto corpus = ds::gen_synthetic(spec);
  ds::testing::TempDir dir("synth");
  ds::save_log(corpus.sequences, dir.path());
  const auto back = ds::load_log(dir.path() / "log.csv", dir.path() / "frames");
  ASSERT_EQ(back.size(), corpus.sequences.size());
  for (std::size_t s = 0; s < back.size(); ++s) EXPECT_EQ(back[s], corpus.sequences[s]);
}

TEST(Synthetic, InvalidSpecThrows) {
  auto spec = small_spec(1);
  spec.width = 1;
  EXPECT_THROW(ds::gen_synthetic(spec), ds::DataError);
  spec = small_spec(1);
  spec.frames_per_sequence = 0;
  EXPECT_THROW(ds::gen_synthetic(spec), ds::DataError);
}
